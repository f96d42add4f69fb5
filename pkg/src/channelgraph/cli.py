"""Configuration-driven experiment runner.

``channelgraph run CONFIG`` executes one experiment and writes
``<output>/<kind>.csv`` plus ``<output>/<kind>.json`` (metadata);
``validate CONFIG`` only checks the configuration; ``selfcheck DOMAIN`` runs
the operator invariants on a domain file.  The exit code is 1 when an
acceptance assertion fails and 2 when the configuration is invalid.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import re
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .experiments import (Observable, equilibration_chi2, equilibration_ks, frozen_slow_ladder,
                          local_time_ladder, operator_selfchecks, semigroup_fv_ladder,
                          semigroup_mc_ladder, spde_ladder)
from .geometry import DomainError, load_domain
from .graph_core import build_graph, decay_lambdas
from .graph_operator import assemble_generator
from .graph_spde import REACTIONS, CompareConfig
from .reflected_sim import simulate_batch

KINDS = ("semigroup-convergence", "spde-convergence", "frozen-slow", "local-time", "equilibration",
         "operator-selfchecks")

DEFAULTS = {
    "semigroup-convergence": {
        "method": "mc", "eps": [0.4, 0.2, 0.1], "t": [0.5, 1.0], "paths": 20000, "dt": None,
        "dt_factor": 0.05, "observable": "cos(x)*(1+y)", "z0": [math.pi, 1.0], "cells_per_edge": 400,
        "h": 0.025, "t_lo": 0.25, "T": 1.0, "pde_dt": 0.005,
    },
    "spde-convergence": {
        "eps": [0.4, 0.2, 0.1], "h": 0.05, "cells_per_edge": 200, "dt": 0.01, "T": 1.0, "tau": 0.25,
        "paths": 100, "noise": "geometric:4", "b": "tanh", "observable": "cos(x)*(1+y)",
    },
    "frozen-slow": {
        "eps": [0.2, 0.1, 0.05], "paths": 5000, "z0": [math.pi, 1.0], "T": 1.0, "kappa1": 0.5,
        "dt": None, "dt_factor": 0.05,
    },
    "local-time": {
        "eps": [0.2, 0.1, 0.05], "paths": 5000, "z0": [math.pi, 1.0], "T": 1.0, "kappa1": 0.5,
        "dt": None, "dt_factor": 0.05,
    },
    "equilibration": {
        "eps_ks": 0.05, "samples": 10000, "eps_chi2": 0.5, "T": 50.0, "paths": 5000, "bins": 10,
        "z0": [math.pi, 1.0], "kappa1": 0.5, "dt_factor": 0.05,
    },
    "operator-selfchecks": {"cases": 100, "n_per_edge": 32, "cells_per_edge": 32},
}

TOLERANCES = {
    "semigroup-convergence": {"final_gap": 0.03, "se_multiple": 3.0, "final_rel": 0.05},
    "spde-convergence": {},
    "frozen-slow": {},
    "local-time": {"slack": 1.5},
    "equilibration": {"ks": 0.05, "alpha": 0.01},
    "operator-selfchecks": {"identity": 1e-8},
}

DUMP_PATHS = 100  # paths written by --dump-paths (smallest eps)
DUMP_RECORDS = 1000  # approximate records per dumped path

# parameters carrying a time step that must satisfy dt <= eps^2/10
_SDE_KINDS = {"frozen-slow", "local-time"}


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` names the file and line."""


@dataclass
class ExperimentConfig:
    domain: Path
    kind: str
    params: dict
    seed: int = 0
    output: Path = Path("out")
    tolerances: dict = field(default_factory=dict)
    source: Path | None = None

    def echo(self) -> dict:
        d = asdict(self)
        d["domain"], d["output"] = str(self.domain), str(self.output)
        d["source"] = None if self.source is None else str(self.source)
        return d


# configuration ---------------------------------------------------------------------

def _line_of(text: str, key: str) -> int | None:
    pat = re.compile(rf'^\s*"?{re.escape(key)}"?\s*[:=]')
    for i, line in enumerate(text.splitlines(), 1):
        if pat.search(line):
            return i
    return None


def _fail(path: Path, text: str, key: str | None, msg: str):
    line = _line_of(text, key) if key else None
    where = f"{path}:{line}" if line else str(path)
    raise ConfigError(f"{where}: {msg}")


def _parse_text(path: Path, text: str) -> dict:
    if path.suffix.lower() == ".toml":
        import tomli
        try:
            return tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"{path}:{m.group(1) if m else '?'}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg} (column {exc.colno})") from None


def _floats(v) -> list[float]:
    if isinstance(v, str):
        return [float(s) for s in v.split(",") if s.strip()]
    if isinstance(v, (int, float)):
        return [float(v)]
    return [float(s) for s in v]


def parse_noise(spec: str) -> np.ndarray:
    """``law:n`` or ``law:n:s`` with law ``geometric`` (``s^-j``) or ``power`` (``j^-s``)."""
    parts = spec.split(":")
    if len(parts) not in (2, 3) or parts[0] not in ("geometric", "power"):
        raise ValueError(f"noise spec must be geometric:N[:s] or power:N[:s], got {spec!r}")
    n = int(parts[1])
    if n < 1:
        raise ValueError("noise needs at least one mode")
    s = float(parts[2]) if len(parts) == 3 else 2.0
    return decay_lambdas(n, parts[0], s)


def validate_config(raw: dict, path: Path, text: str = "") -> ExperimentConfig:
    base = path.parent
    if not isinstance(raw, dict):
        _fail(path, text, None, "top level must be a table/object")
    kind = raw.get("kind")
    if kind not in KINDS:
        _fail(path, text, "kind", f"kind must be one of {', '.join(KINDS)}; got {kind!r}")
    if "domain" not in raw:
        _fail(path, text, None, "missing required key 'domain'")
    domain = Path(raw["domain"])
    domain = domain if domain.is_absolute() else base / domain
    if not domain.is_file():
        _fail(path, text, "domain", f"domain file {domain} does not exist")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _fail(path, text, "seed", "seed must be a non-negative integer")
    out = Path(raw.get("output", "out"))
    out = out if out.is_absolute() else base / out
    unknown = set(raw) - {"kind", "domain", "seed", "output", "params", "tolerances"}
    if unknown:
        key = sorted(unknown)[0]
        _fail(path, text, key, f"unknown key {key!r}")

    params = dict(DEFAULTS[kind])
    given = raw.get("params", {})
    if not isinstance(given, dict):
        _fail(path, text, "params", "params must be a table/object")
    for k, v in given.items():
        if k not in params:
            _fail(path, text, k, f"unknown parameter {k!r} for kind {kind}")
        params[k] = v
    tols = dict(TOLERANCES[kind])
    for k, v in raw.get("tolerances", {}).items():
        if k not in tols:
            _fail(path, text, k, f"unknown tolerance {k!r} for kind {kind}")
        if not isinstance(v, (int, float)) or v < 0:
            _fail(path, text, k, f"tolerance {k!r} must be a non-negative number")
        tols[k] = float(v)
    try:
        _check_params(kind, params)
    except (ValueError, TypeError) as exc:
        key = exc.args[1] if len(exc.args) > 1 else None
        _fail(path, text, key, str(exc.args[0]))
    return ExperimentConfig(domain, kind, params, seed, out, tols, path)


def _check_params(kind: str, p: dict) -> None:
    """Normalize and range-check ``p`` in place; errors carry the offending key."""
    for key in ("eps", "t"):
        if key in p:
            try:
                p[key] = _floats(p[key])
            except (TypeError, ValueError):
                raise ValueError(f"{key} must be a number or a list of numbers", key) from None
            if not p[key]:
                raise ValueError(f"{key} must not be empty", key)
    for e in p.get("eps", []):
        if not 0 < e <= 1:
            raise ValueError(f"eps must lie in (0, 1]; got {e}", "eps")
    for key in ("eps_ks", "eps_chi2"):
        if key in p and not 0 < float(p[key]) <= 1:
            raise ValueError(f"{key} must lie in (0, 1]", key)
    for key in ("paths", "samples", "cells_per_edge", "cases", "n_per_edge", "bins"):
        if key in p and (not isinstance(p[key], int) or isinstance(p[key], bool) or p[key] < 1):
            raise ValueError(f"{key} must be a positive integer", key)
    for key in ("h", "T", "kappa1", "dt_factor", "pde_dt", "tau"):
        if key in p and p[key] is not None and not float(p[key]) > 0:
            raise ValueError(f"{key} must be positive", key)
    if p.get("dt_factor") is not None and float(p["dt_factor"]) > 0.1:
        raise ValueError("dt_factor must not exceed 1/10 (dt <= eps^2/10)", "dt_factor")
    if p.get("dt") is not None:
        dt = float(p["dt"])
        if dt <= 0:
            raise ValueError("dt must be positive", "dt")
        if (kind in _SDE_KINDS or (kind == "semigroup-convergence" and p["method"] == "mc")) \
                and dt > min(p["eps"]) ** 2 / 10 * (1 + 1e-12):
            raise ValueError(f"dt={dt} violates dt <= eps^2/10 at eps={min(p['eps'])}", "dt")
    if "method" in p and p["method"] not in ("mc", "fv"):
        raise ValueError("method must be mc or fv", "method")
    if "observable" in p:
        try:
            Observable(str(p["observable"]))
        except (SyntaxError, ValueError) as exc:
            raise ValueError(f"bad observable: {exc}", "observable") from None
    if "noise" in p:
        try:
            parse_noise(str(p["noise"]))
        except ValueError as exc:
            raise ValueError(str(exc), "noise") from None
    if "b" in p and p["b"] not in REACTIONS:
        raise ValueError(f"b must be one of {', '.join(REACTIONS)}", "b")
    for key in ("t", "tau"):
        if key in p and p[key] is not None and "T" in p:
            vals = p[key] if isinstance(p[key], list) else [p[key]]
            if max(vals) > float(p["T"]) + 1e-12:
                raise ValueError(f"{key} must not exceed T", key)
    if "z0" in p and (not isinstance(p["z0"], (list, tuple)) or len(p["z0"]) != 2):
        raise ValueError("z0 must be a pair [x, y]", "z0")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    text = path.read_text()
    raw = _parse_text(path, text)
    if overrides:
        raw = dict(raw)
        params = dict(raw.get("params", {}))
        for k, v in overrides.items():
            if k == "seed":
                raw["seed"] = v
            elif k == "output":
                raw["output"] = str(Path(v).resolve())
            else:
                if k not in DEFAULTS.get(raw.get("kind"), {}):
                    raise ConfigError(f"{path}: option --{k.replace('_', '-')} does not apply to "
                                      f"kind {raw.get('kind')!r}")
                params[k] = v
        raw["params"] = params
    return validate_config(raw, path, text)


# running ------------------------------------------------------------------------------

def _git_hash() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def _dump_paths(cfg: ExperimentConfig, sc, path: Path) -> None:
    p = cfg.params
    eps = min(p["eps"])
    dt = p["dt"] if p.get("dt") is not None else eps ** 2 * p["dt_factor"]
    T = max(p.get("t", [p.get("T", 1.0)]))
    n_steps = int(round(T / dt))
    stride = max(1, n_steps // DUMP_RECORDS)
    steps = sorted(set(range(0, n_steps + 1, stride)) | {n_steps})
    rec = simulate_batch(sc, tuple(p["z0"]), eps, dt, n_steps, min(p["paths"], DUMP_PATHS),
                         rngmod.stream(cfg.seed, "dump-paths", 0), steps)
    rec.to_records().tofile(path)


def execute(cfg: ExperimentConfig, dump_paths: Path | None = None) -> tuple[list[dict], bool, dict]:
    """Run the experiment; returns ``(rows, passed, extra tables)``."""
    sc = load_domain(cfg.domain)
    p, tol = cfg.params, cfg.tolerances
    extra: dict[str, list[dict]] = {}
    if cfg.kind == "semigroup-convergence":
        phi = Observable(str(p["observable"]))
        if p["method"] == "mc":
            rows, ok = semigroup_mc_ladder(sc, phi, tuple(p["z0"]), p["eps"], p["t"], p["paths"], cfg.seed,
                                           p["dt_factor"], tol["final_gap"], p["cells_per_edge"], p["dt"],
                                           tol["se_multiple"])
            if dump_paths is not None:
                _dump_paths(cfg, sc, dump_paths)
        else:
            rows, ok = semigroup_fv_ladder(sc, phi, p["eps"], p["h"], p["cells_per_edge"], p["pde_dt"],
                                           p["t_lo"], p["T"], tol["final_rel"])
    elif cfg.kind == "spde-convergence":
        lam = parse_noise(p["noise"])
        cc = CompareConfig(eps=tuple(p["eps"]), h=p["h"], cells_per_edge=p["cells_per_edge"], dt=p["dt"],
                           T=p["T"], tau=p["tau"], n_real=p["paths"], n_modes=lam.size,
                           lambdas=tuple(lam), b=p["b"], u0=Observable(str(p["observable"])), seed=cfg.seed)
        trace: list[dict] = []
        rows, ok = spde_ladder(sc, cc, trace)
        extra["trajectory"] = trace
    elif cfg.kind in ("frozen-slow", "local-time"):
        args = (sc, tuple(p["z0"]), p["eps"], p["paths"], cfg.seed, p["T"], p["kappa1"], p["dt_factor"])
        if cfg.kind == "frozen-slow":
            rows, ok = frozen_slow_ladder(*args, dt=p["dt"])
        else:
            rows, ok = local_time_ladder(*args, slack=tol["slack"], dt=p["dt"])
        if dump_paths is not None:
            _dump_paths(cfg, sc, dump_paths)
    elif cfg.kind == "equilibration":
        rows = [equilibration_ks(sc, tuple(p["z0"]), p["eps_ks"], p["samples"], cfg.seed, p["kappa1"],
                                 p["dt_factor"], tol["ks"]),
                equilibration_chi2(sc, tuple(p["z0"]), p["eps_chi2"], p["T"], p["paths"], cfg.seed,
                                   p["bins"], tol["alpha"], p["dt_factor"])]
        ok = all(r["pass"] for r in rows)
    else:
        rows, ok = operator_selfchecks(sc, cfg.seed, p["cases"], p["n_per_edge"], p["cells_per_edge"],
                                       tol["identity"])
    return rows, ok, extra


def run_experiment(cfg: ExperimentConfig, dump_paths: Path | None = None) -> bool:
    """Run and write ``<kind>.csv`` (+ extra tables) and ``<kind>.json``; returns the verdict."""
    t0 = time.perf_counter()
    rows, ok, extra = execute(cfg, dump_paths)
    wall = time.perf_counter() - t0
    cfg.output.mkdir(parents=True, exist_ok=True)
    files = {f"{cfg.kind}.csv": rows}
    files.update({f"{cfg.kind}_{name}.csv": tab for name, tab in extra.items()})
    for name, tab in files.items():
        (cfg.output / name).write_text(_csv_text(tab))
    meta = {
        "kind": cfg.kind, "passed": bool(ok), "git_hash": _git_hash(), "wall_time_s": wall,
        "config": cfg.echo(), "tolerances": cfg.tolerances, "tables": sorted(files),
        "columns": {n: list(t[0]) if t else [] for n, t in files.items()},
        "workers": int(os.environ.get("CHANNELGRAPH_WORKERS", "1") or 1),
        "python": platform.python_version(), "numpy": np.__version__,
        "dump_paths": None if dump_paths is None else str(dump_paths),
    }
    (cfg.output / f"{cfg.kind}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bool(ok)


# command line -----------------------------------------------------------------------------

def _overrides(args) -> dict:
    out = {}
    for name in ("eps", "dt", "paths", "seed", "t", "observable", "cells_per_edge", "h", "T", "noise",
                 "b", "output"):
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="channelgraph", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        p = sub.add_parser(name, help=f"{name} an experiment configuration (JSON or TOML)")
        p.add_argument("config", type=Path)
        p.add_argument("--eps", help="comma-separated eps ladder")
        p.add_argument("--dt", type=float)
        p.add_argument("--paths", type=int, help="paths, pairs or realizations")
        p.add_argument("--seed", type=int)
        p.add_argument("--t", help="comma-separated evaluation times")
        p.add_argument("--observable", help="expression in x and y, e.g. 'cos(x)*(1+y)'")
        p.add_argument("--cells-per-edge", dest="cells_per_edge", type=int)
        p.add_argument("--h", type=float, help="channel grid spacing")
        p.add_argument("--T", type=float, help="final time")
        p.add_argument("--noise", help="geometric:N[:s] or power:N[:s]")
        p.add_argument("--b", choices=sorted(REACTIONS), help="reaction term")
        p.add_argument("--output", help="output directory")
        if name == "run":
            p.add_argument("--dump-paths", dest="dump_paths", type=Path,
                           help="write float64 path records (path, t, x, y, phi)")
    p = sub.add_parser("selfcheck", help="operator invariants on a domain file")
    p.add_argument("domain", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cells-per-edge", dest="cells_per_edge", type=int, default=32)
    p.add_argument("--dump-operator", dest="dump_operator", type=Path,
                   help="write the assembled graph generator (.npz or .json)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selfcheck":
            sc = load_domain(args.domain)
            rows, ok = operator_selfchecks(sc, args.seed, cells_per_edge=args.cells_per_edge)
            for r in rows:
                print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['check']}: {r['value']:.3e} "
                      f"(tol {r['tolerance']:.1e})")
            if args.dump_operator is not None:
                assemble_generator(build_graph(sc), args.cells_per_edge).dump(args.dump_operator)
            return 0 if ok else 1
        cfg = load_config(args.config, _overrides(args))
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg.kind})")
            return 0
        ok = run_experiment(cfg, args.dump_paths)
        print(f"{cfg.kind}: {'PASS' if ok else 'FAIL'}  -> {cfg.output}")
        return 0 if ok else 1
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
