"""Regenerate the domain files under configs/domains from the built-in constructors."""
from pathlib import Path

from channelgraph.geometry import fork, rectangle, save_domain, sine_strip, sloped_fork

OUT = Path(__file__).resolve().parents[1] / "configs" / "domains"

if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, sc in (("sine_strip", sine_strip()), ("fork", fork()), ("sloped_fork", sloped_fork()),
                     ("unit_square", rectangle())):
        save_domain(sc, OUT / f"{name}.json")
        print(OUT / f"{name}.json")
