"""Reflected diffusion in narrow planar channels and its limit on the identification graph."""
from .geometry import StripComplex, build_strip_complex, fork, load_domain, rectangle, sine_strip, sloped_fork
from .graph_core import GraphSkeleton, build_graph
from .graph_operator import DiscreteGraphOperator, apply_semigroup, assemble_generator
from .reflected_sim import SimConfig, mc_expectation

__all__ = [
    "DiscreteGraphOperator", "GraphSkeleton", "SimConfig", "StripComplex", "apply_semigroup",
    "assemble_generator", "build_graph", "build_strip_complex", "fork", "load_domain", "mc_expectation",
    "rectangle", "sine_strip", "sloped_fork",
]
__version__ = "0.1.0"
