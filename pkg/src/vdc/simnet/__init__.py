"""Simulated grid of compute elements driving the catalog server."""

from .kernels import BACKEND, splitmix64, splitmix64_bytes
from .sim import SimConfig, SimReport, execute_plan, pipeline_transformation, run_simulation, setup_production
from .transform import simulated_transform

__all__ = [
    "BACKEND",
    "SimConfig",
    "SimReport",
    "execute_plan",
    "pipeline_transformation",
    "run_simulation",
    "setup_production",
    "simulated_transform",
    "splitmix64",
    "splitmix64_bytes",
]
