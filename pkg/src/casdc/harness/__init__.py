"""Config-driven experiment harness."""

from .config import ExperimentConfig, from_dict, load_config
from .pipeline import run_single
from .plots import emit_plots
from .runner import RunReport, run_experiment, sweep_beta, sweep_ku_fraction

__all__ = [
    "ExperimentConfig",
    "RunReport",
    "emit_plots",
    "from_dict",
    "load_config",
    "run_experiment",
    "run_single",
    "sweep_beta",
    "sweep_ku_fraction",
]
