"""Federated SGD with stale-gradient reuse: simulator and analysis tools."""

__version__ = "0.1.0"

from .core import RoundRecord, RunConfig, run_round, run_training, setup_problem  # noqa: E402
from .losses import FederatedDataset, LossModel, generate_dataset  # noqa: E402
from .staleness import SelectionPlan, geometric_pmf  # noqa: E402

__all__ = [
    "FederatedDataset",
    "LossModel",
    "RoundRecord",
    "RunConfig",
    "SelectionPlan",
    "generate_dataset",
    "geometric_pmf",
    "run_round",
    "run_training",
    "setup_problem",
]
