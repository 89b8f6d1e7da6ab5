"""Energy-based crystal structure prediction with a periodic graph network."""

from .crystal import PeriodicUnit, apply_basis_change, atomic_density, validate, wrap_to_cell
from .evaluator import MatchTolerances, evaluate_csp, match_structures
from .model import ModelConfig, energies, energy, init_params
from .niggli import niggli_reduce
from .sampler import AnnealSchedule, sample, sample_many
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule",
    "MatchTolerances",
    "ModelConfig",
    "PeriodicUnit",
    "TrainConfig",
    "apply_basis_change",
    "atomic_density",
    "energies",
    "energy",
    "evaluate_csp",
    "init_params",
    "match_structures",
    "niggli_reduce",
    "sample",
    "sample_many",
    "train",
    "validate",
    "wrap_to_cell",
]
