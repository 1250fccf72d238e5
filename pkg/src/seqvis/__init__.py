"""Saliency-guided sequential visual access.

Builds question-conditioned region banks from patch features and trains a
small policy that reads regions one at a time and decides when to stop,
first by curriculum behaviour cloning and then by group-relative policy
optimisation, all on a synthetic environment with a frozen toy reasoner.
"""

from .envsim import EnvConfig, TaskInstance, ToyReasoner, generate_task, generate_tasks, rollout
from .estimator import SequentialVisualPolicy
from .policy import Action, PolicyConfig, PolicyParams
from .regions import RegionBank, RegionBankBuilder, build_region_bank
from .saliency import PatchGrid, SaliencyMap, compute_saliency
from .training import TrainConfig

__all__ = [
    "Action",
    "EnvConfig",
    "PatchGrid",
    "PolicyConfig",
    "PolicyParams",
    "RegionBank",
    "RegionBankBuilder",
    "SaliencyMap",
    "SequentialVisualPolicy",
    "TaskInstance",
    "ToyReasoner",
    "TrainConfig",
    "build_region_bank",
    "compute_saliency",
    "generate_task",
    "generate_tasks",
    "rollout",
]

__version__ = "0.1.0"
