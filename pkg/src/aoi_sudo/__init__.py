"""Goal-oriented transmission scheduling over fading channels.

Exact value-iteration oracle and structural certificates on small
instances, structure scores for learned networks, and a hybrid
on/off-policy trainer with a plain clipped-surrogate baseline.
"""

from .model import (ChannelModel, CostTable, ProcessModel, SchedAction,
                    SchedState, SystemModel, enumerate_actions,
                    solve_steady_covariance, transition_kernel)
from .scenario import build_model, generate_scenario, load_model
from .structure import MandatorySet, StructureProbe, StructureScores, mandatory_set
from .training import TrainConfig, Trainer, evaluate, train

__all__ = [
    "ChannelModel", "CostTable", "ProcessModel", "SchedAction", "SchedState",
    "SystemModel", "enumerate_actions", "solve_steady_covariance",
    "transition_kernel", "build_model", "generate_scenario", "load_model",
    "MandatorySet", "StructureProbe", "StructureScores", "mandatory_set",
    "TrainConfig", "Trainer", "evaluate", "train",
]

__version__ = "0.1.0"
