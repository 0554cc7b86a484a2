"""Self-explaining patch-voting classifier trained to emit its own Shapley values.

Also ships exact and KernelSHAP Shapley solvers and patch-level faithfulness
metrics used to check the explanations against brute force.
"""

from .estimator import ShapleyVotingClassifier
from .game import (
    FunctionGame,
    GameOracle,
    ShapleyKernel,
    TabularGame,
    enumerate_coalitions,
    exact_shapley,
    kernel_weight,
    sample_coalition,
    sample_coalition_paired,
)
from .model import PatchNet, decompose, exact_patch_shapley, reassemble
from .trainer import TrainConfig, train
from .wls import WlsProblem, estimate_shapley_sampled, solve_constrained_wls

__version__ = "0.1.0"

__all__ = [
    "FunctionGame",
    "GameOracle",
    "PatchNet",
    "ShapleyKernel",
    "ShapleyVotingClassifier",
    "TabularGame",
    "TrainConfig",
    "WlsProblem",
    "decompose",
    "enumerate_coalitions",
    "estimate_shapley_sampled",
    "exact_patch_shapley",
    "exact_shapley",
    "kernel_weight",
    "reassemble",
    "sample_coalition",
    "sample_coalition_paired",
    "solve_constrained_wls",
    "train",
]
