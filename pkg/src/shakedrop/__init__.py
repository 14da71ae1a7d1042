"""Numpy micro-framework for residual-branch regularizers with decoupled forward/backward scaling.

Forward passes scale a residual branch by a coefficient ``alpha`` while
backward passes scale its gradient by an independently drawn ``beta``.
The package ships the autograd engine, the regularizers (ShakeDrop,
RandomDrop, Shake-Shake, Single-branch Shake), a ResNet-family builder, an
SGD training loop, dataset I/O and the ``shakedrop`` command line.
"""

from shakedrop.autograd import GraphError, Parameter, Tensor, backward, no_grad
from shakedrop.models import ArchitectureSpec, Network, build_network, count_blocks
from shakedrop.regularizers import (
    PRESETS,
    Coefficient,
    CoefficientSpec,
    DecaySchedule,
    Granularity,
    Phase,
    RegularizerConfig,
    RegularizerKind,
    linear_decay,
)
from shakedrop.training import LRSchedule, OptimizerConfig, TrainOptions, evaluate, train

__all__ = [
    "ArchitectureSpec", "Coefficient", "CoefficientSpec", "DecaySchedule", "GraphError",
    "Granularity", "LRSchedule", "Network", "OptimizerConfig", "PRESETS", "Parameter", "Phase",
    "RegularizerConfig", "RegularizerKind", "Tensor", "TrainOptions", "backward", "build_network",
    "count_blocks", "evaluate", "linear_decay", "no_grad", "train",
]
__version__ = "0.1.0"
