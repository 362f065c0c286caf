"""Model merging with directional alignment.

Data-free merging projects a shared low-rank subspace of the task vectors
onto a simplex equiangular tight frame; data-based refinement then learns
layer-wise fusion coefficients and per-task feature rotations.
"""

from .chkpt import Checkpoint, FusionCoefficients, TaskVector
from .etf import ClassFrame, align_operator, build_etf, build_orthogonal
from .param_align import MdaConfig, merge_mda_ta
from .feature_align import AlignHParams, optimize
from .metrics import MergeReport

__all__ = [
    "AlignHParams",
    "Checkpoint",
    "ClassFrame",
    "FusionCoefficients",
    "MdaConfig",
    "MergeReport",
    "TaskVector",
    "align_operator",
    "build_etf",
    "build_orthogonal",
    "merge_mda_ta",
    "optimize",
]

__version__ = "0.1.0"
