"""Desk-scale self-supervised representation learning.

Fuses three contrastive objectives over a momentum/online encoder pair:
neighbour contrast against support-set retrievals, centroid contrast through
a small self-attention sequence encoder, and redundancy-reduction feature
contrast. Everything runs on an in-package float64 autodiff engine with a
finite-difference gradient oracle.
"""

from .config import AugmentationSpec, DatasetSpec, ModelSpec, TrainConfig
from .objectives import ObjectiveParams
from .tensor import Tape, Tensor, finite_diff_check

__all__ = [
    "AugmentationSpec",
    "DatasetSpec",
    "ModelSpec",
    "ObjectiveParams",
    "Tape",
    "Tensor",
    "TrainConfig",
    "finite_diff_check",
]

__version__ = "0.1.0"
