"""Self-supervised monocular cuboid lifting.

Interpolated-cuboid point sets with a projective cross-ratio loss, a
from-scratch trainable 2D-to-3D lifting network, orientation recovery by
point-set alignment, synthetic data generation and KITTI-style
evaluation.
"""

__version__ = "0.1.0"

from .geometry import (
    AffineCrop,
    Cuboid,
    DEFAULT_INTERP,
    InterpMatrix,
    PointSet2D,
    PointSet3D,
    build_psi,
    build_tau,
    project,
)
from .crossratio import cr_loss, edge_quadruples, target_cr
from .pose import kabsch_align, recover_orientation, template_psi
from .lifter import LifterNet, TrainConfig, train

__all__ = [
    "AffineCrop",
    "Cuboid",
    "DEFAULT_INTERP",
    "InterpMatrix",
    "LifterNet",
    "PointSet2D",
    "PointSet3D",
    "TrainConfig",
    "build_psi",
    "build_tau",
    "cr_loss",
    "edge_quadruples",
    "kabsch_align",
    "project",
    "recover_orientation",
    "target_cr",
    "template_psi",
    "train",
]
