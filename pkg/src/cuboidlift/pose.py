"""Rigid-alignment pose recovery and angle conventions.

Egocentric yaw comes out of a predicted shape set by aligning a canonical
template cuboid onto it with the SVD-based orthogonal Procrustes solution
and reading the yaw off the recovered rotation.  Allocentric/egocentric
conversion follows the viewing-angle relation theta = alpha +
atan2(t_x, t_z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Cuboid, DEFAULT_INTERP, PointSet3D, _yaw_matrix, build_psi

_LENGTH_PAIRS = ((0, 4), (1, 5), (2, 6), (3, 7))
_HEIGHT_PAIRS = ((0, 2), (1, 3), (4, 6), (5, 7))
_WIDTH_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7))


class DegenerateConfigurationError(ValueError):
    """Alignment input with rank-deficient covariance (collinear points)."""


class DegenerateOrientationError(ValueError):
    """Rotated x-axis parallel to the vertical axis; yaw undefined."""


def yaw_rotation(theta):
    """Rotation by theta about the camera-frame vertical (y) axis."""
    return _yaw_matrix(theta)


def check_rotation(rotation, tol=1e-9):
    """Validate orthonormality and det +1 within tol."""
    r = np.asarray(rotation, dtype=float)
    if r.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise ValueError("matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")
    return r


def wrap_angle(angle):
    """Wrap to (-pi, pi], ties at -pi mapped to +pi."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    return float(wrapped) if np.ndim(angle) == 0 else wrapped


def _as_points(point_set):
    if isinstance(point_set, PointSet3D):
        return point_set.points
    return np.asarray(point_set, dtype=float)


def kabsch_align(source, target, with_scale=False):
    """Rotation minimizing sum |R @ source_i - target_i|^2.

    Both sets are centered internally; a proper rotation is enforced by
    flipping the smallest singular direction when the raw solution would
    be a reflection.  With with_scale=True the similarity variant returns
    (rotation, scale) minimizing |c * R @ source_i - target_i|^2 instead.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    if src.shape != tgt.shape:
        raise ValueError(f"point counts differ: {src.shape} vs {tgt.shape}")
    src = src - src.mean(axis=0)
    tgt = tgt - tgt.mean(axis=0)
    cov = src.T @ tgt  # maximizing tr(R @ cov) over rotations
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateConfigurationError("covariance is rank deficient (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    if not with_scale:
        return rotation
    scale = float((s[0] + s[1] + d * s[2]) / (src**2).sum())
    return rotation, scale


def extract_yaw(rotation):
    """Yaw of the rotated x-axis, projected to the x-z plane."""
    r = np.asarray(rotation, dtype=float)
    x_axis = r[:, 0]
    if np.hypot(x_axis[0], x_axis[2]) < 1e-8:
        raise DegenerateOrientationError("rotated x-axis is parallel to the vertical axis")
    return wrap_angle(np.arctan2(-x_axis[2], x_axis[0]))


def allo_to_ego(alpha, location):
    """Allocentric alpha -> egocentric yaw at the given camera-frame location."""
    t_x, _, t_z = location
    if t_z <= 0:
        raise ValueError(f"location depth must be positive, got {t_z}")
    return wrap_angle(alpha + np.arctan2(t_x, t_z))


def ego_to_allo(theta, location):
    """Egocentric yaw -> allocentric alpha (exact inverse of allo_to_ego)."""
    t_x, _, t_z = location
    if t_z <= 0:
        raise ValueError(f"location depth must be positive, got {t_z}")
    return wrap_angle(theta - np.arctan2(t_x, t_z))


def orientation_error(theta_pred, theta_gt):
    """|wrapped difference| in [0, pi]."""
    return abs(wrap_angle(theta_pred - theta_gt))


def template_psi(interp=DEFAULT_INTERP):
    """Shape set of the unit-dimension cuboid at canonical (zero) yaw."""
    return build_psi(Cuboid(dims=(1.0, 1.0, 1.0), centroid=(0.0, 0.0, 0.0), yaw=0.0), interp)


@dataclass(frozen=True)
class OrientationEstimate:
    """Recovered orientation; KITTI metrics consume yaw, the rest is
    diagnostic."""

    yaw: float
    pitch: float
    roll: float
    rotation: np.ndarray


def recover_orientation(psi_pred, template):
    """Full-orientation estimate of a predicted shape set.

    Aligns the canonical template onto the prediction, so the recovered
    rotation carries the prediction's pose.  Pitch and roll are read from
    the yaw-compensated remainder.
    """
    rotation = kabsch_align(template, psi_pred)
    yaw = extract_yaw(rotation)
    residual = _yaw_matrix(-yaw) @ rotation
    pitch = float(np.arcsin(np.clip(-residual[1, 2], -1.0, 1.0)))
    roll = float(np.arctan2(residual[1, 0], residual[1, 1]))
    return OrientationEstimate(yaw=yaw, pitch=pitch, roll=roll, rotation=rotation)


def dims_from_psi(psi_pred):
    """(h, w, l) read from the corner block's parallel edge lengths."""
    pts = _as_points(psi_pred)
    corners = pts[:8]

    def mean_len(pairs):
        return float(np.mean([np.linalg.norm(corners[a] - corners[b]) for a, b in pairs]))

    return (mean_len(_HEIGHT_PAIRS), mean_len(_WIDTH_PAIRS), mean_len(_LENGTH_PAIRS))
