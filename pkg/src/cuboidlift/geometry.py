"""Interpolated-cuboid point sets, pinhole projection and crop transforms.

Conventions (frozen; heatmap channels and lifter I/O depend on them):

* Camera frame is x-right, y-down, z-forward; yaw rotates about y.
* In the object frame the box is axis-aligned with length along x,
  height along y, width along z.
* Canonical point order for the camera-frame set ("tau" layout):
  index 0 is the centroid, indices 1..8 are the corners, then each of the
  12 edges contributes its q interpolated points in interpolation-row
  order.  The translation-free "psi" layout drops the centroid so corners
  sit at 0..7 and edge points start at index 8.
* Corners are enumerated x-major over the sign pattern
  (+-l/2, +-h/2, +-w/2): corner k has signs given by the bits of k with x
  slowest, i.e. k = 4*ix + 2*iy + iz where bit 0 means the negative side.
* Edges connect corners that differ in exactly one sign, listed in
  lexicographic corner-pair order; the lower corner index is the edge
  start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAU = "tau"
PSI = "psi"
GLOBAL = "global"
LOCAL = "local"

# x-major sign enumeration of the 8 corners
CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)

# corner-index pairs differing in one sign bit, lexicographic order
EDGES = ((0, 1), (0, 2), (0, 4), (1, 3), (1, 5), (2, 3),
         (2, 6), (3, 7), (4, 5), (4, 6), (5, 7), (6, 7))


class BehindCameraError(ValueError):
    """A point with non-positive depth reached the projection."""

    def __init__(self, index, depth):
        self.index = index
        self.depth = depth
        super().__init__(f"point {index} has depth {depth} <= 0")


@dataclass(frozen=True)
class Cuboid:
    """3D box: dimensions (h, w, l) in meters, centroid in the camera
    frame and egocentric yaw in radians."""

    dims: tuple[float, float, float]
    centroid: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dimensions must be positive, got {self.dims}")


def cuboid_from_kitti(dims, location, rotation_y):
    """Build a Cuboid from KITTI-native values.

    KITTI stores the box bottom-center; the centroid sits h/2 above it
    (y points down, so subtract along y).
    """
    h = dims[0]
    centroid = (location[0], location[1] - h / 2.0, location[2])
    return Cuboid(dims=tuple(dims), centroid=centroid, yaw=rotation_y)


@dataclass(frozen=True)
class InterpMatrix:
    """Per-edge interpolation coefficients: q rows of (beta, 1 - beta)."""

    betas: tuple[float, ...]

    def __post_init__(self):
        for b in self.betas:
            if not (0.0 < b < 1.0):
                raise ValueError(f"interpolation coefficient {b} outside (0, 1)")
        if any(nxt >= prev for prev, nxt in zip(self.betas, self.betas[1:])):
            raise ValueError(f"coefficients must strictly decrease, got {self.betas}")

    @property
    def q(self):
        return len(self.betas)

    @property
    def matrix(self):
        b = np.array(self.betas)
        return np.stack([b, 1.0 - b], axis=1)


DEFAULT_INTERP = InterpMatrix(betas=(0.75, 0.25))


def interpolation_matrix(q, betas):
    """Validated interpolation matrix for q points per edge."""
    betas = tuple(float(b) for b in betas)
    if len(betas) != q:
        raise ValueError(f"expected {q} coefficients, got {len(betas)}")
    return InterpMatrix(betas=betas)


@dataclass(frozen=True)
class PointSet3D:
    """Ordered 3D keypoints (meters) in the canonical layout."""

    points: np.ndarray
    layout: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        if self.layout not in (TAU, PSI):
            raise ValueError(f"unknown layout {self.layout!r}")
        base = 9 if self.layout == TAU else 8
        if (pts.shape[0] - base) % 12 != 0 or pts.shape[0] < base:
            raise ValueError(f"{self.layout} layout cannot hold {pts.shape[0]} points")

    @property
    def q(self):
        base = 9 if self.layout == TAU else 8
        return (self.points.shape[0] - base) // 12


@dataclass(frozen=True)
class PointSet2D:
    """Ordered 2D keypoints: pixels (global frame) or normalized patch
    coordinates in [0, 1] (local frame)."""

    points: np.ndarray
    frame: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"expected (n, 2) points, got shape {pts.shape}")
        if self.frame not in (GLOBAL, LOCAL):
            raise ValueError(f"unknown frame {self.frame!r}")


@dataclass(frozen=True)
class AffineCrop:
    """Similarity map from global pixels to a square patch: scaling plus
    2D translation, patch coordinates normalized by patch_size."""

    scale: float
    translation: tuple[float, float]
    patch_size: int = 256

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def point_count(layout, q):
    return (9 if layout == TAU else 8) + 12 * q


def corner_offsets(dims):
    """Object-frame corner coordinates for dimensions (h, w, l)."""
    h, w, l = dims
    return CORNER_SIGNS * np.array([l / 2.0, h / 2.0, w / 2.0])


def _yaw_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _edge_interpolations(corners, interp):
    """Interpolated points for all 12 edges, edge-major, row order."""
    if interp.q == 0:
        return np.empty((0, 3))
    starts = corners[[e[0] for e in EDGES]]
    ends = corners[[e[1] for e in EDGES]]
    b = np.asarray(interp.betas)
    # (12, q, 3) -> flattened edge-major
    pts = b[None, :, None] * starts[:, None, :] + (1.0 - b)[None, :, None] * ends[:, None, :]
    return pts.reshape(-1, 3)


def build_tau(cuboid, interp=DEFAULT_INTERP):
    """Camera-frame point set: centroid, 8 corners, 12q edge points."""
    rot = _yaw_matrix(cuboid.yaw)
    t = np.asarray(cuboid.centroid)
    corners = corner_offsets(cuboid.dims) @ rot.T + t
    pts = np.concatenate([t[None, :], corners, _edge_interpolations(corners, interp)])
    return PointSet3D(points=pts, layout=TAU)


def build_psi(cuboid, interp=DEFAULT_INTERP):
    """Translation-free shape set: tau minus the centroid point, with the
    centroid subtracted from the rest (8 + 12q points)."""
    rot = _yaw_matrix(cuboid.yaw)
    corners = corner_offsets(cuboid.dims) @ rot.T
    pts = np.concatenate([corners, _edge_interpolations(corners, interp)])
    return PointSet3D(points=pts, layout=PSI)


def project(points, intrinsics):
    """Pinhole projection of a 3D point set to global screen coordinates.

    u = fx * X / Z + cx, v = fy * Y / Z + cy.  All depths must be
    positive; the error identifies the first offending index.
    """
    xyz = points.points
    depths = xyz[:, 2]
    bad = np.nonzero(depths <= 0)[0]
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(depths[bad[0]]))
    u = intrinsics.fx * xyz[:, 0] / depths + intrinsics.cx
    v = intrinsics.fy * xyz[:, 1] / depths + intrinsics.cy
    return PointSet2D(points=np.stack([u, v], axis=1), frame=GLOBAL)


def tight_bbox(points):
    """(left, top, right, bottom) of a global 2D point set."""
    pts = points.points
    return (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())


def crop_transform(bbox, jitter=None, patch_size=256):
    """Square crop enclosing the bbox, mapped to patch_size x patch_size.

    The square takes the longer bbox side and shares the bbox center.
    ``jitter``, when given, is (scale_factor, dx_frac, dy_frac): the side
    is multiplied by scale_factor and the center shifted by the fractions
    of the (unjittered) side.  Jitter is supplied by the caller so the
    transform itself stays deterministic.
    """
    left, top, right, bottom = bbox
    w, h = right - left, bottom - top
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {bbox}")
    side = max(w, h)
    cx, cy = (left + right) / 2.0, (top + bottom) / 2.0
    if jitter is not None:
        s, dx, dy = jitter
        cx += dx * side
        cy += dy * side
        side *= s
    translation = (cx - side / 2.0, cy - side / 2.0)
    return AffineCrop(scale=patch_size / side, translation=translation, patch_size=patch_size)


def to_local(points, crop):
    """Global pixels -> normalized patch coordinates in [0, 1]."""
    if points.frame != GLOBAL:
        raise ValueError(f"expected a global point set, got frame {points.frame!r}")
    t = np.asarray(crop.translation)
    local = (points.points - t) * crop.scale / crop.patch_size
    return PointSet2D(points=local, frame=LOCAL)


def to_global(points, crop):
    """Normalized patch coordinates -> global pixels (exact inverse)."""
    if points.frame != LOCAL:
        raise ValueError(f"expected a local point set, got frame {points.frame!r}")
    t = np.asarray(crop.translation)
    glob = points.points * crop.patch_size / crop.scale + t
    return PointSet2D(points=glob, frame=GLOBAL)


def visibility_fraction(points, image_w, image_h):
    """Fraction of points inside [0, w) x [0, h).

    Callers discard an instance when the outside fraction exceeds 0.30
    (strictly: more than 30 percent outside).
    """
    pts = points.points
    inside = (
        (pts[:, 0] >= 0) & (pts[:, 0] < image_w)
        & (pts[:, 1] >= 0) & (pts[:, 1] < image_h)
    )
    return float(inside.mean())
