"""Cross-ratios of collinear quadruples and the self-supervised loss.

Each cuboid edge carries the quadruple (start corner, interpolated point 1,
interpolated point 2, end corner).  The cross-ratio of those four points is
fixed by the interpolation coefficients and survives perspective projection,
so a predicted point set can be penalized for drifting from the analytic
value without any labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LOCAL, PSI, TAU, EDGES

# index pairs within a quadruple used for the foreshortening gate
_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

DEFAULT_GATE = 0.15  # min pairwise distance, normalized patch units


class DegenerateQuadrupleError(ValueError):
    """A denominator point pair of the cross-ratio coincides."""


@dataclass(frozen=True)
class CrossRatioTarget:
    cr: float

    @property
    def cr_squared(self):
        return self.cr * self.cr


def cross_ratio(p1, p2, p3, p4):
    """Cross-ratio |v3-v1||v4-v2| / (|v3-v2||v4-v1|) of four points.

    Works for point vectors of any dimension.  The value is invariant
    under similarity transforms and, for collinear quadruples, under
    central projection.
    """
    v = [np.asarray(p, dtype=float) for p in (p1, p2, p3, p4)]
    d31 = np.linalg.norm(v[2] - v[0])
    d42 = np.linalg.norm(v[3] - v[1])
    d32 = np.linalg.norm(v[2] - v[1])
    d41 = np.linalg.norm(v[3] - v[0])
    if d32 == 0.0 or d41 == 0.0:
        raise DegenerateQuadrupleError("coincident points in a denominator pair")
    return float(d31 * d42 / (d32 * d41))


def edge_quadruples(layout, q=2):
    """Point indices (start, interp1, interp2, end) for all 12 edges.

    Only q=2 admits a quadruple per edge.
    """
    if q != 2:
        raise ValueError(f"edge quadruples require q=2, got q={q}")
    if layout == TAU:
        corner_off, base = 1, 9
    elif layout == PSI:
        corner_off, base = 0, 8
    else:
        raise ValueError(f"unknown layout {layout!r}")
    quads = [
        (corner_off + a, base + j * q, base + j * q + 1, corner_off + b)
        for j, (a, b) in enumerate(EDGES)
    ]
    return np.array(quads, dtype=np.intp)


def target_cr(interp):
    """Analytic cross-ratio implied by the interpolation coefficients.

    On a unit edge the quadruple sits at parameters
    (0, 1-beta1, 1-beta2, 1), so the edge length cancels and the ratio
    depends on the coefficients alone.
    """
    if interp.q != 2:
        raise ValueError(f"cross-ratio target requires q=2, got q={interp.q}")
    b1, b2 = interp.betas
    return CrossRatioTarget(cr=((1.0 - b2) * b1) / ((b1 - b2) * 1.0))


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, 0.5 * x * x, np.abs(x) - 0.5)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=float)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _quad_geometry(pts, quads):
    """Difference vectors, squared norms and gate distances per quadruple.

    Squared norms come from inner products so no square root enters the
    loss path; the gate distance alone takes a root.
    """
    v = pts[quads]  # (m, 4, d)
    d31 = v[:, 2] - v[:, 0]
    d42 = v[:, 3] - v[:, 1]
    d32 = v[:, 2] - v[:, 1]
    d41 = v[:, 3] - v[:, 0]
    norms = [(d * d).sum(axis=-1) for d in (d31, d42, d32, d41)]
    pair_sq = np.stack(
        [((v[:, i] - v[:, j]) ** 2).sum(axis=-1) for i, j in _PAIRS], axis=0
    )
    d_min = np.sqrt(pair_sq.min(axis=0))
    return (d31, d42, d32, d41), norms, d_min


def cr_loss(points, quadruples, target, gate_threshold=DEFAULT_GATE):
    """Cross-ratio loss and its analytic gradient for one local point set.

    Mean over ungated quadruples of
    SmoothL1(cr^2 - n31 * n42 / (n32 * n41)) with the n terms squared
    norms.  A quadruple whose minimal pairwise distance is <= the gate
    threshold contributes zero loss and zero gradient.  Returns
    (loss, per-point gradient of shape (n, 2)).
    """
    if points.frame != LOCAL:
        raise ValueError(f"cross-ratio loss expects local points, got {points.frame!r}")
    pts = points.points
    quads = np.asarray(quadruples, dtype=np.intp)
    grad = np.zeros_like(pts)

    _, _, d_min = _quad_geometry(pts, quads)
    active = d_min > gate_threshold
    if not active.any():
        return 0.0, grad
    quads = quads[active]

    (d31, d42, d32, d41), (n31, n42, n32, n41), _ = _quad_geometry(pts, quads)
    g = n31 * n42 / (n32 * n41)
    x = target.cr_squared - g
    loss = float(smooth_l1(x).sum() / quads.shape[0])

    # d loss / d g = -SmoothL1'(x), mean over active quadruples
    scale = (-smooth_l1_grad(x) / quads.shape[0])[:, None]
    dg_v1 = g[:, None] * (-2.0 * d31 / n31[:, None] + 2.0 * d41 / n41[:, None])
    dg_v2 = g[:, None] * (-2.0 * d42 / n42[:, None] + 2.0 * d32 / n32[:, None])
    dg_v3 = g[:, None] * (2.0 * d31 / n31[:, None] - 2.0 * d32 / n32[:, None])
    dg_v4 = g[:, None] * (2.0 * d42 / n42[:, None] - 2.0 * d41 / n41[:, None])
    for k, dg in enumerate((dg_v1, dg_v2, dg_v3, dg_v4)):
        np.add.at(grad, quads[:, k], scale * dg)
    return loss, grad


def cr_loss_values(point_arrays, quadruples, target, gate_threshold=DEFAULT_GATE):
    """Loss values only, vectorized over a batch of point sets (b, n, 2)."""
    pts = np.asarray(point_arrays, dtype=float)
    quads = np.asarray(quadruples, dtype=np.intp)
    v = pts[:, quads]  # (b, m, 4, 2)
    diffs = {
        (i, j): v[..., i, :] - v[..., j, :] for i, j in ((2, 0), (3, 1), (2, 1), (3, 0))
    }
    pair_sq = np.stack(
        [((v[..., i, :] - v[..., j, :]) ** 2).sum(axis=-1) for i, j in _PAIRS], axis=0
    )
    active = np.sqrt(pair_sq.min(axis=0)) > gate_threshold  # (b, m)
    n = {k: (d * d).sum(axis=-1) for k, d in diffs.items()}
    denom = n[(2, 1)] * n[(3, 0)]
    g = np.divide(
        n[(2, 0)] * n[(3, 1)], denom, out=np.zeros_like(denom), where=denom > 0
    )
    per_quad = np.where(active, smooth_l1(target.cr_squared - g), 0.0)
    counts = active.sum(axis=1)
    return per_quad.sum(axis=1) / np.maximum(counts, 1)
