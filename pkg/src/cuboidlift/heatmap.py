"""Gaussian keypoint heatmaps: render, loss, decode.

Supervision targets for an external heatmap predictor.  A local-frame
point maps to grid coordinates by u * grid, so the patch center (0.5,
0.5) lands exactly on cell (32, 32) of the default 64-grid and renders a
peak of exactly 1.
"""

from __future__ import annotations

import numpy as np

from .geometry import LOCAL, PointSet2D

GRID = 64
SIGMA = 1.0


def render(points, grid=GRID, sigma=SIGMA):
    """(n, grid, grid) stack of unit-peak Gaussians, sigma in grid pixels.

    Channels follow the canonical point order of the input set.  A point
    outside the closed unit square renders an all-zero channel.  No
    truncation radius; each Gaussian is evaluated on the full grid.
    """
    if points.frame != LOCAL:
        raise ValueError(f"expected a local point set, got frame {points.frame!r}")
    pts = points.points
    stack = np.zeros((pts.shape[0], grid, grid))
    coords = np.arange(grid, dtype=float)
    for i, (u, v) in enumerate(pts):
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            continue
        du = np.exp(-((coords - u * grid) ** 2) / (2.0 * sigma**2))
        dv = np.exp(-((coords - v * grid) ** 2) / (2.0 * sigma**2))
        stack[i] = np.outer(dv, du)  # rows index v, columns index u
    return stack


def mse_loss(pred, gt):
    """Mean squared error over all cells and channels."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def _refine(channel, row, col):
    # quarter-pixel shift toward the larger neighbor, interior cells only
    n_rows, n_cols = channel.shape
    dr = dc = 0.0
    if 0 < col < n_cols - 1:
        dc = 0.25 * np.sign(channel[row, col + 1] - channel[row, col - 1])
    if 0 < row < n_rows - 1:
        dr = 0.25 * np.sign(channel[row + 1, col] - channel[row - 1, col])
    return row + dr, col + dc


def decode(stack):
    """Per-channel peak coordinates back in the local frame.

    Returns (PointSet2D, missing) where missing marks all-zero channels;
    their coordinates are NaN.  Exact peak ties resolve to the lowest
    row-major index.
    """
    stack = np.asarray(stack, dtype=float)
    if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
        raise ValueError(f"expected an (n, grid, grid) stack, got shape {stack.shape}")
    grid = stack.shape[1]
    pts = np.full((stack.shape[0], 2), np.nan)
    missing = np.zeros(stack.shape[0], dtype=bool)
    for i, channel in enumerate(stack):
        if not channel.any():
            missing[i] = True
            continue
        row, col = np.unravel_index(np.argmax(channel), channel.shape)
        row, col = _refine(channel, row, col)
        pts[i] = (col / grid, row / grid)
    return PointSet2D(points=pts, frame=LOCAL), missing
