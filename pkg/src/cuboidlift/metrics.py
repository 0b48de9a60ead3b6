"""Joint detection and orientation evaluation.

2D detection AP and orientation similarity (AOS) over the 41-point
recall grid, keypoint PCK, and orientation-error tables binned by depth
and occlusion.  Matching follows the usual devkit protocol: greedy
one-to-one assignment in descending score order at an IoU threshold,
with out-of-regime ground truths treated as ignore regions (matches to
them count neither way).

Because greedy assignment of a detection depends only on higher-scored
detections, the running prefix of one full matching equals re-matching
at every score cutoff; the sweep exploits that.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

RECALL_LEVELS = np.linspace(0.0, 1.0, 41)
DEPTH_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
DEFAULT_IOU = 0.7


@dataclass(frozen=True)
class DifficultyRegime:
    """Ground-truth filter: smaller, more occluded or truncated boxes
    drop out of the regime and become ignore regions."""

    name: str
    min_height: float
    max_occlusion: int
    max_truncation: float


EASY = DifficultyRegime("easy", 40.0, 0, 0.15)
MODERATE = DifficultyRegime("moderate", 25.0, 1, 0.30)
HARD = DifficultyRegime("hard", 25.0, 2, 0.50)
ALL = DifficultyRegime("all", 0.0, 3, 1.0)
REGIMES = {r.name: r for r in (EASY, MODERATE, HARD, ALL)}


@dataclass(frozen=True)
class EvalFrame:
    """Ground truths and scored predictions for one image."""

    gts: tuple
    preds: tuple

    def __post_init__(self):
        object.__setattr__(self, "gts", tuple(self.gts))
        object.__setattr__(self, "preds", tuple(self.preds))
        for rec in self.preds:
            if rec.score is None:
                raise ValueError("every prediction needs a score")


def bbox_iou(a, b):
    """Intersection over union of two (left, top, right, bottom) boxes."""
    il = max(a[0], b[0])
    it = max(a[1], b[1])
    ir = min(a[2], b[2])
    ib = min(a[3], b[3])
    iw = max(0.0, ir - il)
    ih = max(0.0, ib - it)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def gt_in_regime(record, regime):
    height = record.bbox[3] - record.bbox[1]
    return (
        height >= regime.min_height
        and record.occlusion <= regime.max_occlusion
        and record.truncation <= regime.max_truncation
    )


@dataclass(frozen=True)
class MatchResult:
    """pairs maps prediction index to ground-truth index (regime-valid
    matches only); ignored_preds matched an out-of-regime gt and count
    neither as true nor as false positives."""

    pairs: tuple
    ignored_preds: tuple
    n_valid_gt: int


def match_detections(frame, iou_threshold=DEFAULT_IOU, regime=ALL):
    """Greedy one-to-one matching by descending score.

    Each prediction takes the free in-regime ground truth of highest
    IoU at or above the threshold (ties to the lower gt index); failing
    that, a free ignored gt absorbs it silently; otherwise it is a false
    positive.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold {iou_threshold} outside (0, 1]")
    valid = [gt_in_regime(g, regime) for g in frame.gts]
    free = [True] * len(frame.gts)
    order = sorted(range(len(frame.preds)),
                   key=lambda i: (-frame.preds[i].score, i))
    pairs = []
    ignored = []
    for pi in order:
        box = frame.preds[pi].bbox

        def best(indices):
            top, top_iou = None, iou_threshold
            for gi in indices:
                iou = bbox_iou(box, frame.gts[gi].bbox)
                if iou > top_iou or (top is None and iou == top_iou):
                    top, top_iou = gi, iou
            return top

        gi = best([g for g in range(len(frame.gts)) if free[g] and valid[g]])
        if gi is not None:
            pairs.append((pi, gi))
            free[gi] = False
            continue
        gi = best([g for g in range(len(frame.gts)) if free[g] and not valid[g]])
        if gi is not None:
            ignored.append(pi)
            free[gi] = False
    return MatchResult(pairs=tuple(pairs), ignored_preds=tuple(ignored),
                       n_valid_gt=sum(valid))


def _orientation_similarity(pred, gt):
    delta = pred.rotation_y - gt.rotation_y
    return (1.0 + np.cos(delta)) / 2.0


def _detection_table(frames, iou_threshold, regime):
    """Flattened detections: (score, is_tp, similarity), ignored ones
    dropped; plus the regime-valid ground-truth count."""
    scores = []
    is_tp = []
    sims = []
    n_gt = 0
    for frame in frames:
        result = match_detections(frame, iou_threshold, regime)
        n_gt += result.n_valid_gt
        matched = dict(result.pairs)
        skip = set(result.ignored_preds)
        for pi, pred in enumerate(frame.preds):
            if pi in skip:
                continue
            scores.append(pred.score)
            if pi in matched:
                is_tp.append(True)
                sims.append(_orientation_similarity(pred, frame.gts[matched[pi]]))
            else:
                is_tp.append(False)
                sims.append(0.0)
    return (np.array(scores), np.array(is_tp, dtype=bool), np.array(sims), n_gt)


def _operating_points(frames, iou_threshold, regime):
    scores, is_tp, sims, n_gt = _detection_table(frames, iou_threshold, regime)
    if n_gt == 0:
        raise ValueError("no ground truths in regime; curves undefined")
    order = np.lexsort((np.arange(scores.size), -scores))
    is_tp = is_tp[order]
    sims = sims[order]
    n_det = np.arange(1, scores.size + 1)
    cum_tp = np.cumsum(is_tp)
    recalls = cum_tp / n_gt
    precisions = cum_tp / n_det
    similarity = np.cumsum(sims) / n_det
    return recalls, precisions, similarity


def _envelope(recalls, values):
    # max over operating points with recall at or beyond each level
    out = np.zeros(RECALL_LEVELS.size)
    for i, r in enumerate(RECALL_LEVELS):
        mask = recalls >= r
        if mask.any():
            out[i] = values[mask].max()
    return out


def precision_recall_curve(frames, iou_threshold=DEFAULT_IOU, regime=ALL):
    """Right-envelope precision at the 41 recall levels."""
    recalls, precisions, _ = _operating_points(frames, iou_threshold, regime)
    return RECALL_LEVELS.copy(), _envelope(recalls, precisions)


def average_precision(frames, iou_threshold=DEFAULT_IOU, regime=ALL):
    _, envelope = precision_recall_curve(frames, iou_threshold, regime)
    return float(envelope.mean())


def aos(frames, iou_threshold=DEFAULT_IOU, regime=ALL):
    """Average orientation similarity over the 41 recall levels.

    At each cutoff the similarity sums (1 + cos delta)/2 over matched
    detections and 0 over unmatched ones, divided by all detections at
    that cutoff; the envelope rule then mirrors AP, so AOS <= AP always.
    """
    recalls, _, similarity = _operating_points(frames, iou_threshold, regime)
    return float(_envelope(recalls, similarity).mean())


def pck(pred, gt, bbox_height, x):
    """Fraction of keypoints with error strictly below x * bbox_height/3."""
    p = pred.points if hasattr(pred, "points") else np.asarray(pred, dtype=float)
    g = gt.points if hasattr(gt, "points") else np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ValueError(f"point count mismatch: {p.shape} vs {g.shape}")
    if bbox_height <= 0:
        raise ValueError("bbox height must be positive")
    errors = np.linalg.norm(p - g, axis=-1)
    return float(np.mean(errors < x * (bbox_height / 3.0)))


def aoe_bins(pairs, depth_edges=DEPTH_EDGES):
    """Mean orientation error keyed by (depth_lo, depth_hi, occlusion).

    pairs yields (depth, occlusion, error) per matched detection.  Bins
    never observed are absent from the result; depths outside the edge
    span are dropped.  Values are (mean_error, count).
    """
    edges = np.asarray(depth_edges, dtype=float)
    sums = {}
    counts = {}
    for depth, occlusion, error in pairs:
        idx = np.searchsorted(edges, depth, side="right") - 1
        if idx < 0 or idx >= edges.size - 1:
            continue
        key = (float(edges[idx]), float(edges[idx + 1]), int(occlusion))
        sums[key] = sums.get(key, 0.0) + float(error)
        counts[key] = counts.get(key, 0) + 1
    return {key: (sums[key] / counts[key], counts[key]) for key in sorted(sums)}


# ---- reporting ----


def summarize(frames, iou_threshold=DEFAULT_IOU, regimes=("easy", "moderate", "hard")):
    """AP and AOS per difficulty regime as a list of row dicts."""
    rows = []
    for name in regimes:
        regime = REGIMES[name]
        try:
            ap = average_precision(frames, iou_threshold, regime)
            orientation = aos(frames, iou_threshold, regime)
        except ValueError:
            continue  # regime empty on this data
        rows.append({"regime": name, "ap": ap, "aos": orientation})
    return rows


def write_summary_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["regime", "ap", "aos"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_aoe_csv(path, bins):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depth_lo", "depth_hi", "occlusion", "mean_error_rad", "count"])
        for (lo, hi, occ), (mean_error, count) in bins.items():
            writer.writerow([lo, hi, occ, repr(mean_error), count])


def format_table(rows, columns):
    """Plain aligned text table from row dicts."""
    if not rows:
        return "(empty)\n"
    cells = [[str(col) for col in columns]]
    for row in rows:
        formatted = []
        for col in columns:
            value = row[col]
            formatted.append(f"{value:.4f}" if isinstance(value, float) else str(value))
        cells.append(formatted)
    widths = [max(len(line[i]) for line in cells) for i in range(len(columns))]
    lines = []
    for line in cells:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"
