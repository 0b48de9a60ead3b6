"""KITTI object-label and calibration file I/O.

Labels follow the object development kit convention: one object per line,
15 whitespace-separated fields (16 when a detection score is appended):

    type truncated occluded alpha left top right bottom
    height width length x y z rotation_y [score]

Angles are radians, dimensions are meters and ``(x, y, z)`` is the box
bottom-center in the camera frame.  This module stores KITTI-native values;
the bottom-center to centroid conversion lives in :mod:`cuboidlift.geometry`.
"""

from __future__ import annotations

from dataclasses import dataclass


class LabelFormatError(ValueError):
    """Raised for malformed label or calibration content."""


@dataclass(frozen=True)
class DetectionRecord:
    """One KITTI-format object annotation or detection."""

    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom (px)
    dims: tuple[float, float, float]         # height, width, length (m)
    location: tuple[float, float, float]     # bottom-center x, y, z (m)
    rotation_y: float
    score: float | None = None

    def validate(self):
        """Check the invariants that hold for valid (non-DontCare) objects."""
        left, top, right, bottom = self.bbox
        if right < left or bottom < top:
            raise ValueError(f"degenerate bbox {self.bbox}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"non-positive dimensions {self.dims}")
        if not (-3.14159266 <= self.alpha <= 3.14159266):
            raise ValueError(f"alpha {self.alpha} outside [-pi, pi]")
        if not (-3.14159266 <= self.rotation_y <= 3.14159266):
            raise ValueError(f"rotation_y {self.rotation_y} outside [-pi, pi]")
        if not (0.0 <= self.truncation <= 1.0):
            raise ValueError(f"truncation {self.truncation} outside [0, 1]")
        if self.occlusion not in (0, 1, 2, 3):
            raise ValueError(f"occlusion level {self.occlusion} not in 0..3")


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole projection parameters (pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")


def _parse_float(token, line, column):
    try:
        return float(token)
    except ValueError:
        raise LabelFormatError(
            f"non-numeric field {token!r} at column {column} in line: {line!r}"
        ) from None


def parse_label_line(line):
    """Parse one label line into a :class:`DetectionRecord`.

    Raises :class:`LabelFormatError` on a wrong field count or a
    non-numeric field (the message names the offending column).
    """
    fields = line.split()
    if len(fields) not in (15, 16):
        raise LabelFormatError(
            f"expected 15 or 16 fields, got {len(fields)} in line: {line!r}"
        )
    values = [_parse_float(tok, line, col) for col, tok in enumerate(fields[1:], start=1)]
    return DetectionRecord(
        class_name=fields[0],
        truncation=values[0],
        occlusion=int(values[1]),
        alpha=values[2],
        bbox=(values[3], values[4], values[5], values[6]),
        dims=(values[7], values[8], values[9]),
        location=(values[10], values[11], values[12]),
        rotation_y=values[13],
        score=values[14] if len(fields) == 16 else None,
    )


def parse_label_file(text):
    """Parse a whole label file, skipping blank lines."""
    return [parse_label_line(line) for line in text.splitlines() if line.strip()]


def format_record(record):
    """Serialize one record to its label line (6-decimal fixed precision)."""
    numbers = [
        record.truncation,
        float(record.occlusion),
        record.alpha,
        *record.bbox,
        *record.dims,
        *record.location,
        record.rotation_y,
    ]
    if record.score is not None:
        numbers.append(record.score)
    body = " ".join(f"{x:.6f}" for x in numbers)
    # occlusion serializes as an integer token, matching the devkit files
    parts = body.split(" ")
    parts[1] = str(record.occlusion)
    return record.class_name + " " + " ".join(parts)


def write_result_file(records):
    """Serialize records to label-file text. Deterministic byte output."""
    return "".join(format_record(r) + "\n" for r in records)


def parse_calibration(text):
    """Extract left-color-camera intrinsics from KITTI calib file text.

    Reads the ``P2:`` row (12 numbers, row-major 3x4) and returns
    fx=P2[0,0], fy=P2[1,1], cx=P2[0,2], cy=P2[1,2].  The translation
    column is ignored for single-camera use.
    """
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("P2:"):
            continue
        tokens = line[3:].split()
        if len(tokens) != 12:
            raise LabelFormatError(f"P2 row must hold 12 numbers, got {len(tokens)}")
        p2 = [_parse_float(tok, line, col) for col, tok in enumerate(tokens, start=1)]
        return CameraIntrinsics(fx=p2[0], fy=p2[5], cx=p2[2], cy=p2[6])
    raise LabelFormatError("calibration text has no P2 row")
