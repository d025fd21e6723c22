"""Externally produced depth and relative-pose priors: PFM depth maps,
TUM-format pose text, and scale alignment (median scaling, shift-and-scale).

File formats:

* PFM: header ``Pf\\n<width> <height>\\n<scale>\\n`` followed by
  width*height 4-byte floats in bottom-to-top row order; the sign of the
  scale header selects endianness (negative = little-endian).
* TUM text: one record per line, ``timestamp tx ty tz qx qy qz qw``,
  whitespace-separated, lines starting with '#' ignored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError, NoOverlapError, ParseError
from .geometry import InverseDepthMap, Pose


# ---------------------------------------------------------------------------
# PFM


def parse_pfm(data: bytes) -> np.ndarray:
    """Decode a single-channel PFM buffer into an (H, W) float array."""

    pos = 0

    def next_token() -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"PFM header truncated at byte {start}")
        return data[start:pos], start

    magic, off = next_token()
    if magic != b"Pf":
        raise ParseError(f"bad PFM magic {magic!r} at byte {off}")
    try:
        width = int(next_token()[0])
        height = int(next_token()[0])
    except ValueError:
        raise ParseError(f"non-integer PFM dimensions near byte {pos}") from None
    if width <= 0 or height <= 0:
        raise ParseError(f"non-positive PFM dimensions {width}x{height}")
    scale_tok, off = next_token()
    try:
        scale = float(scale_tok)
    except ValueError:
        raise ParseError(f"non-numeric PFM scale at byte {off}") from None
    if scale == 0:
        raise ParseError(f"PFM scale must be non-zero at byte {off}")
    # exactly one whitespace byte terminates the header
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError(f"missing whitespace after PFM scale at byte {pos}")
    pos += 1
    need = width * height * 4
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise ParseError(
            f"PFM payload truncated at byte {pos + len(payload)}: "
            f"need {need} bytes, got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    rows = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return rows[::-1].astype(float)  # stored bottom-to-top


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pfm(fh.read())


def encode_pfm(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ParseError("PFM writer takes a 2-D array")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    rows = values[::-1].astype("<f4")
    return header + rows.tobytes()


def write_pfm(path, values: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pfm(values))


def load_depth_map(path) -> InverseDepthMap:
    """Read a PFM of metric depths and convert to inverse depth; entries
    that are non-finite or <= 0 become invalid."""
    return InverseDepthMap.from_depth(read_pfm(path))


# ---------------------------------------------------------------------------
# TUM pose text


def _parse_tum_lines(text: str, origin: str) -> list[tuple[float, Pose]]:
    records = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"{origin}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = (float(f) for f in fields)
        except ValueError:
            raise ParseError(f"{origin}:{lineno}: non-numeric token") from None
        q = np.array([qw, qx, qy, qz])
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-3:
            warnings.warn(
                f"{origin}:{lineno}: quaternion norm {norm:.6f} deviates by more "
                f"than 1e-3; renormalizing",
                RuntimeWarning,
                stacklevel=3,
            )
        records.append((ts, Pose(q, np.array([tx, ty, tz]))))
    return records


def load_relative_poses(path) -> list[Pose]:
    """Each line is the relative transform frame t -> t+1; timestamps ignored."""
    with open(path, "r", encoding="ascii") as fh:
        return [pose for _, pose in _parse_tum_lines(fh.read(), str(path))]


def load_stamped_poses(path) -> tuple[np.ndarray, list[Pose]]:
    with open(path, "r", encoding="ascii") as fh:
        records = _parse_tum_lines(fh.read(), str(path))
    stamps = np.array([ts for ts, _ in records], dtype=float)
    return stamps, [pose for _, pose in records]


def format_tum_line(timestamp: float, pose: Pose) -> str:
    w, x, y, z = pose.quaternion
    tx, ty, tz = pose.translation
    return (
        f"{timestamp:.17g} {tx:.17g} {ty:.17g} {tz:.17g} "
        f"{x:.17g} {y:.17g} {z:.17g} {w:.17g}"
    )


def write_stamped_poses(path, timestamps, poses) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for ts, pose in zip(timestamps, poses, strict=True):
            fh.write(format_tum_line(float(ts), pose) + "\n")


def write_relative_poses(path, poses) -> None:
    write_stamped_poses(path, np.arange(len(poses), dtype=float), poses)


# ---------------------------------------------------------------------------
# Scale alignment


@dataclass(frozen=True)
class ScaleAlignment:
    mode: str  # median | shift_and_scale | none
    scale: float
    shift: float = 0.0


def _lower_median(values: np.ndarray) -> float:
    """Median without interpolation: element (n-1)//2 of the sorted sample."""
    ordered = np.sort(values)
    return float(ordered[(len(ordered) - 1) // 2])


def median_scale(pred: InverseDepthMap, ref_depth: np.ndarray, ref_valid: np.ndarray) -> float:
    """Scale s such that s * pred-depths has the same (lower) median as the
    reference depths on the jointly valid pixels."""
    ref_depth = np.asarray(ref_depth, dtype=float)
    joint = pred.valid & np.asarray(ref_valid, dtype=bool) & np.isfinite(ref_depth) & (ref_depth > 0)
    if not joint.any():
        raise NoOverlapError("no jointly valid pixels for median scaling")
    pred_depth = 1.0 / pred.values[joint]
    return _lower_median(ref_depth[joint]) / _lower_median(pred_depth)


def shift_and_scale(
    pred_depth: np.ndarray, ref_depth: np.ndarray, valid: np.ndarray
) -> tuple[float, float]:
    """Least-squares (s, t) minimizing sum((s*pred + t - ref)^2) over valid
    pixels; fitted in depth space."""
    pred_depth = np.asarray(pred_depth, dtype=float)
    ref_depth = np.asarray(ref_depth, dtype=float)
    joint = np.asarray(valid, dtype=bool) & np.isfinite(pred_depth) & np.isfinite(ref_depth)
    n = int(joint.sum())
    if n == 0:
        raise NoOverlapError("no jointly valid pixels for shift-and-scale")
    if n < 2:
        raise DegenerateFitError("shift-and-scale needs at least 2 valid pixels")
    p = pred_depth[joint]
    r = ref_depth[joint]
    mp, mr = p.mean(), r.mean()
    var = ((p - mp) ** 2).mean()
    if var == 0:
        raise DegenerateFitError("predictor is constant over the mask")
    cov = ((p - mp) * (r - mr)).mean()
    s = cov / var
    return float(s), float(mr - s * mp)
