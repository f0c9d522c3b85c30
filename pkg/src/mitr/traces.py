"""Trace-to-box encoding: turn a timestamped pointer trace plus per-word
timings into one word-aligned bounding box per caption token.

Boxes are 5-channel [x1, y1, x2, y2, area] in normalized image coordinates.
A word whose time window contains no trace points gets the whole-image
sentinel [0, 0, 1, 1, 1], meaning "no specific localization".
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class TraceError(ValueError):
    pass


class TracePoint(NamedTuple):
    x: float
    y: float
    t: float


class WordTiming(NamedTuple):
    token: str
    t_start: float
    t_end: float


class TraceBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    area: float


WHOLE_IMAGE_BOX = TraceBox(0.0, 0.0, 1.0, 1.0, 1.0)


def validate_point(p: TracePoint):
    if not (0.0 <= p.x <= 1.0 and 0.0 <= p.y <= 1.0):
        raise TraceError(f"trace point outside [0,1]^2: ({p.x}, {p.y})")
    if p.t < 0:
        raise TraceError(f"negative timestamp: {p.t}")


def validate_timings(timings: list[WordTiming]):
    if not timings:
        raise TraceError("empty timing list")
    prev_end = None
    for w in timings:
        if w.t_start > w.t_end:
            raise TraceError(f"word {w.token!r}: t_start {w.t_start} > t_end {w.t_end}")
        if prev_end is not None and w.t_start < prev_end:
            raise TraceError(f"word {w.token!r}: timing overlaps previous word")
        prev_end = w.t_end


def segment_trace(points: list[TracePoint], timings: list[WordTiming]) -> list[list[TracePoint]]:
    """Group points by word: p belongs to w iff t_start <= p.t < t_end.

    Intervals are half-open so boundary points go to the later word. Points
    that fall in no interval are dropped. Groups may be empty.
    """
    validate_timings(timings)
    times = [p.t for p in points]
    if any(b < a for a, b in zip(times, times[1:])):
        raise TraceError("trace points are not sorted by timestamp")
    groups: list[list[TracePoint]] = [[] for _ in timings]
    for p in points:
        for gi, w in enumerate(timings):
            if w.t_start <= p.t < w.t_end:
                groups[gi].append(p)
                break
    return groups


def box_from_points(points: list[TracePoint]) -> TraceBox:
    """Axis-aligned bounding box of a point group plus its area channel.

    Equals the bounding box of the group's convex hull (taking the hull
    first cannot change coordinate extremes), so the hull step is skipped.
    """
    if not points:
        raise TraceError("box_from_points: empty point group")
    xs = [p.x for p in points]
    ys = [p.y for p in points]
    x1, x2 = min(xs), max(xs)
    y1, y2 = min(ys), max(ys)
    return TraceBox(x1, y1, x2, y2, (x2 - x1) * (y2 - y1))


def encode_trace(points: list[TracePoint], timings: list[WordTiming]) -> list[TraceBox]:
    """One box per word; empty word segments fall back to the whole-image
    sentinel."""
    groups = segment_trace(points, timings)
    return [box_from_points(g) if g else WHOLE_IMAGE_BOX for g in groups]


def trace_to_array(boxes) -> np.ndarray:
    """(T, 5) float64 view of a box sequence."""
    arr = np.asarray([tuple(b) for b in boxes], dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise TraceError(f"expected a sequence of 5-channel boxes, got shape {arr.shape}")
    return arr


def array_to_trace(arr: np.ndarray) -> list[TraceBox]:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise TraceError(f"expected shape (T, 5), got {arr.shape}")
    return [TraceBox(*row) for row in arr]
