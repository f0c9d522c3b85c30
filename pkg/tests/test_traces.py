import numpy as np
import pytest

from mitr.traces import (
    WHOLE_IMAGE_BOX,
    TraceBox,
    TraceError,
    TracePoint,
    WordTiming,
    array_to_trace,
    box_from_points,
    encode_trace,
    segment_trace,
    trace_to_array,
)


def _convex_hull(points):
    """Monotone-chain hull; oracle for the bbox(hull) == bbox(points) claim."""
    pts = sorted(set((p.x, p.y) for p in points))
    if len(pts) <= 2:
        return [TracePoint(x, y, 0.0) for x, y in pts]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return [TracePoint(x, y, 0.0) for x, y in hull]


def test_segment_assigns_by_half_open_interval():
    points = [TracePoint(0.1, 0.1, 0.1), TracePoint(0.2, 0.2, 0.5)]
    timings = [WordTiming("a", 0.0, 0.3), WordTiming("b", 0.3, 1.0)]
    groups = segment_trace(points, timings)
    assert groups == [[points[0]], [points[1]]]


def test_segment_empty_group_for_pointless_word():
    points = [TracePoint(0.1, 0.1, 0.9)]
    timings = [WordTiming("a", 0.0, 0.3), WordTiming("b", 0.3, 1.0)]
    assert segment_trace(points, timings) == [[], [points[0]]]
    # boundary point belongs to the later word
    boundary = [TracePoint(0.5, 0.5, 0.3)]
    assert segment_trace(boundary, timings) == [[], boundary]


def test_segment_rejects_unsorted_points():
    points = [TracePoint(0.1, 0.1, 0.5), TracePoint(0.2, 0.2, 0.1)]
    with pytest.raises(TraceError):
        segment_trace(points, [WordTiming("a", 0.0, 1.0)])


def test_box_from_points_min_max():
    box = box_from_points([TracePoint(0.1, 0.2, 0.0), TracePoint(0.3, 0.5, 0.1)])
    assert box == TraceBox(0.1, 0.2, 0.3, 0.5, pytest.approx(0.06))


def test_box_from_single_point_is_degenerate():
    assert box_from_points([TracePoint(0.4, 0.4, 0.0)]) == TraceBox(0.4, 0.4, 0.4, 0.4, 0.0)


def test_box_from_points_rejects_empty_group():
    with pytest.raises(TraceError):
        box_from_points([])


def test_bbox_of_hull_equals_bbox_of_points():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 12))
        pts = [TracePoint(float(x), float(y), float(i))
               for i, (x, y) in enumerate(rng.random((n, 2)))]
        hull = _convex_hull(pts)
        assert box_from_points(pts) == box_from_points(hull)


def test_encode_trace_counts_and_sentinel():
    points = [TracePoint(0.1, 0.1, 0.1), TracePoint(0.3, 0.3, 0.2)]
    timings = [WordTiming("a", 0.0, 0.5), WordTiming("b", 0.5, 1.0)]
    boxes = encode_trace(points, timings)
    assert len(boxes) == 2
    assert boxes[0] == TraceBox(0.1, 0.1, 0.3, 0.3, pytest.approx(0.04))
    assert boxes[1] == WHOLE_IMAGE_BOX


def test_encode_trace_rejects_empty_timings():
    with pytest.raises(TraceError):
        encode_trace([TracePoint(0.1, 0.1, 0.0)], [])


def test_encode_trace_matches_direct_interval_reference():
    # independent reference: min/max per half-open interval, computed inline
    rng = np.random.default_rng(17)
    ts = np.sort(rng.uniform(0, 5, size=20))
    points = [TracePoint(float(x), float(y), float(t))
              for (x, y), t in zip(rng.random((20, 2)), ts)]
    timings = [WordTiming(f"w{i}", float(i), float(i + 1)) for i in range(5)]

    expected = []
    for i in range(5):
        xs = [p.x for p in points if i <= p.t < i + 1]
        ys = [p.y for p in points if i <= p.t < i + 1]
        if xs:
            b = (min(xs), min(ys), max(xs), max(ys))
            expected.append(TraceBox(*b, (b[2] - b[0]) * (b[3] - b[1])))
        else:
            expected.append(WHOLE_IMAGE_BOX)

    assert encode_trace(points, timings) == expected


def test_encode_trace_length_always_matches_word_count():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_words = int(rng.integers(1, 9))
        n_points = int(rng.integers(0, 30))
        ts = np.sort(rng.uniform(0, n_words, size=n_points))
        points = [TracePoint(float(x), float(y), float(t))
                  for (x, y), t in zip(rng.random((n_points, 2)), ts)]
        timings = [WordTiming(f"w{i}", float(i), float(i + 0.9)) for i in range(n_words)]
        boxes = encode_trace(points, timings)
        assert len(boxes) == n_words
        for b in boxes:
            if b == WHOLE_IMAGE_BOX:
                continue
            assert 0 <= b.x1 <= b.x2 <= 1 and 0 <= b.y1 <= b.y2 <= 1
            assert abs(b.area - (b.x2 - b.x1) * (b.y2 - b.y1)) <= 1e-12


def test_overlapping_timings_rejected():
    timings = [WordTiming("a", 0.0, 0.6), WordTiming("b", 0.5, 1.0)]
    with pytest.raises(TraceError):
        segment_trace([], timings)


def test_trace_array_round_trip():
    boxes = [TraceBox(0.1, 0.2, 0.3, 0.4, 0.02), WHOLE_IMAGE_BOX]
    assert array_to_trace(trace_to_array(boxes)) == boxes
