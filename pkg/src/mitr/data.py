"""File formats and ingestion.

Narrative records travel as line-delimited JSON with exactly these fields:

    image_id      string
    caption       list of token strings
    trace_points  list of [x, y, t]
    word_timings  list of [token, t_start, t_end], one per caption token
    features_key  string key into the region-feature file

Optional image_width / image_height fields mark pixel-space records; their
coordinates are divided by the image size at load time. Otherwise
coordinates must already be normalized to [0, 1].

Region features use a little-endian binary container (see FEATURE_MAGIC):

    magic   6 bytes  b"MITRFT"
    version u16      currently 1
    d       u32      feature width
    count   u32      number of images
    per image: name_len u16, name utf-8, n_regions u32,
               n_regions * d float32 values, row-major

Floats are stored 32-bit (detector outputs) and widened to 64-bit in memory.
"""

from __future__ import annotations

import json
import string
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .traces import TracePoint, WordTiming

FEATURE_MAGIC = b"MITRFT"
FEATURE_VERSION = 1

NARRATIVE_FIELDS = ("image_id", "caption", "trace_points", "word_timings", "features_key")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class DataError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Token/id mapping with fixed special ids PAD=0, BOS=1, END=2, UNK=3."""

    PAD, BOS, END, UNK = 0, 1, 2, 3
    PAD_TOKEN, BOS_TOKEN, END_TOKEN, UNK_TOKEN = "<pad>", "<bos>", "<end>", "<unk>"
    SPECIALS = (PAD_TOKEN, BOS_TOKEN, END_TOKEN, UNK_TOKEN)

    def __init__(self, tokens):
        words = sorted(set(tokens) - set(self.SPECIALS))
        self.id_to_token = list(self.SPECIALS) + words
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, self.UNK) for t in tokens]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        toks = [self.id_to_token[i] for i in ids]
        if skip_special:
            toks = [t for t in toks if t not in self.SPECIALS]
        return toks

    @classmethod
    def from_records(cls, records) -> "Vocabulary":
        return cls(t for r in records for t in r.caption)


@dataclass
class NarrativeRecord:
    image_id: str
    caption: list[str]
    trace_points: list[TracePoint]
    word_timings: list[WordTiming]
    features_key: str


def _validate_record(obj: dict, line_no: int) -> NarrativeRecord:
    problems = []
    missing = [f for f in NARRATIVE_FIELDS if f not in obj]
    if missing:
        raise DataError(f"line {line_no}: missing fields {missing}")
    width = float(obj.get("image_width", 1.0))
    height = float(obj.get("image_height", 1.0))
    if width <= 0 or height <= 0:
        problems.append("image_width/image_height must be positive")

    caption = obj["caption"]
    if not isinstance(caption, list) or not caption or not all(isinstance(t, str) for t in caption):
        problems.append("caption: must be a non-empty list of strings")
        caption = []

    points = []
    for p in obj["trace_points"]:
        try:
            x, y, t = float(p[0]) / width, float(p[1]) / height, float(p[2])
        except (TypeError, ValueError, IndexError):
            problems.append(f"trace_points: malformed entry {p!r}")
            continue
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            problems.append(f"trace_points: coordinates outside [0,1] after normalization: {p!r}")
        if t < 0:
            problems.append(f"trace_points: negative timestamp {t}")
        points.append(TracePoint(x, y, t))
    if any(b.t < a.t for a, b in zip(points, points[1:])):
        problems.append("trace_points: not sorted by timestamp")

    timings = []
    for w in obj["word_timings"]:
        try:
            timings.append(WordTiming(str(w[0]), float(w[1]), float(w[2])))
        except (TypeError, ValueError, IndexError):
            problems.append(f"word_timings: malformed entry {w!r}")
    if caption and [w.token for w in timings] != caption:
        problems.append("word_timings: tokens do not cover the caption in order")
    for w in timings:
        if w.t_start > w.t_end:
            problems.append(f"word_timings: {w.token!r} has t_start > t_end")
    for a, b in zip(timings, timings[1:]):
        if b.t_start < a.t_end:
            problems.append(f"word_timings: {b.token!r} overlaps {a.token!r}")

    if problems:
        raise DataError(f"line {line_no}: " + "; ".join(problems))
    return NarrativeRecord(str(obj["image_id"]), caption, points, timings, str(obj["features_key"]))


def load_narratives(path) -> list[NarrativeRecord]:
    """Parse and validate a narrative JSONL file; any malformed line raises
    a DataError naming the line and fields."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            records.append(_validate_record(obj, line_no))
    if not records:
        warnings.warn(f"{path}: no records loaded", stacklevel=2)
    return records


def save_narratives(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "image_id": r.image_id,
                "caption": list(r.caption),
                "trace_points": [[p.x, p.y, p.t] for p in r.trace_points],
                "word_timings": [[w.token, w.t_start, w.t_end] for w in r.word_timings],
                "features_key": r.features_key,
            }
            fh.write(json.dumps(obj) + "\n")


def save_region_features(path, features: dict[str, np.ndarray]):
    """Write the binary feature container; values are stored as float32."""
    widths = {arr.shape[1] for arr in features.values()}
    if len(widths) > 1:
        raise DataError(f"feature widths differ across images: {sorted(widths)}")
    d = widths.pop() if widths else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, d, len(features)))
        for name, arr in features.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.shape[0]))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_region_features(path) -> dict[str, np.ndarray]:
    """Read the binary feature container, widening values to float64."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(offset, size):
        if offset + size > len(blob):
            raise DataError(f"{path}: truncated feature file")
        return blob[offset:offset + size], offset + size

    head, pos = take(0, len(FEATURE_MAGIC))
    if head != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {head!r}")
    raw, pos = take(pos, struct.calcsize("<HII"))
    version, d, count = struct.unpack("<HII", raw)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    features: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = take(pos, 2)
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = take(pos, name_len)
        name = raw.decode("utf-8")
        raw, pos = take(pos, 4)
        (n_regions,) = struct.unpack("<I", raw)
        raw, pos = take(pos, n_regions * d * 4)
        features[name] = np.frombuffer(raw, dtype="<f4").reshape(n_regions, d).astype(np.float64)
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return features
