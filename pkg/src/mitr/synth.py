"""Synthetic narrative generator for desk-scale learnability runs.

Each image holds a few typed objects with random boxes. Region features are
the object's type one-hot plus its box corners plus noise, so both tasks are
solvable from the features alone: a caption names object types in a random
visit order and the aligned trace holds exactly those objects' boxes. Words
without a referent (the fixed function-word prefix and the end marker) carry
no trace points, so they encode to the whole-image sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import NarrativeRecord, Vocabulary
from .traces import TracePoint, WordTiming

TYPE_WORDS = ("cat", "dog", "car", "tree", "ball", "bird", "boat", "lamp",
              "fish", "door", "rock", "star")
PREFIX_WORDS = ("there", "is")


@dataclass
class SynthSpec:
    n_types: int = 5
    n_images: int = 64
    objects_per_image: tuple[int, int] = (2, 4)
    d_visual: int | None = None  # defaults to n_types + 4
    noise_scale: float = 0.01
    seed: int = 0

    type_words: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.n_types < 2:
            raise ValueError("synth_dataset: need at least 2 object types")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        if self.d_visual is None:
            self.d_visual = self.n_types + 4
        if self.d_visual < self.n_types + 4:
            raise ValueError("d_visual must be at least n_types + 4")
        names = [TYPE_WORDS[i] if i < len(TYPE_WORDS) else f"obj{i}" for i in range(self.n_types)]
        self.type_words = tuple(names)

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(list(PREFIX_WORDS) + list(self.type_words) + [Vocabulary.END_TOKEN])


def _random_box(rng) -> tuple[float, float, float, float]:
    x1 = rng.uniform(0.0, 0.7)
    y1 = rng.uniform(0.0, 0.7)
    x2 = x1 + rng.uniform(0.1, min(0.3, 1.0 - x1))
    y2 = y1 + rng.uniform(0.1, min(0.3, 1.0 - y1))
    return float(x1), float(y1), float(x2), float(y2)


def synth_dataset(spec: SynthSpec) -> tuple[list[NarrativeRecord], dict[str, np.ndarray]]:
    """Deterministic (records, region features) pair for a SynthSpec."""
    rng = np.random.default_rng(spec.seed)
    records = []
    features: dict[str, np.ndarray] = {}
    for idx in range(spec.n_images):
        image_id = f"synth{idx:05d}"
        n_obj = int(rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
        types = rng.choice(spec.n_types, size=n_obj, replace=False) \
            if n_obj <= spec.n_types else rng.integers(0, spec.n_types, size=n_obj)
        boxes = [_random_box(rng) for _ in range(n_obj)]

        feat = np.zeros((n_obj, spec.d_visual))
        for r, (t, box) in enumerate(zip(types, boxes)):
            feat[r, t] = 1.0
            feat[r, spec.n_types:spec.n_types + 4] = box
        feat += rng.normal(0.0, spec.noise_scale, size=feat.shape)
        features[image_id] = feat

        visit = rng.permutation(n_obj)
        caption = list(PREFIX_WORDS) + [spec.type_words[types[i]] for i in visit] \
            + [Vocabulary.END_TOKEN]

        timings = [WordTiming(tok, float(i), float(i) + 0.9) for i, tok in enumerate(caption)]
        points: list[TracePoint] = []
        for slot, obj in enumerate(visit, start=len(PREFIX_WORDS)):
            x1, y1, x2, y2 = boxes[obj]
            t0 = float(slot)
            # corners pin the encoded bounding box to the object box exactly
            points.append(TracePoint(x1, y1, t0 + 0.1))
            points.append(TracePoint(float(rng.uniform(x1, x2)), float(rng.uniform(y1, y2)), t0 + 0.4))
            points.append(TracePoint(x2, y2, t0 + 0.7))

        records.append(NarrativeRecord(image_id, caption, points, timings, image_id))
    return records, features
