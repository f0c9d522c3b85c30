"""Task-dependent shift flags and attention masks.

The caption and trace streams are mirror images: whichever stream is being
generated is shifted right by one position and self-attends causally, while
the conditioning stream stays unshifted and fully visible. In joint mode
both streams shift and the cross-stream fusion attention is causal too;
since both inputs are shifted, letting fusion query position t see the other
stream up to position t (inclusive) exposes nothing beyond index t-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TaskMode


@dataclass(frozen=True)
class MaskSet:
    """Boolean allow-matrices (True = may attend); None means unmasked."""

    caption_self: np.ndarray | None
    trace_self: np.ndarray | None
    caption_fusion: np.ndarray | None  # caption queries over trace keys
    trace_fusion: np.ndarray | None  # trace queries over caption keys
    shift_caption: bool
    shift_trace: bool


def causal(n_query: int, n_key: int | None = None) -> np.ndarray:
    """Lower-triangular-inclusive allow matrix: position t sees keys <= t."""
    n_key = n_query if n_key is None else n_key
    return np.tril(np.ones((n_query, n_key), dtype=bool))


def build_masks(task: TaskMode, n_w: int, n_r: int) -> MaskSet:
    if n_w < 1 or n_r < 1:
        raise ValueError(f"build_masks: lengths must be >= 1, got n_w={n_w}, n_r={n_r}")
    if task is TaskMode.CONTROLLED_CAPTION:
        return MaskSet(causal(n_w), None, None, None, shift_caption=True, shift_trace=False)
    if task is TaskMode.CONTROLLED_TRACE:
        return MaskSet(None, causal(n_r), None, None, shift_caption=False, shift_trace=True)
    if task is TaskMode.JOINT:
        return MaskSet(causal(n_w), causal(n_r), causal(n_w, n_r), causal(n_r, n_w),
                       shift_caption=True, shift_trace=True)
    raise ValueError(f"unknown task {task!r}")
