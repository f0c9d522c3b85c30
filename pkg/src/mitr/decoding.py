"""Decoding: beam-search captions, greedy box sequences, and interleaved
joint generation.

Generated captions never contain the padding or begin tokens (they are
excluded from expansion) and stop at the end token, which is not emitted.
Ties in scores break toward the lowest token id. Log-probabilities
accumulate in 64-bit without length normalization.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .config import ModelConfig, TaskMode
from .data import Vocabulary
from .masks import build_masks
from .network import START_BOX, forward_batch

BEAM_SIZE = 5


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def generate_caption(x_v, trace_boxes, params, config: ModelConfig,
                     beam_size: int = BEAM_SIZE, max_len: int | None = None) -> list[int]:
    """Beam search over the caption stream with the trace fully visible.

    Returns the completed sequence with the highest total log-probability
    (end token consumed, not returned); if no beam completes within the
    length budget, the best unfinished beam is returned.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    feats = np.asarray(x_v, dtype=np.float64)[None]
    trace = np.asarray(trace_boxes, dtype=np.float64)
    n_r = trace.shape[0]

    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for step in range(max_len):
        b = len(live)
        cap_in = np.array([(Vocabulary.BOS, *ids) for _, ids in live], dtype=np.int64)
        masks = build_masks(TaskMode.CONTROLLED_CAPTION, step + 1, n_r)
        logits, _ = forward_batch(Tape(), params, config, np.repeat(feats, b, axis=0),
                                  cap_in, np.repeat(trace[None], b, axis=0), masks)
        log_probs = _log_softmax(logits.data[:, -1, :])

        candidates = []
        for bi, (score, ids) in enumerate(live):
            for tok in range(config.vocab_size):
                if tok in (Vocabulary.PAD, Vocabulary.BOS):
                    continue
                candidates.append((score + log_probs[bi, tok], tok, ids))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

        live = []
        for score, tok, ids in candidates[:beam_size]:
            if tok == Vocabulary.END:
                finished.append((score, ids))
            else:
                live.append((score, ids + (tok,)))
        if not live:
            break
        if finished and max(s for s, _ in finished) >= live[0][0]:
            break  # no unfinished beam can still win

    pool = finished if finished else live
    best = min(pool, key=lambda c: (-c[0], c[1]))
    return list(best[1])


def generate_trace(x_v, caption_ids, params, config: ModelConfig) -> np.ndarray:
    """Greedy continuous decoding: one box per caption token, feeding each
    predicted box back as the next step's input."""
    caption_ids = np.asarray(caption_ids, dtype=np.int64)
    n_w = caption_ids.shape[0]
    if n_w == 0:
        raise ValueError("generate_trace: empty caption")
    feats = np.asarray(x_v, dtype=np.float64)[None]
    preds: list[np.ndarray] = []
    for t in range(n_w):
        trace_in = np.vstack([START_BOX[None], np.array(preds).reshape(t, 5)])
        masks = build_masks(TaskMode.CONTROLLED_TRACE, n_w, t + 1)
        _, boxes = forward_batch(Tape(), params, config, feats, caption_ids[None],
                                 trace_in[None], masks)
        preds.append(boxes.data[0, t])
    return np.array(preds)


def generate_joint(x_v, params, config: ModelConfig,
                   max_len: int | None = None) -> tuple[list[int], np.ndarray]:
    """Interleaved greedy decoding of one word and one box per step; stops
    when the caption stream emits the end token or the length cap is hit.
    Caption and trace always come back the same length."""
    max_len = config.max_len if max_len is None else min(max_len, config.max_len)
    feats = np.asarray(x_v, dtype=np.float64)[None]
    words: list[int] = []
    boxes_out: list[np.ndarray] = []
    for t in range(max_len):
        cap_in = np.array([(Vocabulary.BOS, *words)], dtype=np.int64)
        trace_in = np.vstack([START_BOX[None], np.array(boxes_out).reshape(t, 5)])[None]
        masks = build_masks(TaskMode.JOINT, t + 1, t + 1)
        logits, boxes = forward_batch(Tape(), params, config, feats, cap_in, trace_in, masks)
        step_logits = logits.data[0, t].copy()
        step_logits[[Vocabulary.PAD, Vocabulary.BOS]] = -np.inf
        tok = int(np.argmax(step_logits))  # argmax takes the lowest id on ties
        if tok == Vocabulary.END:
            break
        words.append(tok)
        boxes_out.append(boxes.data[0, t])
    return words, np.array(boxes_out).reshape(len(words), 5)
