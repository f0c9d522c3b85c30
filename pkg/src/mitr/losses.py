"""Training losses: per-task teacher-forced terms, the trace-caption-trace
cycle term, and the input manipulations that feed them."""

from __future__ import annotations

import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ModelConfig, TaskMode
from .masks import build_masks
from .network import (
    START_BOX,
    _Leaves,
    caption_stream_inputs,
    forward_batch,
    shift_caption,
    shift_trace,
)
from .data import Vocabulary

CYCLE_MODES = ("cycle_b", "cycle_s")


def random_box_replacement(boxes: np.ndarray, p: float, rng) -> np.ndarray:
    """Independently replace each box with the whole-image sentinel with
    probability p. Applied to teacher-forcing inputs only, never targets."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"replacement probability must be in [0, 1], got {p}")
    boxes = np.asarray(boxes, dtype=np.float64)
    out = boxes.copy()
    hit = rng.random(boxes.shape[:-1]) < p
    out[hit] = START_BOX
    return out


def _segment_permutation(trace: np.ndarray, segments: int, order) -> np.ndarray:
    parts = np.array_split(trace, segments)
    return np.concatenate([parts[i] for i in order])


def manipulate_trace(traces: list[np.ndarray], mode: str, segments: int, rng) -> list[np.ndarray]:
    """Either swap whole traces across the batch (cycle_b, preferring a
    derangement) or cut each trace into near-equal contiguous segments and
    permute those (cycle_s)."""
    if mode == "cycle_b":
        if len(traces) < 2:
            raise ValueError("cycle_b needs a batch of at least 2 traces")
        perm = rng.permutation(len(traces))
        for _ in range(10):
            if not (perm == np.arange(len(traces))).any():
                break
            perm = rng.permutation(len(traces))
        else:
            perm = np.roll(np.arange(len(traces)), 1)
        return [traces[i] for i in perm]
    if mode == "cycle_s":
        out = []
        for trace in traces:
            if len(trace) < segments:
                raise ValueError(f"cycle_s needs length >= {segments}, got {len(trace)}")
            out.append(_segment_permutation(trace, segments, rng.permutation(segments)))
        return out
    raise ValueError(f"unknown manipulation mode {mode!r}; expected one of {CYCLE_MODES}")


def sample_gumbel(rng, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax(tape: Tape, logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Soft (non-straight-through) relaxation of categorical sampling:
    softmax((logits + noise) / tau) row-wise over the vocabulary."""
    if tau <= 0:
        raise ValueError("gumbel temperature must be positive")
    return ad.masked_softmax(ad.scale(ad.add(logits, tape.constant(noise)), 1.0 / tau))


def trace_loss(tape, batch, params, config: ModelConfig, leaves=None) -> Tensor:
    """Teacher-forced box regression: mean L1 over all five channels."""
    t = batch.ids.shape[1]
    masks = build_masks(TaskMode.CONTROLLED_TRACE, t, t)
    _, pred = forward_batch(tape, params, config, batch.feats, batch.ids,
                            shift_trace(batch.boxes), masks,
                            region_valid=batch.region_valid, cap_valid=batch.valid,
                            trace_valid=batch.valid, leaves=leaves)
    return ad.l1_loss(pred, batch.boxes, valid=batch.valid)


def caption_loss(tape, batch, params, config: ModelConfig, leaves=None) -> Tensor:
    """Teacher-forced token-mean cross-entropy."""
    t = batch.ids.shape[1]
    masks = build_masks(TaskMode.CONTROLLED_CAPTION, t, t)
    logits, _ = forward_batch(tape, params, config, batch.feats,
                              shift_caption(batch.ids, Vocabulary.BOS), batch.boxes, masks,
                              region_valid=batch.region_valid, cap_valid=batch.valid,
                              trace_valid=batch.valid, leaves=leaves)
    return ad.cross_entropy(logits, batch.ids, valid=batch.valid)


def joint_loss(tape, batch, params, config: ModelConfig, replace_prob: float, rng,
               leaves=None) -> Tensor:
    """Joint-mode cross-entropy plus box L1, with random sentinel
    replacement applied to the teacher-forcing trace input."""
    t = batch.ids.shape[1]
    masks = build_masks(TaskMode.JOINT, t, t)
    trace_in = shift_trace(random_box_replacement(batch.boxes, replace_prob, rng))
    logits, pred = forward_batch(tape, params, config, batch.feats,
                                 shift_caption(batch.ids, Vocabulary.BOS), trace_in, masks,
                                 region_valid=batch.region_valid, cap_valid=batch.valid,
                                 trace_valid=batch.valid, leaves=leaves)
    ce = ad.cross_entropy(logits, batch.ids, valid=batch.valid)
    l1 = ad.l1_loss(pred, batch.boxes, valid=batch.valid)
    return ad.add(ce, l1)


def cycle_step(tape, batch, params, config: ModelConfig, mode: str, segments: int,
               tau: float, rng, leaves=None) -> Tensor:
    """Manipulated trace -> caption distributions -> soft word mixtures ->
    trace predictions -> L1 back to the manipulated trace, end to end on one
    tape so gradients reach both passes."""
    b, t = batch.ids.shape
    if mode == "cycle_b" and b < 2:
        raise ValueError("cycle_b needs a batch of at least 2 traces")
    lengths = batch.valid.sum(axis=1)
    trimmed = [batch.boxes[i, :lengths[i]] for i in range(b)]
    manipulated = manipulate_trace(trimmed, mode, segments, rng)

    r_tilde = np.zeros_like(batch.boxes)
    r_tilde[:] = START_BOX
    tilde_valid = np.zeros_like(batch.valid)
    for i, tr in enumerate(manipulated):
        r_tilde[i, :len(tr)] = tr
        tilde_valid[i, :len(tr)] = True

    cap_masks = build_masks(TaskMode.CONTROLLED_CAPTION, t, t)
    logits, _ = forward_batch(tape, params, config, batch.feats,
                              shift_caption(batch.ids, Vocabulary.BOS), r_tilde, cap_masks,
                              region_valid=batch.region_valid, cap_valid=batch.valid,
                              trace_valid=tilde_valid, leaves=leaves)
    soft_words = gumbel_softmax(tape, logits, tau, sample_gumbel(rng, logits.shape))
    cap_embed = caption_stream_inputs(tape, params, soft_words, leaves=leaves)

    trace_masks = build_masks(TaskMode.CONTROLLED_TRACE, t, t)
    _, pred = forward_batch(tape, params, config, batch.feats, cap_embed,
                            shift_trace(r_tilde), trace_masks,
                            region_valid=batch.region_valid, cap_valid=batch.valid,
                            trace_valid=tilde_valid, leaves=leaves)
    return ad.l1_loss(pred, r_tilde, valid=tilde_valid)


def loss_total(tape, batch, params, config: ModelConfig, weights, train_config, rng):
    """Weighted sum of the four terms; terms with zero weight are skipped so
    an all-zero weighting is exactly zero with zero gradients. Returns the
    scalar Tensor and a float breakdown for logging."""
    if batch.ids.shape[0] == 0:
        raise ValueError("loss_total: empty batch")
    leaves = _Leaves(tape, params)
    parts = {"L_trace": 0.0, "L_caption": 0.0, "L_cycle": 0.0, "L_joint": 0.0}
    terms = []

    def accumulate(key, weight, term):
        parts[key] = term.item()
        terms.append(term if weight == 1.0 else ad.scale(term, weight))

    if weights.trace > 0:
        accumulate("L_trace", weights.trace, trace_loss(tape, batch, params, config, leaves))
    if weights.caption > 0:
        accumulate("L_caption", weights.caption,
                   caption_loss(tape, batch, params, config, leaves))
    if weights.cycle > 0:
        if train_config.cycle_mode == "cycle_b" and batch.ids.shape[0] < 2:
            warnings.warn("skipping cycle_b on a batch of 1", stacklevel=2)
        else:
            accumulate("L_cycle", weights.cycle,
                       cycle_step(tape, batch, params, config, train_config.cycle_mode,
                                  train_config.cycle_segments, train_config.gumbel_tau,
                                  rng, leaves))
    if weights.joint > 0:
        accumulate("L_joint", weights.joint,
                   joint_loss(tape, batch, params, config, train_config.replace_prob,
                              rng, leaves))

    if not terms:
        return tape.constant(0.0), parts
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total, parts
