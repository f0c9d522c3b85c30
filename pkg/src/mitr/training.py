"""Optimization loop: batching, learning-rate schedule, metrics log, and
validation helpers. Everything downstream of the seed is deterministic, so
two runs with the same inputs produce bit-identical checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import save_checkpoint
from .config import ModelConfig, TaskMode
from .data import Vocabulary
from .decoding import generate_caption, generate_joint, generate_trace
from .lbm import lbm_score
from .losses import loss_total
from .masks import build_masks
from .metrics import corpus_bleu_n
from .network import START_BOX, forward_batch, init_params, shift_caption
from .optim import AdamState, adam_step
from .traces import encode_trace, trace_to_array


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LossWeights:
    """Term weights; defaults drawn from the {1.0, 0.5, 0.3, 0.1, 0.0} grid."""

    trace: float = 1.0
    caption: float = 0.3
    cycle: float = 0.1
    joint: float = 1.0

    def __post_init__(self):
        for name in ("trace", "caption", "cycle", "joint"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"loss weight {name} must be in [0, 1], got {v}")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 3  # epochs
    batch_size: int = 30
    epochs: int = 30
    replace_prob: float = 0.5
    gumbel_tau: float = 1.0
    cycle_segments: int = 3
    cycle_mode: str = "cycle_b"
    seed: int = 0
    max_steps: int | None = None
    eval_every: int = 0  # epochs between validation passes; 0 disables
    eval_samples: int = 16
    eval_beam: int = 5

    def __post_init__(self):
        if not 0.0 <= self.replace_prob <= 1.0:
            raise ValueError("replace_prob must be in [0, 1]")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")
        if self.cycle_segments < 1:
            raise ValueError("cycle_segments must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class Example:
    image_id: str
    feats: np.ndarray  # (R, d_visual)
    ids: np.ndarray  # (T,) token ids, ending with the end token
    boxes: np.ndarray  # (T, 5) aligned boxes


@dataclass
class Batch:
    feats: np.ndarray  # (B, R, d_visual)
    region_valid: np.ndarray | None  # (B, R) bool
    ids: np.ndarray  # (B, T)
    boxes: np.ndarray  # (B, T, 5)
    valid: np.ndarray  # (B, T) bool


def encode_examples(records, features, vocab: Vocabulary) -> list[Example]:
    """Tokenized, box-encoded training examples. Captions that do not end
    with the end marker get it appended, paired with a sentinel box."""
    examples = []
    for r in records:
        ids = vocab.encode(r.caption)
        boxes = trace_to_array(encode_trace(r.trace_points, r.word_timings))
        if ids[-1] != Vocabulary.END:
            ids = ids + [Vocabulary.END]
            boxes = np.vstack([boxes, START_BOX[None]])
        examples.append(Example(r.image_id, np.asarray(features[r.features_key], dtype=np.float64),
                                np.asarray(ids, dtype=np.int64), boxes))
    return examples


def make_batch(examples: list[Example]) -> Batch:
    b = len(examples)
    r_max = max(e.feats.shape[0] for e in examples)
    t_max = max(len(e.ids) for e in examples)
    d_visual = examples[0].feats.shape[1]
    feats = np.zeros((b, r_max, d_visual))
    region_valid = np.zeros((b, r_max), dtype=bool)
    ids = np.full((b, t_max), Vocabulary.PAD, dtype=np.int64)
    boxes = np.zeros((b, t_max, 5))
    boxes[:] = START_BOX
    valid = np.zeros((b, t_max), dtype=bool)
    for i, e in enumerate(examples):
        feats[i, :e.feats.shape[0]] = e.feats
        region_valid[i, :e.feats.shape[0]] = True
        ids[i, :len(e.ids)] = e.ids
        boxes[i, :len(e.ids)] = e.boxes
        valid[i, :len(e.ids)] = True
    same_regions = region_valid.all()
    return Batch(feats, None if same_regions else region_valid, ids, boxes, valid)


def epoch_batches(examples: list[Example], batch_size: int, rng) -> list[Batch]:
    """Shuffle, then group near-equal caption lengths to keep padding low;
    deterministic for a given generator state."""
    order = rng.permutation(len(examples))
    order = order[np.argsort([len(examples[i].ids) for i in order], kind="stable")]
    return [make_batch([examples[i] for i in order[lo:lo + batch_size]])
            for lo in range(0, len(order), batch_size)]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: ModelConfig
    vocab: Vocabulary
    metrics: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)


def teacher_forced_accuracy(params, config: ModelConfig, examples: list[Example]) -> float:
    """Fraction of caption tokens predicted correctly with the ground-truth
    prefix and trace visible (caption-generation mode)."""
    correct = total = 0
    for batch in [make_batch(examples[i:i + 32]) for i in range(0, len(examples), 32)]:
        t = batch.ids.shape[1]
        masks = build_masks(TaskMode.CONTROLLED_CAPTION, t, t)
        logits, _ = forward_batch(Tape(), params, config, batch.feats,
                                  shift_caption(batch.ids, Vocabulary.BOS), batch.boxes,
                                  masks, region_valid=batch.region_valid,
                                  cap_valid=batch.valid, trace_valid=batch.valid)
        pred = logits.data.argmax(axis=-1)
        correct += int(((pred == batch.ids) & batch.valid).sum())
        total += int(batch.valid.sum())
    return correct / total


def evaluate(params, config: ModelConfig, examples: list[Example], vocab: Vocabulary,
             *, n_samples: int = 16, beam_size: int = 5, joint: bool = False) -> dict:
    """Validation metrics: teacher-forced accuracy, generated-trace distance
    for the trace task (plus the all-sentinel baseline), caption BLEU-1, and
    optionally the joint-mode trace distance."""
    subset = examples[:n_samples]
    out = {"tf_accuracy": teacher_forced_accuracy(params, config, examples)}

    lbm_gen, lbm_base = [], []
    candidates, references = [], []
    for e in subset:
        pred = generate_trace(e.feats, e.ids, params, config)
        lbm_gen.append(lbm_score(e.boxes, pred, 0))
        sentinel = np.tile(START_BOX, (len(e.ids), 1))
        lbm_base.append(lbm_score(e.boxes, sentinel, 0))
        cap = generate_caption(e.feats, e.boxes, params, config, beam_size=beam_size,
                               max_len=config.max_len - 1)
        candidates.append(vocab.decode(cap))
        references.append([vocab.decode(e.ids)])
    out["lbm_k0"] = float(np.mean(lbm_gen))
    out["lbm_sentinel_baseline"] = float(np.mean(lbm_base))
    out["bleu1"] = corpus_bleu_n(candidates, references, 1)

    if joint:
        scores = []
        for e in subset:
            _, boxes = generate_joint(e.feats, params, config, max_len=config.max_len - 1)
            if len(boxes) == 0:
                boxes = np.tile(START_BOX, (1, 1))
            scores.append(lbm_score(e.boxes, boxes, 0))
        out["joint_lbm_k0"] = float(np.mean(scores))
    return out


def train(records, features, model_config: ModelConfig | None, train_config: TrainConfig,
          weights: LossWeights, *, vocab: Vocabulary | None = None, val_records=None,
          checkpoint_path=None, log_path=None, desk: bool = False,
          progress=None) -> TrainResult:
    """Full optimization run over narrative records.

    When model_config is None one is built from the data (desk profile if
    desk=True). Emits one metrics record per step, runs the optional
    validation pass every eval_every epochs, and writes the checkpoint last.
    """
    if not records:
        raise ValueError("train: empty dataset")
    vocab = vocab or Vocabulary.from_records(records)
    if model_config is None:
        d_visual = next(iter(features.values())).shape[1]
        max_needed = max(len(r.caption) for r in records) + 2
        if desk:
            model_config = ModelConfig.desk(len(vocab), d_visual, max_len=max(max_needed, 16))
        else:
            model_config = ModelConfig(vocab_size=len(vocab), d_visual=d_visual)

    examples = encode_examples(records, features, vocab)
    val_examples = encode_examples(val_records, features, vocab) if val_records else None

    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, seed=train_config.seed)
    state = AdamState.init(params)

    result = TrainResult(params=params, config=model_config, vocab=vocab)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(train_config.epochs):
            lr = train_config.lr_at(epoch)
            for batch in epoch_batches(examples, train_config.batch_size, rng):
                tape = Tape()
                total, parts = loss_total(tape, batch, params, model_config, weights,
                                          train_config, rng)
                if not np.isfinite(total.item()):
                    raise NumericalError(
                        f"non-finite loss at step {step} (epoch {epoch}): {parts}")
                grads = ad.grads_by_name(total)
                adam_step(params, grads, state, lr)
                record = {"step": step, "epoch": epoch, **parts, "lr": lr}
                result.metrics.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                step += 1
                if train_config.max_steps is not None and step >= train_config.max_steps:
                    raise StopIteration
            if (val_examples and train_config.eval_every
                    and (epoch + 1) % train_config.eval_every == 0):
                stats = evaluate(params, model_config, val_examples, vocab,
                                 n_samples=train_config.eval_samples,
                                 beam_size=train_config.eval_beam)
                stats["epoch"] = epoch
                result.val_history.append(stats)
                if progress:
                    progress(stats)
    except StopIteration:
        pass
    finally:
        if log_file:
            log_file.close()

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model_config, params)
    return result
