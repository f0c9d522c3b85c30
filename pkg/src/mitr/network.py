"""The mirrored transformer.

One parameter set serves all three task modes; switching tasks changes only
the shift flags and attention masks. Per layer, the image encoder runs
self-attention plus a feed-forward block over region features, and each of
the two mirrored streams runs self-attention, cross-attention into the image
features, and a fusion cross-attention into the other stream's pre-fusion
features. Every sublayer is a post-norm residual block. The caption stream
reads word embeddings plus a positional table shared with the trace stream,
whose 5-channel boxes enter through a learned projection; the caption head
emits vocabulary logits and the trace head five sigmoid-bounded channels.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import ModelConfig, TaskMode
from .masks import MaskSet, build_masks

START_BOX = np.array([0.0, 0.0, 1.0, 1.0, 1.0])


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _attn_names(prefix):
    for p in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        yield f"{prefix}.{p}"
    yield f"{prefix}_norm.gain"
    yield f"{prefix}_norm.bias"


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in a fixed order."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple] = {
        "visual_in.w": (config.d_visual, d),
        "visual_in.b": (d,),
        "trace_in.w": (5, d),
        "trace_in.b": (d,),
        "embed.word": (v, d),
        "embed.pos": (config.max_len, d),
    }

    def attn(prefix):
        for name in _attn_names(prefix):
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("gain", "bias"):
                shapes[name] = (d,)
            elif leaf.startswith("w"):
                shapes[name] = (d, d)
            else:
                shapes[name] = (d,)

    for layer in range(config.n_layers):
        attn(f"enc{layer}.attn")
        shapes[f"enc{layer}.ffn.w1"] = (d, config.d_ffn)
        shapes[f"enc{layer}.ffn.b1"] = (config.d_ffn,)
        shapes[f"enc{layer}.ffn.w2"] = (config.d_ffn, d)
        shapes[f"enc{layer}.ffn.b2"] = (d,)
        shapes[f"enc{layer}.ffn_norm.gain"] = (d,)
        shapes[f"enc{layer}.ffn_norm.bias"] = (d,)
        for stream in ("cap", "trace"):
            for sub in ("self", "cross", "fuse"):
                attn(f"{stream}{layer}.{sub}")

    shapes["head.word.w"] = (d, v)
    shapes["head.word.b"] = (v,)
    shapes["head.box.w"] = (d, 5)
    shapes["head.box.b"] = (5,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic initialization: Xavier-uniform matrices, zero biases,
    unit norm gains, small-normal embeddings."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("embed."):
            params[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


class _Leaves:
    """One tape leaf per parameter name, created lazily and shared."""

    def __init__(self, tape: Tape, params: dict[str, np.ndarray]):
        self.tape = tape
        self.params = params
        self._cache: dict[str, Tensor] = {}

    def __call__(self, name: str) -> Tensor:
        t = self._cache.get(name)
        if t is None:
            t = self.tape.leaf(self.params[name], name=name)
            self._cache[name] = t
        return t


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _linear(L: _Leaves, prefix: str, x: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, L(f"{prefix}.w")), L(f"{prefix}.b"))


def _post_norm(L: _Leaves, prefix: str, residual: Tensor, sublayer_out: Tensor) -> Tensor:
    return ad.layer_norm(ad.add(residual, sublayer_out), L(f"{prefix}.gain"), L(f"{prefix}.bias"))


def _attn_block(L: _Leaves, config: ModelConfig, prefix: str, x_q: Tensor, x_kv: Tensor,
                mask) -> Tensor:
    """Multi-head attention sublayer with residual and post-norm."""
    d, h = config.d_model, config.n_heads
    dh = d // h
    q = ad.add(ad.matmul(x_q, L(f"{prefix}.wq")), L(f"{prefix}.bq"))
    k = ad.add(ad.matmul(x_kv, L(f"{prefix}.wk")), L(f"{prefix}.bk"))
    v = ad.add(ad.matmul(x_kv, L(f"{prefix}.wv")), L(f"{prefix}.bv"))
    heads = []
    for i in range(h):
        qh = ad.slice_axis(q, -1, i * dh, (i + 1) * dh)
        kh = ad.slice_axis(k, -1, i * dh, (i + 1) * dh)
        vh = ad.slice_axis(v, -1, i * dh, (i + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh))
        probs = ad.masked_softmax(scores, mask)
        heads.append(ad.matmul(probs, vh))
    ctx = heads[0] if h == 1 else ad.concat(heads, axis=-1)
    out = ad.add(ad.matmul(ctx, L(f"{prefix}.wo")), L(f"{prefix}.bo"))
    return _post_norm(L, f"{prefix}_norm", x_q, out)


def _ffn_block(L: _Leaves, prefix: str, x: Tensor) -> Tensor:
    """Two linear maps with a ReLU between, residual and post-norm."""
    inner = ad.relu(ad.add(ad.matmul(x, L(f"{prefix}.ffn.w1")), L(f"{prefix}.ffn.b1")))
    out = ad.add(ad.matmul(inner, L(f"{prefix}.ffn.w2")), L(f"{prefix}.ffn.b2"))
    return _post_norm(L, f"{prefix}.ffn_norm", x, out)


def _combine_mask(task_mask, key_valid, n_query):
    """Merge a (Tq, Tk) allow-matrix with per-batch key validity into a
    broadcastable mask; None when nothing is restricted."""
    if key_valid is None:
        return task_mask
    keys = key_valid[:, None, :]  # (B, 1, Tk)
    if task_mask is None:
        return np.broadcast_to(keys, (key_valid.shape[0], n_query, key_valid.shape[1]))
    return task_mask[None, :, :] & keys


def shift_caption(ids: np.ndarray, bos_id: int) -> np.ndarray:
    """Insert the begin token at position 0 and drop the last element."""
    shifted = np.empty_like(ids)
    shifted[..., 0] = bos_id
    shifted[..., 1:] = ids[..., :-1]
    return shifted


def shift_trace(boxes: np.ndarray) -> np.ndarray:
    """Insert the whole-image start box at position 0, drop the last box."""
    shifted = np.empty_like(boxes)
    shifted[..., 0, :] = START_BOX
    shifted[..., 1:, :] = boxes[..., :-1, :]
    return shifted


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _positions(L: _Leaves, n: int, batch: int) -> Tensor:
    idx = np.broadcast_to(np.arange(n), (batch, n))
    return ad.embedding(L("embed.pos"), idx)


def forward_batch(tape: Tape, params, config: ModelConfig, feats: np.ndarray,
                  cap_inputs, trace_inputs: np.ndarray, masks: MaskSet, *,
                  region_valid=None, cap_valid=None, trace_valid=None,
                  leaves: _Leaves | None = None) -> tuple[Tensor, Tensor]:
    """Run the network on already-prepared input sequences.

    feats (B, R, d_visual); cap_inputs is (B, Tw) int ids or a precomputed
    (B, Tw, d_model) Tensor of caption-stream inputs (embeddings already
    summed with positions); trace_inputs (B, Tr, 5). The mask set applies to
    these input lengths; shift flags are the caller's business. Validity
    masks restrict attention keys for padded batches. Pass one shared
    `leaves` cache when several forwards run on the same tape.
    """
    b, r, _ = feats.shape
    if r == 0:
        raise ModelError("image_encode: zero regions")
    L = leaves if leaves is not None else _Leaves(tape, params)

    tw = cap_inputs.shape[1]
    tr = trace_inputs.shape[1]
    if max(tw, tr) > config.max_len:
        raise ModelError(f"sequence length exceeds max_len={config.max_len}")

    xv = _linear(L, "visual_in", tape.constant(feats))
    if isinstance(cap_inputs, Tensor):
        xw = cap_inputs
    else:
        cap_inputs = np.asarray(cap_inputs)
        xw = ad.add(ad.embedding(L("embed.word"), cap_inputs), _positions(L, tw, b))
    xr = ad.add(_linear(L, "trace_in", tape.constant(trace_inputs)), _positions(L, tr, b))

    region_self = _combine_mask(None, region_valid, r)
    region_keys_w = _combine_mask(None, region_valid, tw)
    region_keys_r = _combine_mask(None, region_valid, tr)
    cap_self = _combine_mask(masks.caption_self, cap_valid, tw)
    trace_self = _combine_mask(masks.trace_self, trace_valid, tr)
    cap_fuse = _combine_mask(masks.caption_fusion, trace_valid, tw)
    trace_fuse = _combine_mask(masks.trace_fusion, cap_valid, tr)

    for layer in range(config.n_layers):
        hv = _attn_block(L, config, f"enc{layer}.attn", xv, xv, region_self)
        hv = _ffn_block(L, f"enc{layer}", hv)
        hw = _attn_block(L, config, f"cap{layer}.self", xw, xw, cap_self)
        hw = _attn_block(L, config, f"cap{layer}.cross", hw, hv, region_keys_w)
        hr = _attn_block(L, config, f"trace{layer}.self", xr, xr, trace_self)
        hr = _attn_block(L, config, f"trace{layer}.cross", hr, hv, region_keys_r)
        # fusion reads the other stream's pre-fusion features
        fw = _attn_block(L, config, f"cap{layer}.fuse", hw, hr, cap_fuse)
        fr = _attn_block(L, config, f"trace{layer}.fuse", hr, hw, trace_fuse)
        xv, xw, xr = hv, fw, fr

    word_logits = _linear(L, "head.word", xw)
    box_pred = ad.sigmoid(_linear(L, "head.box", xr))
    return word_logits, box_pred


def caption_stream_inputs(tape: Tape, params, soft_words: Tensor,
                          leaves: _Leaves | None = None) -> Tensor:
    """Caption-stream inputs from soft token mixtures (rows over the
    vocabulary): mixture-weighted word embeddings plus positions."""
    L = leaves if leaves is not None else _Leaves(tape, params)
    b, t, _ = soft_words.shape
    return ad.add(ad.matmul(soft_words, L("embed.word")), _positions(L, t, b))


def image_encode(x_v: np.ndarray, params, config: ModelConfig) -> np.ndarray:
    """Full encoder stack over one image's region features: (R, d_model)."""
    x_v = np.asarray(x_v, dtype=np.float64)
    if x_v.ndim != 2 or x_v.shape[0] == 0:
        raise ModelError(f"image_encode: expected (R, d_visual) with R >= 1, got {x_v.shape}")
    tape = Tape()
    L = _Leaves(tape, params)
    xv = _linear(L, "visual_in", tape.constant(x_v[None]))
    for layer in range(config.n_layers):
        xv = _attn_block(L, config, f"enc{layer}.attn", xv, xv, None)
        xv = _ffn_block(L, f"enc{layer}", xv)
    return xv.data[0]


def mitr_forward(task: TaskMode, x_v: np.ndarray, caption_ids, trace_boxes, params,
                 config: ModelConfig, bos_id: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced single-example forward: shifts the generated stream(s)
    per task and returns (word logits (n_w, V), box predictions (n_r, 5))."""
    caption_ids = np.asarray(caption_ids, dtype=np.int64)
    trace_boxes = np.asarray(trace_boxes, dtype=np.float64)
    n_w, n_r = caption_ids.shape[0], trace_boxes.shape[0]
    if task is TaskMode.JOINT and n_w != n_r:
        raise ModelError(f"joint mode needs aligned streams, got lengths {n_w} and {n_r}")
    masks = build_masks(task, n_w, n_r)
    cap_in = shift_caption(caption_ids, bos_id) if masks.shift_caption else caption_ids
    trace_in = shift_trace(trace_boxes) if masks.shift_trace else trace_boxes
    tape = Tape()
    logits, boxes = forward_batch(tape, params, config, np.asarray(x_v, dtype=np.float64)[None],
                                  cap_in[None], trace_in[None], masks)
    return logits.data[0], boxes.data[0]
