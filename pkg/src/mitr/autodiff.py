"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every operation in construction order, which by construction
is a topological order of the computation graph; backward() walks the record
in reverse accumulating vector-Jacobian products. The operation set is closed
(see OP_TABLE) and every backward rule is verified against central finite
differences in the test suite.

All values are 64-bit floats. Tensors are confined to the tape that created
them; distinct tapes are independent and may be used concurrently.
"""

from __future__ import annotations

import numpy as np

LAYER_NORM_EPS = 1e-5


class AutodiffError(Exception):
    """Raised for malformed graphs: shape mismatches, degenerate softmax rows."""


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class _Node:
    __slots__ = ("kind", "input_ids", "value", "vjp", "name")

    def __init__(self, kind, input_ids, value, vjp, name=None):
        self.kind = kind
        self.input_ids = input_ids
        self.value = value
        self.vjp = vjp
        self.name = name


class Tensor:
    """Handle to one node of a tape; immutable once created."""

    __slots__ = ("tape", "node_id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.node_id].value

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        node = self.tape.nodes[self.node_id]
        return f"Tensor(kind={node.kind!r}, shape={self.shape})"


class Tape:
    """Ordered operation record; append order is topological order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def _record(self, kind, inputs, value, vjp, name=None) -> Tensor:
        input_ids = tuple(t.node_id for t in inputs)
        self.nodes.append(_Node(kind, input_ids, value, vjp, name))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, name=None) -> Tensor:
        """Differentiable input; shows up in the gradient map of backward()."""
        return self._record("leaf", (), _as_f64(value), None, name=name)

    def constant(self, value) -> Tensor:
        """Non-differentiable input; receives no gradient."""
        return self._record("constant", (), _as_f64(value), None)

    def leaves(self) -> dict[int, _Node]:
        return {i: n for i, n in enumerate(self.nodes) if n.kind == "leaf"}


def _check_same_tape(op, *tensors):
    tapes = {id(t.tape) for t in tensors}
    if len(tapes) > 1:
        raise AutodiffError(f"{op}: inputs come from different tapes")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` along the axes numpy broadcast it over."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operation kinds
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_tape("matmul", a, b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise AutodiffError(f"matmul: operands must be at least 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise AutodiffError(f"matmul: inner extents differ, {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return a.tape._record("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_tape("add", a, b)
    av, bv = a.data, b.data
    try:
        out = av + bv
    except ValueError:
        raise AutodiffError(f"add: shapes {av.shape} and {bv.shape} do not broadcast") from None

    def vjp(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return a.tape._record("add", (a, b), out, vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = a.data * factor

    def vjp(g):
        return (g * factor,)

    return a.tape._record("scale", (a,), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_tape("mul", a, b)
    av, bv = a.data, b.data
    if av.shape != bv.shape:
        raise AutodiffError(f"mul: shapes differ, {av.shape} vs {bv.shape}")
    out = av * bv

    def vjp(g):
        return g * bv, g * av

    return a.tape._record("mul", (a, b), out, vjp)


def relu(a: Tensor) -> Tensor:
    av = a.data
    out = np.maximum(av, 0.0)

    def vjp(g):
        # subgradient at the kink fixed to 0
        return (g * (av > 0.0),)

    return a.tape._record("relu", (a,), out, vjp)


def sigmoid(a: Tensor) -> Tensor:
    av = a.data
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return a.tape._record("sigmoid", (a,), out, vjp)


def masked_softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; masked positions get exactly zero weight.

    mask is a boolean array broadcastable to a.shape with True = allowed.
    A row with no allowed position is degenerate attention and raises.
    """
    av = a.data
    if mask is None:
        shifted = av - av.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
        if not mask.any(axis=-1).all():
            raise AutodiffError("masked_softmax: a row is fully masked")
        shifted = av - np.where(mask, av, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        # rows that are exactly zero stay zero: out==0 kills the product
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return a.tape._record("masked_softmax", (a,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    _check_same_tape("layer_norm", x, gain, bias)
    xv = x.data
    d = xv.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise AutodiffError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.data.shape}/{bias.data.shape}"
        )
    mean = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    out = gain.data * xhat + bias.data

    def vjp(g):
        lead = tuple(range(xv.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return x.tape._record("layer_norm", (x, gain, bias), out, vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise AutodiffError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    tv = table.data
    if tv.ndim != 2:
        raise AutodiffError(f"embedding: table must be 2-D, got {tv.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise AutodiffError(f"embedding: id out of range for table of {tv.shape[0]} rows")
    out = tv[ids]

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (gt,)

    return table.tape._record("embedding", (table,), out, vjp)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("concat: needs at least one input")
    _check_same_tape("concat", *tensors)
    values = [t.data for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tensors[0].tape._record("concat", tuple(tensors), out, vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    av = a.data
    index = [slice(None)] * av.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = av[index]

    def vjp(g):
        ga = np.zeros_like(av)
        ga[index] = g
        return (ga,)

    return a.tape._record("slice", (a,), out, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    av = a.data
    if axes is None:
        axes = list(range(av.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    out = np.transpose(av, axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return a.tape._record("transpose", (a,), out, vjp)


def reduce_sum(a: Tensor) -> Tensor:
    av = a.data
    out = np.asarray(av.sum())

    def vjp(g):
        return (np.broadcast_to(g, av.shape).copy(),)

    return a.tape._record("sum", (a,), out, vjp)


def cross_entropy(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    logits has shape (..., V); targets and the optional boolean validity
    mask share the leading shape. Invalid positions contribute nothing.
    """
    lv = logits.data
    targets = np.asarray(targets)
    if targets.shape != lv.shape[:-1]:
        raise AutodiffError(
            f"cross_entropy: targets shape {targets.shape} does not match logits {lv.shape}"
        )
    if valid is None:
        valid = np.ones(targets.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != targets.shape:
            raise AutodiffError("cross_entropy: validity mask shape mismatch")
    count = int(valid.sum())
    if count == 0:
        raise AutodiffError("cross_entropy: no valid positions")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) + lv.max(axis=-1)
    picked = np.take_along_axis(lv, targets[..., None], axis=-1)[..., 0]
    losses = np.where(valid, logz - picked, 0.0)
    out = np.asarray(losses.sum() / count)

    def vjp(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(lv)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        gl = (soft - onehot) * valid[..., None] * (float(g) / count)
        return (gl,)

    return logits.tape._record("cross_entropy", (logits,), out, vjp)


def l1_loss(pred: Tensor, target, valid=None) -> Tensor:
    """Mean absolute difference over valid positions (mask broadcasts over
    trailing axes). target may be a Tensor or a plain array."""
    target_tensor = target if isinstance(target, Tensor) else None
    tv = target_tensor.data if target_tensor is not None else _as_f64(target)
    pv = pred.data
    if pv.shape != tv.shape:
        raise AutodiffError(f"l1_loss: shapes differ, {pv.shape} vs {tv.shape}")
    if valid is None:
        valid_full = np.ones(pv.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        valid_full = np.broadcast_to(valid.reshape(valid.shape + (1,) * (pv.ndim - valid.ndim)), pv.shape)
    count = int(valid_full.sum())
    if count == 0:
        raise AutodiffError("l1_loss: no valid positions")
    diff = pv - tv
    out = np.asarray(np.abs(np.where(valid_full, diff, 0.0)).sum() / count)

    def vjp(g):
        gp = np.sign(diff) * valid_full * (float(g) / count)
        if target_tensor is not None:
            return gp, -gp
        return (gp,)

    inputs = (pred,) if target_tensor is None else (pred, target_tensor)
    return pred.tape._record("l1", inputs, out, vjp)


OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "masked_softmax": masked_softmax,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "concat": concat,
    "slice": slice_axis,
    "transpose": transpose,
    "sum": reduce_sum,
    "cross_entropy": cross_entropy,
    "l1": l1_loss,
}


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Uniform dispatch into the closed operation set."""
    if kind not in OP_TABLE:
        raise AutodiffError(f"unknown operation kind {kind!r}")
    if kind == "concat":
        return concat(inputs, **(attrs or {}))
    return OP_TABLE[kind](*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss with respect to every leaf on its tape.

    Leaves that do not reach the loss get exact zero gradients.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.vjp is None:
            if node.kind == "leaf":
                grads[node_id] = g  # keep: re-inserting terminal gradient
            continue
        for input_id, ig in zip(node.input_ids, node.vjp(g)):
            if input_id in grads:
                grads[input_id] = grads[input_id] + ig
            else:
                grads[input_id] = ig
    out = {}
    for node_id, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            out[node_id] = grads.get(node_id, np.zeros_like(node.value))
    return out


def grads_by_name(loss: Tensor) -> dict[str, np.ndarray]:
    """backward() keyed by leaf name; same-named leaves accumulate."""
    grads = backward(loss)
    named: dict[str, np.ndarray] = {}
    for node_id, node in enumerate(loss.tape.nodes):
        if node.kind == "leaf" and node.name is not None:
            if node.name in named:
                named[node.name] = named[node.name] + grads[node_id]
            else:
                named[node.name] = grads[node_id]
    return named


def grad_check(fn, params: dict, eps: float = 1e-5, samples_per_param: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    fn maps a dict of named float64 arrays to a scalar Tensor, registering
    each array as a same-named leaf on a fresh tape. The relative error for
    a coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    loss = fn(params)
    if not np.isfinite(loss.data).all():
        raise AutodiffError("grad_check: non-finite loss")
    analytic = grads_by_name(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        for c in coords:
            perturbed = dict(params)
            bumped = value.copy().reshape(-1)
            bumped[c] += eps
            perturbed[name] = bumped.reshape(value.shape)
            up = float(fn(perturbed).data)
            bumped[c] -= 2 * eps
            perturbed[name] = bumped.reshape(value.shape)
            down = float(fn(perturbed).data)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise AutodiffError(f"grad_check: non-finite evaluation at {name}[{c}]")
            numeric = (up - down) / (2 * eps)
            a = float(analytic[name].reshape(-1)[c]) if name in analytic else 0.0
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
