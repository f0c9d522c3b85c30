import numpy as np
import pytest

from mitr import autodiff as ad
from mitr.autodiff import AutodiffError, Tape


def test_relu_values():
    tape = Tape()
    x = tape.leaf([-1.0, 0.0, 2.0])
    assert np.array_equal(ad.relu(x).data, [0.0, 0.0, 2.0])


def test_masked_softmax_masks_exactly_and_rows_sum_to_one():
    tape = Tape()
    x = tape.leaf([[1.5, 1.5, 9.0]])
    out = ad.masked_softmax(x, mask=np.array([[True, True, False]])).data
    assert out[0, 2] == 0.0
    assert abs(out[0, 0] - 0.5) < 1e-12 and abs(out[0, 1] - 0.5) < 1e-12
    assert abs(out.sum() - 1.0) < 1e-12


def test_masked_softmax_fully_masked_row_raises():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    with pytest.raises(AutodiffError):
        ad.masked_softmax(x, mask=np.array([[False, False]]))


def test_matmul_ones():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((3, 2)))
    assert np.array_equal(ad.matmul(a, b).data, np.full((2, 2), 3.0))


def test_matmul_shape_error_names_operation():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((2, 3)))
    with pytest.raises(AutodiffError, match="matmul"):
        ad.matmul(a, b)


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    grads = ad.backward(ad.reduce_sum(x))
    assert np.array_equal(grads[x.node_id], np.ones((2, 3)))


def test_backward_half_squared_norm():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    loss = ad.scale(ad.reduce_sum(ad.mul(x, x)), 0.5)
    grads = ad.backward(loss)
    assert np.array_equal(grads[x.node_id], [1.0, 2.0])


def test_relu_subgradient_zero_at_kink():
    tape = Tape()
    x = tape.leaf([0.0, -1.0, 3.0])
    grads = ad.backward(ad.reduce_sum(ad.relu(x)))
    assert np.array_equal(grads[x.node_id], [0.0, 0.0, 1.0])


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(AutodiffError):
        ad.backward(ad.relu(x))


def test_unreached_leaf_gets_exact_zero_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    unused = tape.leaf(np.ones((3, 3)))
    grads = ad.backward(ad.reduce_sum(x))
    assert np.array_equal(grads[unused.node_id], np.zeros((3, 3)))
    assert grads[unused.node_id].dtype == np.float64


def test_constant_receives_no_gradient_entry():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    c = tape.constant([3.0, 4.0])
    grads = ad.backward(ad.reduce_sum(ad.add(x, c)))
    assert c.node_id not in grads


def test_cross_entropy_uniform_logits():
    tape = Tape()
    vocab = 7
    logits = tape.leaf(np.zeros((3, vocab)))
    loss = ad.cross_entropy(logits, np.array([0, 3, 6]))
    assert abs(loss.item() - np.log(vocab)) < 1e-12


def test_cross_entropy_respects_validity_mask():
    tape = Tape()
    logits = tape.leaf([[5.0, 0.0], [0.0, 5.0]])
    full = ad.cross_entropy(logits, np.array([0, 0]))
    masked = ad.cross_entropy(tape.leaf([[5.0, 0.0], [0.0, 5.0]]), np.array([0, 0]),
                              valid=np.array([True, False]))
    assert masked.item() < full.item()
    grads = ad.backward(masked)
    g = list(grads.values())[-1]
    assert np.array_equal(g[1], [0.0, 0.0])


def test_l1_loss_value_and_sign_convention():
    tape = Tape()
    pred = tape.leaf([1.0, 2.0, 3.0])
    loss = ad.l1_loss(pred, np.array([1.0, 0.0, 5.0]))
    assert abs(loss.item() - (0.0 + 2.0 + 2.0) / 3) < 1e-12
    grads = ad.backward(loss)
    # sign(0) fixed to 0 at the kink
    assert np.allclose(grads[pred.node_id], [0.0, 1 / 3, -1 / 3])


def test_embedding_scatter_accumulates_repeated_ids():
    tape = Tape()
    table = tape.leaf(np.arange(8.0).reshape(4, 2))
    out = ad.embedding(table, np.array([1, 1, 3]))
    grads = ad.backward(ad.reduce_sum(out))
    expect = np.zeros((4, 2))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.array_equal(grads[table.node_id], expect)


def test_forward_op_dispatch_and_unknown_kind():
    tape = Tape()
    x = tape.leaf([-1.0, 4.0])
    assert np.array_equal(ad.forward_op("relu", [x]).data, [0.0, 4.0])
    with pytest.raises(AutodiffError):
        ad.forward_op("fft", [x])


def test_tape_replay_is_deterministic():
    def build():
        tape = Tape()
        rng = np.random.default_rng(7)
        x = tape.leaf(rng.normal(size=(4, 4)))
        w = tape.leaf(rng.normal(size=(4, 4)))
        y = ad.masked_softmax(ad.matmul(ad.relu(x), w))
        return y.data.copy()

    assert np.array_equal(build(), build())


def _quadratic(params):
    tape = Tape()
    x = tape.leaf(params["x"], name="x")
    return ad.scale(ad.reduce_sum(ad.mul(x, x)), 0.5)


def test_grad_check_quadratic_is_exact():
    err = ad.grad_check(_quadratic, {"x": np.array([0.3, -1.2, 2.0])}, eps=1e-5)
    assert err <= 1e-9


def test_grad_check_constant_function():
    def fn(params):
        tape = Tape()
        tape.leaf(params["x"], name="x")
        return tape.leaf(np.asarray(1.5))

    err = ad.grad_check(fn, {"x": np.array([1.0, 2.0])})
    assert err == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.grad_check(_quadratic, {"x": np.array([1.0])}, eps=1e-2)


# Finite-difference verification for every differentiable operation kind.
# Points are sampled away from relu/l1 kinks (|x| > 1e-3).


def _rand(rng, *shape):
    vals = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return vals


@pytest.mark.parametrize("op", sorted(set(ad.OP_TABLE) - {"embedding", "cross_entropy"}))
def test_gradients_match_finite_differences(op):
    rng = np.random.default_rng(hash(op) % (2**32))

    def fn(params):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
        if op == "matmul":
            out = ad.matmul(leaves["a"], leaves["b"])
        elif op == "add":
            out = ad.add(leaves["a"], leaves["b"])
        elif op == "scale":
            out = ad.scale(leaves["a"], -1.7)
        elif op == "mul":
            out = ad.mul(leaves["a"], leaves["b"])
        elif op == "relu":
            out = ad.relu(leaves["a"])
        elif op == "sigmoid":
            out = ad.sigmoid(leaves["a"])
        elif op == "masked_softmax":
            mask = np.array([[True, True, False, True]] * 3)
            out = ad.masked_softmax(leaves["a"], mask=mask)
        elif op == "layer_norm":
            out = ad.layer_norm(leaves["a"], leaves["g"], leaves["b2"])
        elif op == "concat":
            out = ad.concat([leaves["a"], leaves["b"]], axis=-1)
        elif op == "slice":
            out = ad.slice_axis(leaves["a"], axis=1, start=1, stop=3)
        elif op == "transpose":
            out = ad.transpose(leaves["a"])
        elif op == "sum":
            out = ad.reduce_sum(leaves["a"])
        elif op == "l1":
            out = ad.l1_loss(leaves["a"], leaves["b"])
            return out
        else:
            raise AssertionError(op)
        # reduce with a fixed random projection so every output coordinate matters
        w = tape.constant(proj)
        return ad.reduce_sum(ad.mul(out, w))

    if op == "matmul":
        params = {"a": _rand(rng, 3, 4), "b": _rand(rng, 4, 2)}
        proj = _rand(rng, 3, 2)
    elif op in ("add", "mul", "l1"):
        params = {"a": _rand(rng, 3, 4), "b": _rand(rng, 3, 4) + 2.0}
        proj = _rand(rng, 3, 4)
    elif op == "layer_norm":
        params = {"a": _rand(rng, 3, 4), "g": _rand(rng, 4), "b2": _rand(rng, 4)}
        proj = _rand(rng, 3, 4)
    elif op == "concat":
        params = {"a": _rand(rng, 3, 4), "b": _rand(rng, 3, 2)}
        proj = _rand(rng, 3, 6)
    elif op == "slice":
        params = {"a": _rand(rng, 3, 4)}
        proj = _rand(rng, 3, 2)
    elif op == "transpose":
        params = {"a": _rand(rng, 3, 4)}
        proj = _rand(rng, 4, 3)
    elif op == "sum":
        params = {"a": _rand(rng, 3, 4)}
        proj = np.asarray(1.0)
    else:
        params = {"a": _rand(rng, 3, 4)}
        proj = _rand(rng, 3, 4)

    err = ad.grad_check(fn, params, eps=1e-5)
    assert err <= 1e-6, f"{op}: relative error {err}"


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    targets = np.array([0, 2, 1])
    valid = np.array([True, True, False])

    def fn(params):
        tape = Tape()
        logits = tape.leaf(params["logits"], name="logits")
        return ad.cross_entropy(logits, targets, valid=valid)

    err = ad.grad_check(fn, {"logits": rng.normal(size=(3, 4))}, eps=1e-5)
    assert err <= 1e-6


def test_embedding_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    ids = np.array([[0, 2], [2, 1]])

    def fn(params):
        tape = Tape()
        table = tape.leaf(params["table"], name="table")
        out = ad.embedding(table, ids)
        w = tape.constant(rng2)
        return ad.reduce_sum(ad.mul(out, w))

    rng2 = rng.normal(size=(2, 2, 3))
    err = ad.grad_check(fn, {"table": rng.normal(size=(4, 3))}, eps=1e-5)
    assert err <= 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(13)
    proj = rng.normal(size=(2, 3, 2))

    def fn(params):
        tape = Tape()
        a = tape.leaf(params["a"], name="a")
        b = tape.leaf(params["b"], name="b")
        out = ad.matmul(a, b)  # (2,3,4) @ (4,2) broadcasts over the batch
        return ad.reduce_sum(ad.mul(out, tape.constant(proj)))

    err = ad.grad_check(fn, {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 2))})
    assert err <= 1e-6
