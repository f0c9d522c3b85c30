import numpy as np
import pytest

from mitr import autodiff as ad
from mitr.autodiff import Tape
from mitr.checkpoint import (
    CheckpointError,
    load_checkpoint,
    params_checksum,
    save_checkpoint,
)
from mitr.config import ModelConfig, TaskMode
from mitr.masks import build_masks, causal
from mitr.network import (
    ModelError,
    forward_batch,
    image_encode,
    init_params,
    mitr_forward,
    param_shapes,
    shift_caption,
    shift_trace,
)

TINY = ModelConfig(vocab_size=9, d_visual=5, d_model=8, n_heads=2, d_ffn=12,
                   n_layers=1, max_len=8)


@pytest.fixture(scope="module")
def tiny_params():
    return init_params(TINY, seed=0)


def _example(rng, n=4, regions=3):
    feats = rng.normal(size=(regions, TINY.d_visual))
    ids = rng.integers(4, TINY.vocab_size, size=n)
    boxes = rng.uniform(0.1, 0.9, size=(n, 5))
    return feats, ids, boxes


class TestMasks:
    def test_causal_is_lower_triangular_inclusive(self):
        m = causal(3)
        assert np.array_equal(m, np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool))

    def test_controlled_caption(self):
        ms = build_masks(TaskMode.CONTROLLED_CAPTION, 3, 3)
        assert np.array_equal(ms.caption_self, causal(3))
        assert ms.trace_self is None and ms.caption_fusion is None and ms.trace_fusion is None
        assert ms.shift_caption and not ms.shift_trace

    def test_joint_masks_everything(self):
        ms = build_masks(TaskMode.JOINT, 2, 2)
        for m in (ms.caption_self, ms.trace_self, ms.caption_fusion, ms.trace_fusion):
            assert np.array_equal(m, causal(2))
        assert ms.shift_caption and ms.shift_trace

    def test_controlled_trace_mirrors_controlled_caption(self):
        cap = build_masks(TaskMode.CONTROLLED_CAPTION, 4, 4)
        trc = build_masks(TaskMode.CONTROLLED_TRACE, 4, 4)
        assert np.array_equal(trc.trace_self, cap.caption_self)
        assert trc.caption_self is None
        assert (trc.shift_trace, trc.shift_caption) == (cap.shift_caption, cap.shift_trace)

    def test_rejects_empty_lengths(self):
        with pytest.raises(ValueError):
            build_masks(TaskMode.JOINT, 0, 1)


class TestShift:
    def test_caption_shift(self):
        assert np.array_equal(shift_caption(np.array([5, 6, 7]), bos_id=1), [1, 5, 6])

    def test_trace_shift_inserts_whole_image_box(self):
        boxes = np.arange(10.0).reshape(2, 5)
        shifted = shift_trace(boxes)
        assert np.array_equal(shifted[0], [0, 0, 1, 1, 1])
        assert np.array_equal(shifted[1], boxes[0])


class TestForward:
    def test_output_shapes(self, tiny_params):
        rng = np.random.default_rng(0)
        feats, ids, boxes = _example(rng)
        for task in TaskMode:
            logits, pred = mitr_forward(task, feats, ids, boxes, tiny_params, TINY)
            assert logits.shape == (4, TINY.vocab_size)
            assert pred.shape == (4, 5)

    def test_boxes_bounded_by_sigmoid(self, tiny_params):
        rng = np.random.default_rng(1)
        feats, ids, boxes = _example(rng)
        _, pred = mitr_forward(TaskMode.JOINT, feats, ids, boxes, tiny_params, TINY)
        assert (pred > 0).all() and (pred < 1).all()

    def test_joint_rejects_misaligned_lengths(self, tiny_params):
        rng = np.random.default_rng(2)
        feats, ids, boxes = _example(rng)
        with pytest.raises(ModelError):
            mitr_forward(TaskMode.JOINT, feats, ids, boxes[:-1], tiny_params, TINY)

    def test_max_len_enforced(self, tiny_params):
        rng = np.random.default_rng(3)
        feats, ids, boxes = _example(rng, n=TINY.max_len + 1)
        with pytest.raises(ModelError):
            mitr_forward(TaskMode.JOINT, feats, ids, boxes, tiny_params, TINY)

    def test_same_params_serve_all_tasks_without_mutation(self, tiny_params):
        rng = np.random.default_rng(4)
        feats, ids, boxes = _example(rng)
        before = params_checksum(tiny_params)
        for task in TaskMode:
            mitr_forward(task, feats, ids, boxes, tiny_params, TINY)
        assert params_checksum(tiny_params) == before


class TestCausality:
    N = 6

    def _outputs(self, task, tiny_params, feats, ids, boxes):
        return mitr_forward(task, feats, ids, boxes, tiny_params, TINY)

    def test_joint_no_leakage_either_stream(self, tiny_params):
        rng = np.random.default_rng(5)
        feats, ids, boxes = _example(rng, n=self.N)
        base_logits, base_boxes = self._outputs(TaskMode.JOINT, tiny_params, feats, ids, boxes)
        for t in range(1, self.N):
            ids2 = ids.copy()
            ids2[t] = (ids2[t] - 4 + 1) % (TINY.vocab_size - 4) + 4
            boxes2 = boxes.copy()
            boxes2[t] += 0.03
            logits, pred = self._outputs(TaskMode.JOINT, tiny_params, feats, ids2, boxes2)
            assert np.abs(logits[:t] - base_logits[:t]).max() <= 1e-12
            assert np.abs(pred[:t] - base_boxes[:t]).max() <= 1e-12

    def test_controlled_caption_is_caption_causal(self, tiny_params):
        rng = np.random.default_rng(6)
        feats, ids, boxes = _example(rng, n=self.N)
        base_logits, _ = self._outputs(TaskMode.CONTROLLED_CAPTION, tiny_params, feats, ids, boxes)
        for t in range(1, self.N):
            ids2 = ids.copy()
            ids2[t] = (ids2[t] - 4 + 1) % (TINY.vocab_size - 4) + 4
            logits, _ = self._outputs(TaskMode.CONTROLLED_CAPTION, tiny_params, feats, ids2, boxes)
            assert np.abs(logits[:t] - base_logits[:t]).max() <= 1e-12

    def test_controlled_caption_sees_whole_trace(self, tiny_params):
        rng = np.random.default_rng(7)
        feats, ids, boxes = _example(rng, n=self.N)
        base_logits, _ = self._outputs(TaskMode.CONTROLLED_CAPTION, tiny_params, feats, ids, boxes)
        boxes2 = boxes.copy()
        boxes2[-1] += 0.1  # perturb the last box
        logits, _ = self._outputs(TaskMode.CONTROLLED_CAPTION, tiny_params, feats, ids, boxes2)
        assert np.abs(logits[0] - base_logits[0]).max() > 0  # first word already affected

    def test_controlled_trace_is_trace_causal(self, tiny_params):
        rng = np.random.default_rng(8)
        feats, ids, boxes = _example(rng, n=self.N)
        _, base_pred = self._outputs(TaskMode.CONTROLLED_TRACE, tiny_params, feats, ids, boxes)
        for t in range(1, self.N):
            boxes2 = boxes.copy()
            boxes2[t:] += 0.05
            _, pred = self._outputs(TaskMode.CONTROLLED_TRACE, tiny_params, feats, ids, boxes2)
            assert np.abs(pred[:t] - base_pred[:t]).max() <= 1e-12


class TestImageEncode:
    def test_shape_contract(self, tiny_params):
        rng = np.random.default_rng(9)
        h = image_encode(rng.normal(size=(1, TINY.d_visual)), tiny_params, TINY)
        assert h.shape == (1, TINY.d_model)

    def test_zero_regions_rejected(self, tiny_params):
        with pytest.raises(ModelError):
            image_encode(np.zeros((0, TINY.d_visual)), tiny_params, TINY)

    def test_region_permutation_equivariance(self, tiny_params):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, TINY.d_visual))
        perm = rng.permutation(5)
        h = image_encode(x, tiny_params, TINY)
        h_perm = image_encode(x[perm], tiny_params, TINY)
        # equal up to floating-point summation order inside attention rows
        assert np.abs(h_perm - h[perm]).max() <= 1e-12


class TestGradients:
    def test_full_model_gradient_check(self, tiny_params):
        rng = np.random.default_rng(11)
        feats, ids, boxes = _example(rng, n=3, regions=2)
        masks = build_masks(TaskMode.JOINT, 3, 3)
        cap_in = shift_caption(ids, bos_id=1)
        trace_in = shift_trace(boxes)

        def fn(params):
            tape = Tape()
            logits, pred = forward_batch(tape, params, TINY, feats[None], cap_in[None],
                                         trace_in[None], masks)
            ce = ad.cross_entropy(logits, ids[None])
            l1 = ad.l1_loss(pred, boxes[None])
            return ad.add(ce, l1)

        err = ad.grad_check(fn, tiny_params, eps=1e-5, samples_per_param=2, seed=3)
        assert err <= 1e-4

    def test_image_encoder_gradient_check(self, tiny_params):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(1, 2, TINY.d_visual))
        proj = rng.normal(size=(1, 2, TINY.d_model))
        from mitr.network import _attn_block, _ffn_block, _Leaves, _linear

        def fn(params):
            tape = Tape()
            L = _Leaves(tape, params)
            xv = _linear(L, "visual_in", tape.constant(feats))
            xv = _attn_block(L, TINY, "enc0.attn", xv, xv, None)
            xv = _ffn_block(L, "enc0", xv)
            return ad.reduce_sum(ad.mul(xv, tape.constant(proj)))

        subset = {k: v for k, v in tiny_params.items()
                  if k.startswith(("visual_in", "enc0"))}
        err = ad.grad_check(fn, subset, eps=1e-5, samples_per_param=4, seed=4)
        assert err <= 1e-4


class TestCheckpoint:
    def test_round_trip_byte_exact(self, tmp_path, tiny_params):
        p1 = tmp_path / "model.ckpt"
        p2 = tmp_path / "model2.ckpt"
        save_checkpoint(p1, TINY, tiny_params)
        config, params = load_checkpoint(p1)
        assert config == TINY
        assert list(params) == list(tiny_params)
        for k in params:
            assert np.array_equal(params[k], tiny_params[k])
        save_checkpoint(p2, config, params)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checksum_tracks_content(self, tiny_params):
        a = params_checksum(tiny_params)
        mutated = {k: v.copy() for k, v in tiny_params.items()}
        mutated["head.box.b"][0] += 1e-9
        assert params_checksum(mutated) != a
        assert params_checksum(tiny_params) == a

    def test_bad_magic_and_truncation(self, tmp_path, tiny_params):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, TINY, tiny_params)
        blob = path.read_bytes()
        path.write_bytes(b"XXXXXX" + blob[6:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
        path.write_bytes(blob[:-9])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


def test_param_inventory_is_mirrored():
    shapes = param_shapes(TINY)
    cap = {k.replace("cap0", "X") for k in shapes if k.startswith("cap0")}
    trace = {k.replace("trace0", "X") for k in shapes if k.startswith("trace0")}
    assert cap == trace
