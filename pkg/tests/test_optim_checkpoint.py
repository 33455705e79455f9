"""Adam against a hand state recursion; checkpoint round-trips and rejects."""

import numpy as np
import pytest

from personcap.checkpoint import load_checkpoint, save_checkpoint
from personcap.errors import ContractError, DomainError, FormatError
from personcap.optim import adam_init, adam_step


def reference_adam(p0, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-at-a-time transcription of the published update equations."""
    p = p0.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


class TestAdam:
    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(0)
        p0 = rng.standard_normal((3, 4))
        grads_seq = [rng.standard_normal((3, 4)) for _ in range(25)]
        params = {"w": p0.copy()}
        state = adam_init(params)
        for g in grads_seq:
            params, state = adam_step(params, {"w": g}, state, lr=1e-2)
        expected = reference_adam(p0, grads_seq, lr=1e-2)
        np.testing.assert_allclose(params["w"], expected, atol=1e-14)
        assert state.t == 25

    def test_first_step_is_lr_sized(self):
        # bias correction makes step one move by ~lr in the gradient direction
        params = {"w": np.zeros(1)}
        state = adam_init(params)
        params, _ = adam_step(params, {"w": np.array([0.5])}, state, lr=1e-3)
        np.testing.assert_allclose(params["w"], [-1e-3], rtol=1e-6)

    def test_missing_grad_leaves_param(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        state = adam_init(params)
        out, state = adam_step(params, {"a": np.ones(2)}, state, lr=0.1)
        np.testing.assert_array_equal(out["b"], [1.0, 1.0])
        assert not np.allclose(out["a"], [1.0, 1.0])

    def test_step_does_not_mutate_inputs(self):
        params = {"w": np.ones(3)}
        state = adam_init(params)
        adam_step(params, {"w": np.ones(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], np.ones(3))
        np.testing.assert_array_equal(state.m["w"], np.zeros(3))
        assert state.t == 0

    def test_zero_gradient_leaves_params_but_counts_step(self):
        params = {"w": np.array([2.0, -1.0])}
        state = adam_init(params)
        out, state = adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(out["w"], [2.0, -1.0])
        assert state.t == 1

    def test_non_finite_gradient_trapped(self):
        params = {"w": np.ones(2)}
        state = adam_init(params)
        with pytest.raises(DomainError):
            adam_step(params, {"w": np.array([1.0, np.nan])}, state, lr=0.1)

    def test_mismatched_names_rejected(self):
        params = {"w": np.ones(3)}
        state = adam_init({"x": np.ones(3)})
        with pytest.raises(ContractError):
            adam_step(params, {"w": np.ones(3)}, state, lr=0.1)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        p0 = rng.standard_normal(8)
        g = rng.standard_normal(8)

        def run():
            params = {"w": p0.copy()}
            state = adam_init(params)
            for _ in range(10):
                params, state = adam_step(params, {"w": g}, state, lr=1e-2)
            return params["w"]

        np.testing.assert_array_equal(run(), run())


class TestCheckpoint:
    def test_round_trip_preserves_values_and_order(self, tmp_path):
        rng = np.random.default_rng(2)
        tensors = {
            "encoder.w": rng.standard_normal((4, 3)),
            "encoder.b": rng.standard_normal(3),
            "head.w": rng.standard_normal((2, 2, 2)),
            "scalar": np.array(3.25),
        }
        path = tmp_path / "model.hcpt"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert list(loaded) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(loaded[k], tensors[k])
            assert loaded[k].dtype == np.float64

    def test_byte_identical_across_saves(self, tmp_path):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4)}
        p1, p2 = tmp_path / "one.hcpt", tmp_path / "two.hcpt"
        save_checkpoint(p1, tensors)
        save_checkpoint(p2, tensors)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"w": np.zeros((2, 5))})
        blob = path.read_bytes()
        assert blob[:4] == b"HCPT"
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:10], "little") == 1
        # name record: len=1, "w", ndim=2, dims 2 and 5
        assert int.from_bytes(blob[10:12], "little") == 1
        assert blob[12:13] == b"w"
        assert int.from_bytes(blob[13:15], "little") == 2
        assert int.from_bytes(blob[15:19], "little") == 2
        assert int.from_bytes(blob[19:23], "little") == 5
        assert len(blob) == 23 + 8 * 10

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"w": np.zeros(4)})
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"w": np.zeros(4)})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"w": np.zeros(2)})
        blob = bytearray(path.read_bytes())
        blob[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)

    def test_zero_dim_tensor(self, tmp_path):
        path = tmp_path / "m.hcpt"
        save_checkpoint(path, {"s": np.array(7.5)})
        loaded = load_checkpoint(path)
        assert loaded["s"].shape == ()
        assert float(loaded["s"]) == 7.5
