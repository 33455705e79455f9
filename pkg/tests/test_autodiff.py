"""Tensor engine: hand-checked values, gradient rules, tape semantics."""

import numpy as np
import pytest

from personcap import autodiff as ad
from personcap.autodiff import Tape, Tensor, backward
from personcap.errors import ContractError, DomainError, ShapeError
from personcap.gradcheck import fd_check


def grad_of(fn, arrays):
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    with Tape():
        loss = fn(**tensors)
    backward(loss)
    return {k: t.grad for k, t in tensors.items()}, loss.item()


class TestHandValues:
    def test_identity_matmul(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_matmul_2x2_by_2x1(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_sigmoid_at_zero(self):
        grads, val = grad_of(lambda x: ad.sum_all(ad.sigmoid(x)), {"x": np.zeros(1)})
        assert val == 0.5
        np.testing.assert_allclose(grads["x"], [0.25], rtol=0, atol=0)

    def test_softmax_of_logs(self):
        out = ad.softmax(Tensor(np.log([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_sum_of_squares_gradient(self):
        grads, val = grad_of(lambda x: ad.sum_all(ad.mul(x, x)),
                             {"x": np.array([1.0, 2.0, 3.0])})
        assert val == 14.0
        np.testing.assert_array_equal(grads["x"], [2.0, 4.0, 6.0])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(Tensor(rng.standard_normal((4, 7)) * 50), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5))
        a = ad.log_softmax(Tensor(x)).data
        b = np.log(ad.softmax(Tensor(x)).data)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_layer_norm_output_stats(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((6, 16)) * 3 + 5
        out = ad.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(6), atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), np.ones(6), atol=1e-3)


class TestLinearSample:
    def test_midpoint_interpolation(self):
        values = Tensor([[0.0], [10.0]])
        out = ad.linear_sample(values, Tensor([0.5]))
        np.testing.assert_allclose(out.data, [[5.0]])

    def test_endpoints(self):
        values = Tensor([[1.0], [2.0], [3.0], [4.0]])
        out = ad.linear_sample(values, Tensor([0.0, 1.0]))
        np.testing.assert_allclose(out.data, [[1.0], [4.0]])

    def test_outside_window_is_zero(self):
        for t in (2, 4, 6):
            values = Tensor(np.arange(1.0, t + 1.0).reshape(t, 1))
            out = ad.linear_sample(values, Tensor([-0.2, 1.3]))
            np.testing.assert_array_equal(out.data, [[0.0], [0.0]])

    def test_outside_window_zero_position_gradient(self):
        values = np.arange(8.0).reshape(4, 2)

        def fn(values, pos):
            return ad.sum_all(ad.linear_sample(values, pos))

        grads, _ = grad_of(fn, {"values": values, "pos": np.array([-0.3, 1.4])})
        np.testing.assert_array_equal(grads["pos"], [0.0, 0.0])
        np.testing.assert_array_equal(grads["values"], np.zeros((4, 2)))

    def test_interior_value_gradient_scatter(self):
        values = np.zeros((3, 1))

        def fn(values, pos):
            return ad.sum_all(ad.linear_sample(values, pos))

        grads, _ = grad_of(fn, {"values": values, "pos": np.array([0.25])})
        # u = 0.5: half a unit of weight on row 0 and on row 1
        np.testing.assert_allclose(grads["values"], [[0.5], [0.5], [0.0]])

    def test_per_head_matches_per_level_loop(self):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((6, 2, 3))
        pos = rng.uniform(0.1, 0.9, size=(4, 2, 5))
        fused = ad.linear_sample_per_head(Tensor(values), Tensor(pos)).data
        for h in range(2):
            single = ad.linear_sample(Tensor(values[:, h, :]), Tensor(pos[:, h, :])).data
            np.testing.assert_allclose(fused[:, h, :, :], single, atol=1e-14)


class TestAvgPool:
    def test_even_length(self):
        out = ad.avgpool2_rows(Tensor([[1.0], [3.0], [5.0], [9.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [7.0]])

    def test_odd_length_keeps_tail(self):
        out = ad.avgpool2_rows(Tensor([[1.0], [3.0], [10.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [10.0]])

    def test_ceil_halving_lengths(self):
        for t in range(1, 12):
            out = ad.avgpool2_rows(Tensor(np.zeros((t, 2))))
            assert out.shape[0] == (t + 1) // 2


class TestTapeSemantics:
    def test_backward_requires_scalar(self):
        with Tape():
            x = Tensor(np.ones(3), requires_grad=True)
            y = ad.mul(x, x)
        with pytest.raises(ContractError):
            backward(y)

    def test_backward_requires_tape(self):
        x = Tensor(np.ones(1), requires_grad=True)
        y = ad.sum_all(ad.mul(x, x))
        with pytest.raises(ContractError):
            backward(y)

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape():
            loss = ad.sum_all(ad.mul(x, x))
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_zero_grad_resets(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape():
            loss = ad.sum_all(x)
        backward(loss)
        x.zero_grad()
        assert x.grad is None

    def test_shared_subexpression_counted_once_per_use(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape():
            y = ad.mul(x, x)          # x^2
            loss = ad.sum_all(ad.add(y, y))   # 2 x^2
        backward(loss)
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_no_requires_grad_records_nothing(self):
        with Tape() as tape:
            a = Tensor(np.ones(4))
            b = Tensor(np.ones(4))
            ad.mul(a, b)
        assert tape.ops == []

    def test_ops_never_mutate_inputs(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        with Tape():
            loss = ad.sum_all(ad.matmul(ad.softmax(ta), ad.relu(tb)))
        backward(loss)
        np.testing.assert_array_equal(ta.data, a)
        np.testing.assert_array_equal(tb.data, b)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 8))

        def run():
            t = Tensor(x, requires_grad=True)
            with Tape():
                loss = ad.sum_all(ad.layer_norm(ad.matmul(ad.softmax(t), t),
                                                Tensor(np.ones(8)), Tensor(np.zeros(8))))
            backward(loss)
            return loss.item(), t.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestCheckedMode:
    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([0.0, 1.0]))

    def test_div_by_zero_trapped(self):
        with pytest.raises(DomainError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_overflow_trapped(self):
        with pytest.raises(DomainError):
            ad.exp(Tensor([1000.0]))

    def test_unchecked_context_allows_and_restores(self):
        with ad.unchecked():
            out = ad.exp(Tensor([1000.0]))
            assert np.isinf(out.data[0])
        assert ad.is_checked()

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gather_rows_range_check(self):
        with pytest.raises(ContractError):
            ad.gather_rows(Tensor(np.ones((3, 2))), [0, 3])


class TestFiniteDifferences:
    """Every op's gradient rule against central differences."""

    def test_elementwise_chain(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            a = rng.uniform(0.3, 1.5, size=(3, 3))

            def fn(a):
                return ad.sum_all(ad.mul(ad.log(a), ad.tanh(ad.exp(a))))

            res = fd_check(fn, {"a": a})
            assert res.max_rel_err < 1e-5

    def test_matmul_bmm_transpose(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 3))

        def fn(a, b):
            prod = ad.bmm(a, ad.transpose(ad.transpose(b)))
            flat = ad.reshape(prod, (6, 3))
            return ad.sum_all(ad.mul(ad.matmul(flat, ad.transpose(flat)), 0.5))

        res = fd_check(fn, {"a": a, "b": b})
        assert res.max_rel_err < 1e-5

    def test_softmax_family(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 6))
        c = rng.standard_normal((4, 6))

        def fn(x):
            s = ad.softmax(x, axis=-1)
            ls = ad.log_softmax(x, axis=0)
            return ad.sum_all(ad.add(ad.mul(s, ad.constant(c)), ad.mul(ls, ad.constant(c))))

        res = fd_check(fn, {"x": x})
        assert res.max_rel_err < 1e-5

    def test_layer_norm(self):
        rng = np.random.default_rng(13)
        c = rng.standard_normal((3, 8))
        res = fd_check(
            lambda a, g, b: ad.sum_all(ad.mul(ad.layer_norm(a, g, b), ad.constant(c))),
            {"a": rng.standard_normal((3, 8)),
             "g": rng.uniform(0.5, 1.5, 8),
             "b": rng.standard_normal(8)})
        assert res.max_rel_err < 1e-5

    def test_linear_sample_interior(self):
        rng = np.random.default_rng(17)
        values = rng.standard_normal((6, 3))
        pos = np.array([0.13, 0.42, 0.77])
        c = rng.standard_normal((3, 3))

        def fn(values, pos):
            return ad.sum_all(ad.mul(ad.linear_sample(values, pos), ad.constant(c)))

        res = fd_check(fn, {"values": values, "pos": pos})
        assert res.max_rel_err < 1e-4

    def test_linear_sample_per_head(self):
        rng = np.random.default_rng(18)
        values = rng.standard_normal((5, 2, 3))
        pos = rng.uniform(0.1, 0.9, size=(2, 2, 3))
        u = pos * 4.0
        pos = np.where(np.abs(u - np.round(u)) < 0.02, pos + 0.03, pos)
        c = rng.standard_normal((2, 2, 3, 3))

        def fn(values, pos):
            return ad.sum_all(ad.mul(ad.linear_sample_per_head(values, pos), ad.constant(c)))

        res = fd_check(fn, {"values": values, "pos": pos})
        assert res.max_rel_err < 1e-4

    def test_expand(self):
        rng = np.random.default_rng(21)
        a = rng.standard_normal((3, 1))
        c = rng.standard_normal((2, 3, 5))
        res = fd_check(
            lambda a: ad.sum_all(ad.mul(ad.expand(a, (2, 3, 5)), ad.constant(c))),
            {"a": a})
        assert res.max_rel_err < 1e-5
        np.testing.assert_array_equal(
            ad.expand(Tensor([[1.0], [2.0]]), (2, 3)).data,
            [[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])

    def test_gather_and_slice_ops(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal((5, 6))

        def fn(a):
            rows = ad.gather_rows(a, np.array([4, 0, 2, 2]))
            window = ad.slice_axis(rows, 1, 1, 4)
            picked = ad.take_per_row(window, np.array([0, 2, 1, 0]))
            return ad.sum_all(ad.mul(picked, picked))

        res = fd_check(fn, {"a": a})
        assert res.max_rel_err < 1e-5

    def test_pool_and_reductions(self):
        rng = np.random.default_rng(20)
        a = rng.standard_normal((7, 4))
        b = rng.standard_normal((4,))
        w = rng.standard_normal((4,))

        def fn(a, b, w):
            pooled = ad.avgpool2_rows(a)
            biased = ad.add_row(pooled, b)
            return ad.sum_all(ad.mul_last(biased, w))

        res = fd_check(fn, {"a": a, "b": b, "w": w})
        assert res.max_rel_err < 1e-5

    def test_div(self):
        a = np.array([1.0, -2.0, 3.0])
        b = np.array([0.5, 2.0, -1.5])
        res = fd_check(lambda a, b: ad.sum_all(ad.div(a, b)), {"a": a, "b": b})
        assert res.max_rel_err < 1e-5

    def test_clip_powc_max_min(self):
        a = np.array([-1.7, -0.6, 0.3, 0.9, 1.8])
        b = np.array([-1.2, -0.9, 0.6, 0.5, 2.2])

        def fn(a, b):
            c = ad.clip(a, -1.0, 1.0)
            m = ad.maximum(a, b)
            n = ad.minimum(a, b)
            return ad.sum_all(ad.add(ad.mul(c, m), ad.powc(ad.add(ad.mul(n, n), 0.5), 1.5)))

        res = fd_check(fn, {"a": a, "b": b})
        assert res.max_rel_err < 1e-5


def test_float32_mode():
    ad.set_default_dtype(np.float32)
    try:
        x = Tensor([1.0, 2.0])
        assert x.data.dtype == np.float32
        assert ad.sigmoid(x).data.dtype == np.float32
    finally:
        ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64
