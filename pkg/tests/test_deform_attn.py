"""Deformable attention kernels: identity cases, invariances, FD gradients."""

import numpy as np
import pytest

from personcap import autodiff as ad
from personcap.autodiff import Tape, Tensor, backward
from personcap.deform_attn import (
    DSAParams,
    FeaturePyramid,
    MSDAttParams,
    build_pyramid,
    dsa,
    msdatt,
    sample_linear,
)
from personcap.errors import ContractError
from personcap.gradcheck import fd_check


def msdatt_params_from(rng, d, heads, levels, points, offset_scale=0.01):
    flat = heads * levels * points

    def t(shape, scale=0.3):
        return Tensor(rng.standard_normal(shape) * scale)

    return MSDAttParams(
        heads=heads, points=points,
        w_offset=t((d, flat), offset_scale), b_offset=t((flat,), offset_scale),
        w_attn=t((d, flat)), b_attn=t((flat,)),
        w_value=t((d, d)), b_value=t((d,)),
        w_out=t((d, d)), b_out=t((d,)))


def dsa_params_from(rng, d, levels, points, dk=6, offset_scale=0.01):
    lk = levels * points

    def t(shape, scale=0.3):
        return Tensor(rng.standard_normal(shape) * scale)

    return DSAParams(
        points=points,
        w_offset=t((2 * d, lk), offset_scale), b_offset=t((lk,), offset_scale),
        w_value=t((d, d)), b_value=t((d,)),
        w_key=t((d, dk)), b_key=t((dk,)),
        w_query=t((2 * d, dk)), b_query=t((dk,)))


class TestSampleLinear:
    def test_on_grid(self):
        level = Tensor([[2.0], [4.0], [6.0]])
        assert sample_linear(level, np.array([0.5])).data[0, 0] == 4.0

    def test_between_grid(self):
        level = Tensor([[2.0], [4.0], [6.0]])
        assert sample_linear(level, np.array([0.25])).data[0, 0] == 3.0

    def test_zero_padding(self):
        level = Tensor([[2.0], [4.0], [6.0]])
        assert sample_linear(level, np.array([-0.2])).data[0, 0] == 0.0


class TestFeaturePyramid:
    def test_build_lengths(self):
        base = Tensor(np.arange(14.0).reshape(7, 2))
        pyr = build_pyramid(base, 3)
        assert pyr.lengths == [7, 4, 2]
        assert pyr.width == 2

    def test_build_values_average_pairs(self):
        base = Tensor(np.array([[1.0], [3.0], [5.0], [9.0]]))
        pyr = build_pyramid(base, 2)
        np.testing.assert_array_equal(pyr.levels[1].data, [[2.0], [7.0]])

    def test_rejects_mismatched_width(self):
        with pytest.raises(ContractError):
            FeaturePyramid([Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 2)))])

    def test_rejects_wrong_halving(self):
        with pytest.raises(ContractError):
            FeaturePyramid([Tensor(np.zeros((8, 2))), Tensor(np.zeros((3, 2)))])

    def test_single_level_ok(self):
        FeaturePyramid([Tensor(np.zeros((5, 4)))])


class TestMSDAtt:
    def test_identity_configuration_reads_reference_point(self):
        # one head, one level, one point, zero offsets, identity projections
        level = Tensor([[2.0], [4.0], [6.0]])
        params = MSDAttParams(
            heads=1, points=1,
            w_offset=Tensor(np.zeros((1, 1))), b_offset=Tensor(np.zeros(1)),
            w_attn=Tensor(np.zeros((1, 1))), b_attn=Tensor(np.zeros(1)),
            w_value=Tensor(np.eye(1)), b_value=Tensor(np.zeros(1)),
            w_out=Tensor(np.eye(1)), b_out=Tensor(np.zeros(1)))
        queries = Tensor(np.array([[0.7], [-1.2]]))
        refs = Tensor(np.array([0.25, 0.5]))
        out = msdatt(queries, refs, FeaturePyramid([level]), params)
        np.testing.assert_allclose(out.data, [[3.0], [4.0]], atol=1e-14)

    def test_constant_map_ignores_offsets(self):
        rng = np.random.default_rng(0)
        d, heads, levels, points = 6, 2, 3, 2
        c = rng.standard_normal(d)
        pyr = FeaturePyramid([Tensor(np.tile(c, (t, 1))) for t in (8, 4, 2)])
        params = msdatt_params_from(rng, d, heads, levels, points)
        queries = Tensor(rng.standard_normal((3, d)))
        refs = Tensor(np.full(3, 0.5))
        out = msdatt(queries, refs, pyr, params)
        expected = (c @ params.w_value.data + params.b_value.data) \
            @ params.w_out.data + params.b_out.data
        np.testing.assert_allclose(out.data, np.tile(expected, (3, 1)), atol=1e-12)

    def test_weights_sum_to_one_per_query_head(self):
        rng = np.random.default_rng(1)
        d = 8
        pyr = FeaturePyramid([Tensor(rng.standard_normal((t, d)))
                              for t in (9, 5, 3)])
        params = msdatt_params_from(rng, d, 4, 3, 3)
        queries = Tensor(rng.standard_normal((5, d)))
        refs = Tensor(rng.uniform(0.2, 0.8, 5))
        _, weights = msdatt(queries, refs, pyr, params, return_weights=True)
        sums = weights.data.sum(axis=(2, 3))
        np.testing.assert_allclose(sums, np.ones((5, 4)), atol=1e-12)
        assert np.all(weights.data > 0)

    def test_out_of_range_reference_finite(self):
        rng = np.random.default_rng(2)
        d = 4
        pyr = FeaturePyramid([Tensor(rng.standard_normal((6, d)))])
        params = msdatt_params_from(rng, d, 2, 1, 2)
        queries = Tensor(rng.standard_normal((2, d)), requires_grad=True)
        refs = Tensor(np.array([1.5, -0.4]), requires_grad=True)
        with Tape():
            out = msdatt(queries, refs, pyr, params)
            loss = ad.sum_all(out)
        backward(loss)
        assert np.all(np.isfinite(out.data))
        # every sample lands outside, so only the output bias survives
        np.testing.assert_allclose(out.data, np.tile(params.b_out.data, (2, 1)),
                                   atol=1e-12)
        assert np.all(np.isfinite(queries.grad))
        np.testing.assert_array_equal(refs.grad, [0.0, 0.0])

    def test_indivisible_heads_rejected(self):
        rng = np.random.default_rng(3)
        pyr = FeaturePyramid([Tensor(rng.standard_normal((4, 6)))])
        params = msdatt_params_from(rng, 6, 4, 1, 2)
        with pytest.raises(ContractError):
            msdatt(Tensor(rng.standard_normal((2, 6))), Tensor(np.array([0.5, 0.5])),
                   pyr, params)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        d, heads, levels, points = 4, 2, 2, 2
        flat = heads * levels * points
        lvl0 = rng.standard_normal((5, d))
        lvl1 = rng.standard_normal((3, d))
        base = msdatt_params_from(rng, d, heads, levels, points, offset_scale=0.02)
        queries0 = rng.standard_normal((2, d))
        refs0 = np.array([0.33, 0.61])
        probe = rng.standard_normal((2, d))

        def fn(queries, w_offset, refs, level0, level1):
            params = MSDAttParams(
                heads=heads, points=points,
                w_offset=w_offset, b_offset=base.b_offset,
                w_attn=base.w_attn, b_attn=base.b_attn,
                w_value=base.w_value, b_value=base.b_value,
                w_out=base.w_out, b_out=base.b_out)
            pyr = FeaturePyramid([level0, level1])
            out = msdatt(queries, refs, pyr, params)
            return ad.sum_all(ad.mul(out, ad.constant(probe)))

        res = fd_check(fn, {
            "queries": queries0,
            "w_offset": rng.standard_normal((d, flat)) * 0.02,
            "refs": refs0,
            "level0": lvl0,
            "level1": lvl1,
        })
        assert res.max_rel_err < 1e-4


class TestDSA:
    def test_single_point_returns_value_projected_sample(self):
        rng = np.random.default_rng(5)
        d = 4
        level = rng.standard_normal((6, d))
        params = dsa_params_from(rng, d, 1, 1)
        params.w_offset = Tensor(np.zeros((2 * d, 1)))
        params.b_offset = Tensor(np.zeros(1))
        pyr = FeaturePyramid([Tensor(level)])
        h = Tensor(rng.standard_normal((1, d)))
        q = Tensor(rng.standard_normal((1, d)))
        refs = Tensor(np.array([0.44]))
        out = dsa(h, q, refs, pyr, params)
        values = level @ params.w_value.data + params.b_value.data
        expected = sample_linear(Tensor(values), np.array([0.44])).data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_two_identical_keys_split_evenly(self):
        rng = np.random.default_rng(6)
        d = 3
        params = dsa_params_from(rng, d, 1, 2)
        params.w_offset = Tensor(np.zeros((2 * d, 2)))
        params.b_offset = Tensor(np.zeros(2))
        pyr = FeaturePyramid([Tensor(rng.standard_normal((5, d)))])
        h = Tensor(rng.standard_normal((2, d)))
        q = Tensor(rng.standard_normal((2, d)))
        refs = Tensor(np.array([0.3, 0.72]))
        _, attn = dsa(h, q, refs, pyr, params, return_weights=True)
        np.testing.assert_allclose(attn.data, np.full((2, 2), 0.5), atol=1e-14)

    def test_zero_projections_reduce_to_mean_of_samples(self):
        rng = np.random.default_rng(7)
        d, levels, points = 4, 2, 3
        pyr = FeaturePyramid([Tensor(rng.standard_normal((7, d))),
                              Tensor(rng.standard_normal((4, d)))])
        params = dsa_params_from(rng, d, levels, points)
        params.w_key = Tensor(np.zeros_like(params.w_key.data))
        params.b_key = Tensor(np.zeros_like(params.b_key.data))
        params.w_query = Tensor(np.zeros_like(params.w_query.data))
        params.b_query = Tensor(np.zeros_like(params.b_query.data))
        h = Tensor(rng.standard_normal((3, d)))
        q = Tensor(rng.standard_normal((3, d)))
        refs = Tensor(rng.uniform(0.3, 0.7, 3))
        out, attn = dsa(h, q, refs, pyr, params, return_weights=True)
        np.testing.assert_allclose(attn.data, np.full((3, levels * points),
                                                      1.0 / (levels * points)),
                                   atol=1e-14)
        # recompute the samples by hand and average them
        hq = np.concatenate([h.data, q.data], axis=1)
        offs = hq @ params.w_offset.data + params.b_offset.data
        pos = refs.data[:, None] + offs
        means = np.zeros((3, d))
        for lvl in range(levels):
            values = pyr.levels[lvl].data @ params.w_value.data + params.b_value.data
            block = pos[:, lvl * points:(lvl + 1) * points]
            means += sample_linear(Tensor(values), block).data.sum(axis=1)
        means /= levels * points
        np.testing.assert_allclose(out.data, means, atol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(8)
        d = 6
        pyr = FeaturePyramid([Tensor(rng.standard_normal((8, d))),
                              Tensor(rng.standard_normal((4, d)))])
        params = dsa_params_from(rng, d, 2, 4)
        h = Tensor(rng.standard_normal((4, d)))
        q = Tensor(rng.standard_normal((4, d)))
        refs = Tensor(rng.uniform(0.2, 0.8, 4))
        _, attn = dsa(h, q, refs, pyr, params, return_weights=True)
        np.testing.assert_allclose(attn.data.sum(axis=1), np.ones(4), atol=1e-12)

    def test_gradient_wrt_linguistic_state(self):
        rng = np.random.default_rng(9)
        d, levels, points = 3, 2, 2
        lvl0 = rng.standard_normal((5, d))
        lvl1 = rng.standard_normal((3, d))
        params = dsa_params_from(rng, d, levels, points, dk=4, offset_scale=0.02)
        q0 = rng.standard_normal((2, d))
        refs0 = np.array([0.37, 0.58])
        probe = rng.standard_normal((2, d))

        def fn(h):
            pyr = FeaturePyramid([ad.constant(lvl0), ad.constant(lvl1)])
            out = dsa(h, ad.constant(q0), ad.constant(refs0), pyr, params)
            return ad.sum_all(ad.mul(out, ad.constant(probe)))

        res = fd_check(fn, {"h": rng.standard_normal((2, d))})
        assert res.max_rel_err < 1e-4
