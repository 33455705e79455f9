"""Training criterion: hand-checked scalars, composition oracles, invariance."""

import numpy as np
import pytest

from personcap import autodiff as ad
from personcap.autodiff import Tape, Tensor, backward
from personcap.criterion import (
    LayerPrediction,
    LossWeights,
    MatchWeights,
    caption_ce,
    focal_loss,
    focal_loss_t,
    match_cost,
    set_loss,
)
from personcap.errors import ContractError
from personcap.geometry import giou1d
from personcap.gradcheck import fd_check


class TestFocalLoss:
    def test_confident_correct(self):
        expected = -0.25 * 0.1 ** 2 * np.log(0.9)
        assert abs(focal_loss(0.9, 1) - expected) < 1e-15
        assert abs(focal_loss(0.9, 1) - 2.634e-4) < 1e-6

    def test_uncertain_negative(self):
        expected = -0.75 * 0.25 * np.log(0.5)
        assert abs(focal_loss(0.5, 0) - expected) < 1e-15
        assert abs(focal_loss(0.5, 0) - 0.12997) < 1e-5

    def test_confident_limit_vanishes(self):
        assert focal_loss(1.0, 1) < 1e-12
        assert focal_loss(0.0, 0) < 1e-12

    def test_degenerates_to_half_cross_entropy(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, size=20)
        got = focal_loss(p, np.ones(20), alpha=0.5, gamma=0.0)
        np.testing.assert_allclose(got, -0.5 * np.log(p), atol=1e-12)
        got0 = focal_loss(p, np.zeros(20), alpha=0.5, gamma=0.0)
        np.testing.assert_allclose(got0, -0.5 * np.log(1.0 - p), atol=1e-12)

    def test_tensor_variant_matches_numpy(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, size=12)
        y = (rng.uniform(size=12) > 0.5).astype(float)
        got = focal_loss_t(Tensor(p), y).data
        np.testing.assert_allclose(got, focal_loss(p, y), atol=1e-12)

    def test_tensor_variant_gradient(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        res = fd_check(
            lambda c: ad.sum_all(focal_loss_t(c, y)),
            {"c": np.array([0.3, 0.6, 0.85, 0.2])})
        assert res.max_rel_err < 1e-5


class TestCaptionCE:
    def test_uniform_logits_any_length(self):
        for t in (1, 4, 9):
            loss = caption_ce(Tensor(np.zeros((t, 50))), np.zeros(t, dtype=int))
            assert abs(loss.item() - np.log(50.0)) < 1e-12
        assert abs(np.log(50.0) - 3.912) < 1e-3

    def test_confident_correct_vanishes(self):
        logits = np.full((3, 6), -30.0)
        targets = np.array([2, 0, 5])
        logits[np.arange(3), targets] = 30.0
        assert caption_ce(Tensor(logits), targets).item() < 1e-12

    def test_hand_fixture(self):
        logits = np.array([[1.0, 2.0, 0.5, -1.0],
                           [0.0, 0.0, 3.0, 0.0],
                           [-2.0, 1.0, 1.0, 2.0]])
        targets = np.array([1, 2, 0])
        per_token = []
        for t in range(3):
            row = logits[t]
            per_token.append(-(row[targets[t]] - np.log(np.exp(row).sum())))
        expected = sum(per_token) / 3.0
        assert abs(caption_ce(Tensor(logits), targets).item() - expected) < 1e-12

    def test_mask_drops_positions(self):
        logits = np.array([[2.0, 0.0], [0.0, 2.0], [5.0, -5.0]])
        targets = np.array([0, 1, 1])
        mask = np.array([True, True, False])
        got = caption_ce(Tensor(logits), targets, mask).item()
        expected = caption_ce(Tensor(logits[:2]), targets[:2]).item()
        assert abs(got - expected) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            caption_ce(Tensor(np.zeros((0, 5))), np.zeros(0, dtype=int))
        with pytest.raises(ContractError):
            caption_ce(Tensor(np.zeros((2, 5))), np.zeros(2, dtype=int),
                       np.array([False, False]))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 6))
        targets = np.array([0, 3, 5, 2])
        res = fd_check(lambda x: caption_ce(x, targets), {"x": logits})
        assert res.max_rel_err < 1e-5


class TestMatchCost:
    def test_perfect_prediction_near_zero(self):
        gt = np.array([[0.2, 0.6]])
        cost = match_cost(gt, np.array([1.0 - 1e-9]), gt)
        assert cost[0, 0] < 1e-6

    def test_pure_geometry_ordering(self):
        preds = np.array([[0.1, 0.3], [0.4, 0.6], [0.7, 0.9]])
        conf = np.array([0.9, 0.1, 0.5])
        gt = np.array([[0.42, 0.58]])
        w = MatchWeights(alpha_giou=1.0, alpha_cls=0.0)
        cost = match_cost(preds, conf, gt, w)
        expected = 1.0 - np.array([giou1d(p, gt[0]) for p in preds])
        np.testing.assert_allclose(cost[:, 0], expected, atol=1e-12)
        assert cost[1, 0] == cost.min()

    def test_composes_component_oracles(self):
        preds = np.array([[0.2, 0.5], [0.0, 0.2]])
        conf = np.array([0.9, 0.5])
        gts = np.array([[0.4, 0.8], [0.8, 1.0]])
        w = MatchWeights(alpha_giou=2.0, alpha_cls=1.0)
        cost = match_cost(preds, conf, gts, w)
        for i in range(2):
            for j in range(2):
                expected = 2.0 * (1.0 - giou1d(preds[i], gts[j])) \
                    + 1.0 * focal_loss(conf[i], 1)
                assert abs(cost[i, j] - expected) < 1e-12

    def test_weight_validation(self):
        with pytest.raises(ContractError):
            MatchWeights(alpha_giou=0.0, alpha_cls=0.0)
        with pytest.raises(ContractError):
            MatchWeights(alpha_giou=-1.0)
        with pytest.raises(ContractError):
            LossWeights(beta_cap=-0.5)


def one_hot_logits(tokens, vocab, margin=25.0):
    logits = np.zeros((len(tokens), vocab))
    logits[np.arange(len(tokens)), tokens] = margin
    return logits


def make_layer(segments, confidence, caption_logits=None, caption_targets=None):
    seg_t = Tensor(np.asarray(segments, dtype=float), requires_grad=True)
    conf_t = Tensor(np.asarray(confidence, dtype=float), requires_grad=True)
    captions_for = None
    if caption_logits is not None:
        logit_tensors = [Tensor(l, requires_grad=True) for l in caption_logits]

        def captions_for(pairs):
            return [(logit_tensors[i], caption_targets[j], None) for i, j in pairs]

    return LayerPrediction(seg_t, conf_t, captions_for)


class TestSetLoss:
    def test_perfect_prediction_small_loss(self):
        gt = np.array([[0.1, 0.3], [0.5, 0.9]])
        targets = [np.array([4, 5, 2]), np.array([7, 2])]
        logits = [one_hot_logits(targets[0], 10), one_hot_logits(targets[1], 10)]
        layer = make_layer(gt, [0.9999, 0.9999], logits, targets)
        with Tape():
            loss, assigns = set_loss([layer], gt)
        assert loss.item() < 1e-4
        assert assigns[0].pairs == [(0, 0), (1, 1)]

    def test_prediction_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n, m = 5, 3
            segs = np.sort(rng.uniform(size=(n, 2)), axis=1)
            conf = rng.uniform(0.1, 0.9, size=n)
            gts = np.sort(rng.uniform(size=(m, 2)), axis=1)
            targets = [rng.integers(0, 8, size=4) for _ in range(m)]
            logits = [rng.standard_normal((4, 8)) for _ in range(n)]

            def loss_of(order):
                def captions_for(pairs, order=order):
                    return [(Tensor(logits[order[i]]), targets[j], None)
                            for i, j in pairs]

                layer = LayerPrediction(Tensor(segs[order]), Tensor(conf[order]),
                                        captions_for)
                with Tape():
                    total, _ = set_loss([layer], gts)
                return total.item()

            base = loss_of(np.arange(n))
            perm = rng.permutation(n)
            inv = np.empty(n, dtype=int)
            inv[perm] = np.arange(n)

            def captions_perm(pairs):
                return [(Tensor(logits[perm[i]]), targets[j], None) for i, j in pairs]

            layer = LayerPrediction(Tensor(segs[perm]), Tensor(conf[perm]),
                                    captions_perm)
            with Tape():
                total, _ = set_loss([layer], gts)
            assert total.item() == base

    def test_gt_permutation_invariance_bitwise(self):
        rng = np.random.default_rng(4)
        segs = np.sort(rng.uniform(size=(4, 2)), axis=1)
        conf = rng.uniform(0.2, 0.8, size=4)
        gts = np.sort(rng.uniform(size=(3, 2)), axis=1)
        targets = [rng.integers(0, 6, size=3) for _ in range(3)]
        logits = [rng.standard_normal((3, 6)) for _ in range(4)]

        def loss_with_gt_order(order):
            def captions_for(pairs):
                return [(Tensor(logits[i]), targets[order[j]], None) for i, j in pairs]

            layer = LayerPrediction(Tensor(segs), Tensor(conf), captions_for)
            with Tape():
                total, _ = set_loss([layer], gts[order])
            return total.item()

        assert loss_with_gt_order([2, 0, 1]) == loss_with_gt_order([0, 1, 2])

    def test_two_pred_one_gt_hand_assembly(self):
        pred_segs = np.array([[0.2, 0.5], [0.0, 0.15]])
        conf = np.array([0.8, 0.3])
        gt = np.array([[0.25, 0.55]])
        targets = [np.array([1, 2, 3])]
        logits = [np.full((3, 5), 0.7), np.full((3, 5), -0.2)]
        layer = make_layer(pred_segs, conf, logits, targets)
        with Tape():
            loss, assigns = set_loss([layer], gt)
        assert assigns[0].pairs == [(0, 0)]
        assert assigns[0].unmatched == [1]
        giou_term = 2.0 * (1.0 - giou1d(pred_segs[0], gt[0]))
        cls_term = 1.0 * (focal_loss(conf[0], 1) + focal_loss(conf[1], 0)) / 2.0
        cap_term = 1.0 * caption_ce(Tensor(logits[0]), targets[0]).item()
        assert abs(loss.item() - (giou_term + cls_term + cap_term)) < 1e-9

    def test_zero_gt_is_background_focal_only(self):
        conf = np.array([0.4, 0.7, 0.1])
        layer = make_layer(np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]), conf)
        with Tape():
            loss, assigns = set_loss([layer], np.zeros((0, 2)))
        expected = focal_loss(conf, np.zeros(3)).mean()
        assert abs(loss.item() - expected) < 1e-12
        assert assigns[0].pairs == [] and assigns[0].unmatched == [0, 1, 2]

    def test_layers_sum(self):
        gt = np.array([[0.2, 0.6]])
        segs = np.array([[0.25, 0.5]])
        conf = np.array([0.6])

        def build():
            return make_layer(segs, conf)

        with Tape():
            single, _ = set_loss([build()], gt)
        with Tape():
            double, _ = set_loss([build(), build()], gt)
        assert abs(double.item() - 2.0 * single.item()) < 1e-15

    def test_gradients_flow_to_segments_and_confidence(self):
        gt = np.array([[0.2, 0.6], [0.7, 0.9]])
        layer = make_layer(np.array([[0.25, 0.5], [0.65, 0.95], [0.4, 0.45]]),
                           np.array([0.7, 0.6, 0.4]))
        with Tape():
            loss, _ = set_loss([layer], gt)
        backward(loss)
        assert layer.segments.grad is not None
        assert np.any(layer.segments.grad != 0.0)
        assert layer.confidence.grad is not None
        assert np.all(layer.confidence.grad != 0.0)

    def test_gradient_matches_finite_differences(self):
        # three well-separated persons so the matching is stable under the probe
        gts = np.array([[0.05, 0.25], [0.4, 0.6], [0.75, 0.95]])
        targets = [np.array([1, 2]), np.array([3, 0]), np.array([2, 2])]
        seg0 = np.array([[0.1, 0.3], [0.45, 0.55], [0.7, 0.9], [0.3, 0.35]])
        conf0 = np.array([0.8, 0.7, 0.6, 0.2])
        logit0 = [np.random.default_rng(20 + i).standard_normal((2, 5)) * 0.5
                  for i in range(4)]

        def fn(segments, confidence, l0, l1, l2, l3):
            logit_t = [l0, l1, l2, l3]

            def captions_for(pairs):
                return [(logit_t[i], targets[j], None) for i, j in pairs]

            layer = LayerPrediction(segments, confidence, captions_for)
            total, _ = set_loss([layer], gts)
            return total

        res = fd_check(fn, {"segments": seg0, "confidence": conf0,
                            "l0": logit0[0], "l1": logit0[1],
                            "l2": logit0[2], "l3": logit0[3]})
        assert res.max_rel_err < 1e-4


def test_registered_loss_kernels():
    from personcap.gradcheck import TOL_KERNEL, run_kernel

    for name in ("focal_loss", "giou_pairs", "caption_ce"):
        assert run_kernel(name, 4, 0).max_rel_err < TOL_KERNEL
