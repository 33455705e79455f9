"""Finite-difference verification of analytic gradients.

Central differences with step 1e-6 against the tape's reverse-mode result,
compared elementwise as ``|fd - an| / max(1.0, |fd|, |an|)``.  A registry maps
kernel names to builders of randomized check instances; the test suite and the
``gradcheck`` command both draw from it.  Builders keep inputs away from
non-differentiable points (ties, clip edges, sample-window borders) so the
difference quotient measures the same branch the analytic rule used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward

FD_STEP = 1e-6
TOL_BASIC = 1e-5
TOL_KERNEL = 1e-4
TOL_COMPOSITE = 1e-3


def rel_error(fd: np.ndarray, an: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(an)))
    return np.abs(fd - an) / scale


@dataclass
class CheckResult:
    max_rel_err: float
    per_input: dict[str, float] = field(default_factory=dict)


def fd_check(fn: Callable[..., Tensor], arrays: dict[str, np.ndarray],
             step: float = FD_STEP) -> CheckResult:
    """Compare reverse-mode gradients of a scalar-valued fn against FD.

    ``fn`` receives one keyword Tensor per entry of ``arrays`` and must return
    a scalar Tensor.  Every array is treated as differentiable.
    """
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
               for k, v in arrays.items()}
    with Tape():
        loss = fn(**tensors)
    backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    def value_at(current: dict[str, np.ndarray]) -> float:
        return fn(**{k: Tensor(v) for k, v in current.items()}).item()

    per_input: dict[str, float] = {}
    worst = 0.0
    for name, base in arrays.items():
        work = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        arr = work[name]
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value_at(work)
            flat[i] = orig - step
            fm = value_at(work)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * step)
        err = rel_error(fd, analytic[name].reshape(-1))
        per_input[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, per_input[name])
    return CheckResult(max_rel_err=worst, per_input=per_input)


# ---------------------------------------------------------------------------
# registry


@dataclass
class Kernel:
    name: str
    tol: float
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], dict[str, np.ndarray]]]


KERNELS: dict[str, Kernel] = {}


def register(name: str, tol: float):
    def wrap(build):
        KERNELS[name] = Kernel(name, tol, build)
        return build

    return wrap


def run_kernel(name: str, trials: int, seed: int) -> CheckResult:
    """Run a registered kernel's check ``trials`` times; worst error wins."""
    kernel = KERNELS[name]
    rng = np.random.default_rng([seed, _stable_hash(name)])
    worst = CheckResult(0.0)
    for _ in range(trials):
        fn, arrays = kernel.build(rng)
        res = fd_check(fn, arrays)
        if res.max_rel_err >= worst.max_rel_err:
            worst = res
    return worst


def _stable_hash(name: str) -> int:
    h = 2166136261
    for ch in name.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def _away_from_kinks(rng, shape, low=-2.0, high=2.0, margin=0.05):
    x = rng.uniform(low, high, size=shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + (x == 0) * margin, x)
    return x


@register("add", TOL_BASIC)
def _k_add(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    return (lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b)))), {"a": a, "b": b}


@register("mul", TOL_BASIC)
def _k_mul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    return (lambda a, b: ad.sum_all(ad.mul(a, b))), {"a": a, "b": b}


@register("div", TOL_BASIC)
def _k_div(rng):
    a = rng.standard_normal((3, 4))
    b = _away_from_kinks(rng, (3, 4), margin=0.3)
    return (lambda a, b: ad.sum_all(ad.div(a, b))), {"a": a, "b": b}


@register("exp_log", TOL_BASIC)
def _k_exp_log(rng):
    a = rng.uniform(0.2, 2.0, size=(5,))
    return (lambda a: ad.sum_all(ad.mul(ad.log(a), ad.exp(a)))), {"a": a}


@register("sigmoid", TOL_BASIC)
def _k_sigmoid(rng):
    a = rng.standard_normal((4, 3))
    return (lambda a: ad.sum_all(ad.mul(ad.sigmoid(a), ad.sigmoid(a)))), {"a": a}


@register("tanh", TOL_BASIC)
def _k_tanh(rng):
    a = rng.standard_normal((6,))
    return (lambda a: ad.sum_all(ad.tanh(a))), {"a": a}


@register("relu", TOL_BASIC)
def _k_relu(rng):
    a = _away_from_kinks(rng, (4, 4))
    return (lambda a: ad.sum_all(ad.mul(ad.relu(a), a))), {"a": a}


@register("powc", TOL_BASIC)
def _k_powc(rng):
    a = rng.uniform(0.3, 2.0, size=(5,))
    return (lambda a: ad.sum_all(ad.powc(a, 2.5))), {"a": a}


@register("clip", TOL_BASIC)
def _k_clip(rng):
    a = _away_from_kinks(rng, (8,), low=-2.0, high=2.0)
    a = np.where(np.abs(np.abs(a) - 1.0) < 0.05, a * 1.2, a)
    return (lambda a: ad.sum_all(ad.mul(ad.clip(a, -1.0, 1.0), a))), {"a": a}


@register("max_min", TOL_BASIC)
def _k_max_min(rng):
    a = rng.standard_normal((6,))
    b = a + np.where(rng.standard_normal(6) > 0, 0.3, -0.3)
    return (lambda a, b: ad.sum_all(ad.add(ad.maximum(a, b),
                                           ad.mul(ad.minimum(a, b), 2.0)))), {"a": a, "b": b}


@register("matmul", TOL_BASIC)
def _k_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    return (lambda a, b: ad.sum_all(ad.matmul(a, b))), {"a": a, "b": b}


@register("bmm", TOL_BASIC)
def _k_bmm(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 4, 2))
    return (lambda a, b: ad.sum_all(ad.mul(ad.bmm(a, b), ad.bmm(a, b)))), {"a": a, "b": b}


@register("reshape_concat_slice", TOL_BASIC)
def _k_shape(rng):
    a = rng.standard_normal((2, 6))
    b = rng.standard_normal((3, 6))

    def fn(a, b):
        c = ad.concat([a, b], axis=0)
        d = ad.slice_axis(c, 1, 1, 5)
        return ad.sum_all(ad.mul(ad.reshape(d, (4, 5)), 1.5))

    return fn, {"a": a, "b": b}


@register("gather_take", TOL_BASIC)
def _k_gather(rng):
    a = rng.standard_normal((5, 4))
    idx = rng.integers(0, 5, size=7)
    cols = rng.integers(0, 4, size=7)

    def fn(a):
        rows = ad.gather_rows(a, idx)
        return ad.sum_all(ad.mul(ad.take_per_row(rows, cols), 2.0))

    return fn, {"a": a}


@register("sum_axis_add_row", TOL_BASIC)
def _k_sums(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    w = rng.standard_normal((3,))

    def fn(a, b, w):
        return ad.sum_all(ad.mul_last(ad.add_row(a, b), w))

    return fn, {"a": a, "b": b, "w": w}


@register("expand", TOL_BASIC)
def _k_expand(rng):
    a = rng.standard_normal((3, 1))
    c = rng.standard_normal((2, 3, 4))
    return (lambda a: ad.sum_all(ad.mul(ad.expand(a, (2, 3, 4)), ad.constant(c)))), {"a": a}


@register("softmax", TOL_BASIC)
def _k_softmax(rng):
    a = rng.standard_normal((3, 5))
    c = rng.standard_normal((3, 5))
    return (lambda a: ad.sum_all(ad.mul(ad.softmax(a, axis=-1), ad.constant(c)))), {"a": a}


@register("log_softmax", TOL_BASIC)
def _k_log_softmax(rng):
    a = rng.standard_normal((2, 6))
    c = rng.standard_normal((2, 6))
    return (lambda a: ad.sum_all(ad.mul(ad.log_softmax(a, axis=-1), ad.constant(c)))), {"a": a}


@register("layer_norm", TOL_BASIC)
def _k_layer_norm(rng):
    a = rng.standard_normal((3, 8))
    gain = rng.uniform(0.5, 1.5, size=8)
    bias = rng.standard_normal(8)
    c = rng.standard_normal((3, 8))

    def fn(a, gain, bias):
        return ad.sum_all(ad.mul(ad.layer_norm(a, gain, bias), ad.constant(c)))

    return fn, {"a": a, "gain": gain, "bias": bias}


@register("linear_sample", TOL_KERNEL)
def _k_linear_sample(rng):
    values = rng.standard_normal((7, 4))
    # stay off integer grid coordinates and the [0, 1] borders
    pos = rng.uniform(0.05, 0.95, size=(3, 2))
    u = pos * 6.0
    pos = np.where(np.abs(u - np.round(u)) < 0.02, pos + 0.03, pos)
    c = rng.standard_normal((3, 2, 4))

    def fn(values, pos):
        return ad.sum_all(ad.mul(ad.linear_sample(values, pos), ad.constant(c)))

    return fn, {"values": values, "pos": pos}


@register("avgpool2_rows", TOL_BASIC)
def _k_avgpool(rng):
    a = rng.standard_normal((5, 3))
    return (lambda a: ad.sum_all(ad.mul(ad.avgpool2_rows(a), ad.avgpool2_rows(a)))), {"a": a}


@register("msdatt", TOL_KERNEL)
def _k_msdatt(rng):
    from .deform_attn import FeaturePyramid, MSDAttParams, msdatt

    d, heads, levels, points = 4, 2, 2, 2
    flat = heads * levels * points
    fixed = {
        "b_offset": rng.standard_normal(flat) * 0.02,
        "w_attn": rng.standard_normal((d, flat)) * 0.3,
        "b_attn": rng.standard_normal(flat) * 0.3,
        "w_value": rng.standard_normal((d, d)) * 0.3,
        "b_value": rng.standard_normal(d) * 0.3,
        "w_out": rng.standard_normal((d, d)) * 0.3,
        "b_out": rng.standard_normal(d) * 0.3,
    }
    probe = rng.standard_normal((2, d))
    refs = rng.uniform(0.25, 0.75, 2)

    def fn(queries, w_offset, level0, level1):
        params = MSDAttParams(
            heads=heads, points=points,
            w_offset=w_offset, b_offset=ad.constant(fixed["b_offset"]),
            w_attn=ad.constant(fixed["w_attn"]), b_attn=ad.constant(fixed["b_attn"]),
            w_value=ad.constant(fixed["w_value"]), b_value=ad.constant(fixed["b_value"]),
            w_out=ad.constant(fixed["w_out"]), b_out=ad.constant(fixed["b_out"]))
        pyr = FeaturePyramid([level0, level1])
        out = msdatt(queries, ad.constant(refs), pyr, params)
        return ad.sum_all(ad.mul(out, ad.constant(probe)))

    return fn, {
        "queries": rng.standard_normal((2, d)),
        "w_offset": rng.standard_normal((d, flat)) * 0.02,
        "level0": rng.standard_normal((5, d)),
        "level1": rng.standard_normal((3, d)),
    }


@register("dsa", TOL_KERNEL)
def _k_dsa(rng):
    from .deform_attn import DSAParams, FeaturePyramid, dsa

    d, levels, points, dk = 3, 2, 2, 4
    lk = levels * points
    fixed = {
        "w_offset": rng.standard_normal((2 * d, lk)) * 0.02,
        "b_offset": rng.standard_normal(lk) * 0.02,
        "w_value": rng.standard_normal((d, d)) * 0.3,
        "b_value": rng.standard_normal(d) * 0.3,
        "w_key": rng.standard_normal((d, dk)) * 0.3,
        "b_key": rng.standard_normal(dk) * 0.3,
        "b_query": rng.standard_normal(dk) * 0.3,
    }
    level1 = rng.standard_normal((3, d))
    refs = rng.uniform(0.25, 0.75, 2)
    probe = rng.standard_normal((2, d))

    def fn(h, q, w_query, level0):
        params = DSAParams(
            points=points,
            w_offset=ad.constant(fixed["w_offset"]),
            b_offset=ad.constant(fixed["b_offset"]),
            w_value=ad.constant(fixed["w_value"]),
            b_value=ad.constant(fixed["b_value"]),
            w_key=ad.constant(fixed["w_key"]), b_key=ad.constant(fixed["b_key"]),
            w_query=w_query, b_query=ad.constant(fixed["b_query"]))
        pyr = FeaturePyramid([level0, ad.constant(level1)])
        out = dsa(h, q, ad.constant(refs), pyr, params)
        return ad.sum_all(ad.mul(out, ad.constant(probe)))

    return fn, {
        "h": rng.standard_normal((2, d)),
        "q": rng.standard_normal((2, d)),
        "w_query": rng.standard_normal((2 * d, dk)) * 0.3,
        "level0": rng.standard_normal((5, d)),
    }


@register("focal_loss", TOL_KERNEL)
def _k_focal_loss(rng):
    from .criterion import focal_loss_t

    labels = (rng.uniform(size=5) < 0.5).astype(np.float64)
    probe = ad.constant(rng.standard_normal(5))

    def fn(confidence):
        return ad.sum_all(ad.mul(focal_loss_t(confidence, labels), probe))

    # confidence clear of the probability floor and ceiling
    return fn, {"confidence": rng.uniform(0.1, 0.9, 5)}


@register("giou_pairs", TOL_KERNEL)
def _k_giou_pairs(rng):
    from .criterion import _giou_pairs

    # anchored offsets keep endpoint orderings stable under FD probing
    gt_rows = np.array([[0.1, 0.3], [0.4, 0.65], [0.7, 0.95]])
    gt_rows += rng.uniform(-0.01, 0.01, gt_rows.shape)
    shift = rng.uniform(0.02, 0.05, gt_rows.shape) * rng.choice([-1.0, 1.0])
    segments0 = gt_rows + shift
    pred_idx = np.arange(3)
    probe = ad.constant(rng.standard_normal(3))

    def fn(segments):
        return ad.sum_all(ad.mul(_giou_pairs(segments, pred_idx, gt_rows),
                                 probe))

    return fn, {"segments": segments0}


@register("caption_ce", TOL_KERNEL)
def _k_caption_ce(rng):
    from .criterion import caption_ce

    t, v = 4, 6
    targets = rng.integers(0, v, size=t)
    mask = np.ones(t)
    mask[rng.integers(0, t)] = 0.0

    def fn(logits, masked_logits):
        return ad.add(caption_ce(logits, targets),
                      caption_ce(masked_logits, targets, mask))

    return fn, {"logits": rng.standard_normal((t, v)),
                "masked_logits": rng.standard_normal((t, v))}


@register("set_loss", TOL_KERNEL)
def _k_set_loss(rng):
    from .criterion import LayerPrediction, set_loss

    # well-separated ground truths keep the assignment stable under probing
    gts = np.array([[0.05, 0.25], [0.4, 0.6], [0.75, 0.95]])
    gts += rng.uniform(-0.02, 0.02, gts.shape)
    targets = [rng.integers(0, 5, size=2) for _ in range(3)]
    segments0 = gts + rng.uniform(-0.04, 0.04, gts.shape)
    conf0 = rng.uniform(0.3, 0.9, 3)
    logits0 = rng.standard_normal((3, 2, 5)) * 0.5

    def fn(segments, confidence, logits):
        def captions_for(pairs):
            return [(ad.reshape(ad.slice_axis(logits, 0, i, i + 1), (2, 5)),
                     targets[j], None) for i, j in pairs]

        layer = LayerPrediction(segments, confidence, captions_for)
        total, _ = set_loss([layer], gts)
        return total

    return fn, {"segments": segments0, "confidence": conf0, "logits": logits0}


@register("lstm_step", TOL_KERNEL)
def _k_lstm_step(rng):
    from .model import ModelConfig, _lstm_step

    cfg = ModelConfig(d_model=4, heads=2, lstm_hidden=3)
    hh, xw, n = 3, 4, 2
    h0 = ad.constant(rng.standard_normal((n, hh)) * 0.5)
    c0 = ad.constant(rng.standard_normal((n, hh)) * 0.5)
    probe_h = ad.constant(rng.standard_normal((n, hh)))
    probe_c = ad.constant(rng.standard_normal((n, hh)))

    def fn(wx, wh, b, x):
        p = {"cap.lstm.wx": wx, "cap.lstm.wh": wh, "cap.lstm.b": b}
        h1, c1 = _lstm_step(p, cfg, x, h0, c0)
        return ad.add(ad.sum_all(ad.mul(h1, probe_h)),
                      ad.sum_all(ad.mul(c1, probe_c)))

    return fn, {
        "wx": rng.standard_normal((xw, 4 * hh)) * 0.3,
        "wh": rng.standard_normal((hh, 4 * hh)) * 0.3,
        "b": rng.standard_normal(4 * hh) * 0.3,
        "x": rng.standard_normal((n, xw)),
    }


@register("localization_head", TOL_KERNEL)
def _k_localization_head(rng):
    from .model import localization_head

    d, n = 6, 3
    probe = ad.constant(rng.standard_normal((n, 2)))

    def make(arrays, fixed):
        def fn(w1, w3, queries, refs):
            p = {"loc.fc1.w": w1, "loc.fc1.b": ad.constant(fixed["b1"]),
                 "loc.fc2.w": ad.constant(fixed["w2"]),
                 "loc.fc2.b": ad.constant(fixed["b2"]),
                 "loc.fc3.w": w3, "loc.fc3.b": ad.constant(fixed["b3"])}
            segs = localization_head(p, queries, refs)
            return ad.sum_all(ad.mul(segs, probe))
        return fn

    # redraw until ends sit clear of the [0, 1] clip rails
    while True:
        fixed = {"b1": rng.standard_normal(d) * 0.1,
                 "w2": rng.standard_normal((d, d)) * 0.3,
                 "b2": rng.standard_normal(d) * 0.1,
                 "b3": rng.standard_normal(2) * 0.1}
        arrays = {"w1": rng.standard_normal((d, d)) * 0.3,
                  "w3": rng.standard_normal((d, 2)) * 0.1,
                  "queries": rng.standard_normal((n, d)),
                  "refs": rng.uniform(0.35, 0.65, n)}
        p = {"loc.fc1.w": Tensor(arrays["w1"]),
             "loc.fc1.b": Tensor(fixed["b1"]),
             "loc.fc2.w": Tensor(fixed["w2"]), "loc.fc2.b": Tensor(fixed["b2"]),
             "loc.fc3.w": Tensor(arrays["w3"]), "loc.fc3.b": Tensor(fixed["b3"])}
        segs = localization_head(p, Tensor(arrays["queries"]),
                                 Tensor(arrays["refs"])).data
        if np.all(segs > 1e-3) and np.all(segs < 1.0 - 1e-3):
            return make(arrays, fixed), arrays


@register("model_composite", TOL_COMPOSITE)
def _k_model_composite(rng):
    """End to end: encoder, decoder, heads, matching, captions.

    Perturbs the first four rows of the confidence weight and of the last
    refine weight; the rest of each vector rides along as a constant, so
    the analytic pass still runs the full graph.  The refine path reaches
    the caption sampler because references feed the word-level attention.
    """
    from .model import ModelConfig, init_params, video_loss

    cfg = ModelConfig(d_model=16, ffn_dim=24, enc_layers=1, dec_layers=2,
                      heads=2, levels=2, points=2, dsa_points=2, dsa_key_dim=8,
                      lstm_hidden=12, embed_dim=8, nominal_frames=8)
    feat, vocab = 5, 12
    params = init_params(cfg, feat, vocab, seed=int(rng.integers(2 ** 31)))
    # jitter clears the symmetric zero-init point
    jittered = {k: v + rng.standard_normal(v.shape) * 0.02
                for k, v in params.items()}
    frames = rng.standard_normal((8, feat))
    person = rng.standard_normal((1, feat))
    gts = np.array([[0.2, 0.7]]) + rng.uniform(-0.02, 0.02, (1, 2))
    rows = [[1, 5, 7, 4, 2]]
    conf_rest = ad.constant(jittered["conf.w"][4:])
    refine_rest = ad.constant(jittered["dec1.refine.w"][4:])

    def fn(conf_w, refine_w):
        p = {k: ad.constant(v) for k, v in jittered.items()}
        p["conf.w"] = ad.concat([conf_w, conf_rest], axis=0)
        p["dec1.refine.w"] = ad.concat([refine_w, refine_rest], axis=0)
        loss, _, _ = video_loss(p, cfg, frames, person, gts, rows)
        return loss

    return fn, {"conf_w": jittered["conf.w"][:4].copy(),
                "refine_w": jittered["dec1.refine.w"][:4].copy()}
