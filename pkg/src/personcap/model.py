"""The person-caption network and its training loop.

Frames enter a deformable self-attention encoder whose output becomes a
temporal feature pyramid.  Person features become queries that decode
against the pyramid; every decoder layer carries a prediction head
(confidence, segment, caption) so the set criterion can supervise each
refinement stage.  Captions come from an LSTM that re-reads the pyramid
through deformable soft attention at every word.

All functions take a flat ``name -> Tensor`` parameter dict so training,
checkpointing, and finite-difference checks share one representation.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .criterion import (PROB_FLOOR, LayerPrediction, LossWeights,
                        MatchWeights, set_loss)
from .deform_attn import (DSAParams, FeaturePyramid, MSDAttParams,
                          build_pyramid, dsa, dsa_values, msdatt)
from .errors import ContractError
from .optim import adam_init, adam_step
from .text import BOS, EOS, PAD, Vocab

_INIT_STREAM = 515151
_ORDER_STREAM = 626262


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    ffn_dim: int = 1024
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 8
    levels: int = 4
    points: int = 4
    dsa_points: int = 4
    dsa_key_dim: int = 64
    lstm_hidden: int = 256
    embed_dim: int = 128
    max_caption_len: int = 65
    learning_rate: float = 5e-5
    confidence_threshold: float = 0.5
    beam_width: int = 1
    query_budget: int = 0
    nominal_frames: int = 32

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError(
                f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.d_model % 2:
            raise ContractError("d_model must be even for sinusoidal positions")
        for field in ("d_model", "ffn_dim", "enc_layers", "dec_layers", "heads",
                      "levels", "points", "dsa_points", "dsa_key_dim",
                      "lstm_hidden", "embed_dim", "max_caption_len",
                      "beam_width", "nominal_frames"):
            if getattr(self, field) < 1:
                raise ContractError(f"{field} must be positive")
        if self.query_budget < 0:
            raise ContractError("query_budget cannot be negative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ContractError(
                f"confidence_threshold outside [0, 1]: {self.confidence_threshold}")
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Laptop-sized preset (the defaults)."""
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        """Full-size preset: wider model and caption state."""
        base = dict(d_model=512, ffn_dim=2048, lstm_hidden=512)
        base.update(overrides)
        return cls(**base)


def config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items())


def config_from_text(text: str) -> ModelConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config lines must be key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ContractError(f"unknown config key {key!r}")
        caster = float if fields[key] in ("float", float) else int
        try:
            values[key] = caster(raw)
        except ValueError:
            raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from None
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# parameters


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Sinusoidal table [length, width]; width must be even."""
    if width % 2:
        raise ContractError(f"position width must be even, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(width // 2, dtype=np.float64)
    angle = pos / np.power(10000.0, 2.0 * idx / width)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def _offset_bias(heads: int, levels: int, points: int, nominal: int) -> np.ndarray:
    """Initial sampling offsets: points fan out around the reference, wider
    on coarser levels (one level step doubles the spacing)."""
    bias = np.zeros((heads, levels, points))
    for lvl in range(levels):
        spread = (np.arange(points) - (points - 1) / 2.0) * (2.0 ** lvl) / nominal
        bias[:, lvl, :] = spread
    return bias.reshape(-1)


def init_params(cfg: ModelConfig, feature_dim: int, vocab_size: int,
                seed: int = 0) -> dict:
    """Seeded parameter dict (plain float64 arrays, insertion-ordered)."""
    rng = np.random.default_rng([seed, _INIT_STREAM])
    d, h, k = cfg.d_model, cfg.heads, cfg.points

    def linear(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)

    p: dict[str, np.ndarray] = {}

    def put_linear(name, n_in, n_out, zero=False):
        p[f"{name}.w"] = np.zeros((n_in, n_out)) if zero else linear(n_in, n_out)
        p[f"{name}.b"] = np.zeros(n_out)

    def put_ln(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def put_msdatt(name, n_levels):
        flat = h * n_levels * k
        p[f"{name}.w_offset"] = np.zeros((d, flat))
        p[f"{name}.b_offset"] = _offset_bias(h, n_levels, k, cfg.nominal_frames)
        p[f"{name}.w_attn"] = np.zeros((d, flat))
        p[f"{name}.b_attn"] = np.zeros(flat)
        put_linear(f"{name}.value", d, d)
        put_linear(f"{name}.out", d, d)

    put_linear("input", feature_dim, d)
    for i in range(cfg.enc_layers):
        put_msdatt(f"enc{i}.attn", 1)
        put_ln(f"enc{i}.ln1")
        put_linear(f"enc{i}.ffn.fc1", d, cfg.ffn_dim)
        put_linear(f"enc{i}.ffn.fc2", cfg.ffn_dim, d)
        put_ln(f"enc{i}.ln2")

    put_linear("query", feature_dim, d)
    put_linear("query.ref", d, 1)
    if cfg.query_budget:
        p["budget.queries"] = rng.standard_normal((cfg.query_budget, d)) / math.sqrt(d)

    for i in range(cfg.dec_layers):
        for proj in ("q", "k", "v", "o"):
            put_linear(f"dec{i}.self.{proj}", d, d)
        put_ln(f"dec{i}.ln1")
        put_msdatt(f"dec{i}.cross", cfg.levels)
        put_ln(f"dec{i}.ln2")
        put_linear(f"dec{i}.ffn.fc1", d, cfg.ffn_dim)
        put_linear(f"dec{i}.ffn.fc2", cfg.ffn_dim, d)
        put_ln(f"dec{i}.ln3")
        put_linear(f"dec{i}.refine", d, 1, zero=True)

    put_linear("loc.fc1", d, d)
    put_linear("loc.fc2", d, d)
    put_linear("loc.fc3", d, 2, zero=True)
    put_linear("conf", d, 1)

    joint = cfg.lstm_hidden + d
    lk = cfg.levels * cfg.dsa_points
    p["cap.embed"] = rng.standard_normal((vocab_size, cfg.embed_dim)) * 0.1
    p["cap.dsa.w_offset"] = np.zeros((joint, lk))
    p["cap.dsa.b_offset"] = _offset_bias(1, cfg.levels, cfg.dsa_points,
                                         cfg.nominal_frames)
    put_linear("cap.dsa.value", d, d)
    put_linear("cap.dsa.key", d, cfg.dsa_key_dim)
    put_linear("cap.dsa.query", joint, cfg.dsa_key_dim)
    x_width = 2 * d + cfg.embed_dim
    p["cap.lstm.wx"] = linear(x_width, 4 * cfg.lstm_hidden)
    p["cap.lstm.wh"] = linear(cfg.lstm_hidden, 4 * cfg.lstm_hidden)
    bias = np.zeros(4 * cfg.lstm_hidden)
    bias[cfg.lstm_hidden:2 * cfg.lstm_hidden] = 1.0   # open forget gates
    p["cap.lstm.b"] = bias
    put_linear("cap.out", cfg.lstm_hidden, vocab_size)
    return p


def params_to_tensors(params: dict, requires_grad: bool = True) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _msdatt_params(p: dict, name: str, cfg: ModelConfig) -> MSDAttParams:
    return MSDAttParams(
        heads=cfg.heads, points=cfg.points,
        w_offset=p[f"{name}.w_offset"], b_offset=p[f"{name}.b_offset"],
        w_attn=p[f"{name}.w_attn"], b_attn=p[f"{name}.b_attn"],
        w_value=p[f"{name}.value.w"], b_value=p[f"{name}.value.b"],
        w_out=p[f"{name}.out.w"], b_out=p[f"{name}.out.b"])


def _dsa_params(p: dict, cfg: ModelConfig) -> DSAParams:
    return DSAParams(
        points=cfg.dsa_points,
        w_offset=p["cap.dsa.w_offset"], b_offset=p["cap.dsa.b_offset"],
        w_value=p["cap.dsa.value.w"], b_value=p["cap.dsa.value.b"],
        w_key=p["cap.dsa.key.w"], b_key=p["cap.dsa.key.b"],
        w_query=p["cap.dsa.query.w"], b_query=p["cap.dsa.query.b"])


def _affine(p: dict, name: str, x: Tensor) -> Tensor:
    return ad.add_row(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _ln(p: dict, name: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _ffn(p: dict, name: str, x: Tensor) -> Tensor:
    return _affine(p, f"{name}.fc2", ad.relu(_affine(p, f"{name}.fc1", x)))


def _logit(prob: Tensor) -> Tensor:
    safe = ad.clip(prob, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return ad.log(ad.div(safe, ad.add(ad.neg(safe), 1.0)))


# ---------------------------------------------------------------------------
# encoder


def encode(p: dict, cfg: ModelConfig, frames: np.ndarray) -> FeaturePyramid:
    """Frames [T, C] -> refined feature pyramid of cfg.levels levels.

    Positional encoding rides only on the attention inputs; the sampled
    values and residual stream stay position-free.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ContractError(f"frames must be [T, C], got {frames.shape}")
    t = frames.shape[0]
    x = _affine(p, "input", ad.constant(frames))
    pe = ad.constant(positional_encoding(t, cfg.d_model))
    refs = ad.constant(np.linspace(0.0, 1.0, t) if t > 1 else np.zeros(1))
    for i in range(cfg.enc_layers):
        attn = msdatt(ad.add(x, pe), refs, FeaturePyramid([x]),
                      _msdatt_params(p, f"enc{i}.attn", cfg))
        x = _ln(p, f"enc{i}.ln1", ad.add(x, attn))
        x = _ln(p, f"enc{i}.ln2", ad.add(x, _ffn(p, f"enc{i}.ffn", x)))
    return build_pyramid(x, cfg.levels)


# ---------------------------------------------------------------------------
# decoder


def project_queries(p: dict, cfg: ModelConfig,
                    person_feats: np.ndarray) -> tuple:
    """Person features [N, C] -> (queries [N', d], initial refs [N']).

    With a query budget, learned no-object rows pad the set up to the
    budget; N may not exceed it.
    """
    person_feats = np.asarray(person_feats, dtype=np.float64)
    if person_feats.ndim != 2:
        raise ContractError(f"person features must be [N, C], got {person_feats.shape}")
    queries = _affine(p, "query", ad.constant(person_feats))
    if cfg.query_budget:
        n = queries.shape[0]
        if n > cfg.query_budget:
            raise ContractError(
                f"{n} person queries exceed the budget {cfg.query_budget}")
        if n < cfg.query_budget:
            pad = ad.slice_axis(p["budget.queries"], 0, 0, cfg.query_budget - n)
            queries = ad.concat([queries, pad], axis=0)
    n = queries.shape[0]
    refs = ad.sigmoid(ad.reshape(_affine(p, "query.ref", queries), (n,)))
    return queries, refs


def _self_attention(p: dict, cfg: ModelConfig, layer: int, x: Tensor) -> Tensor:
    dh = x.shape[1] // cfg.heads
    q = _affine(p, f"dec{layer}.self.q", x)
    k = _affine(p, f"dec{layer}.self.k", x)
    v = _affine(p, f"dec{layer}.self.v", x)
    merged = []
    for head in range(cfg.heads):
        lo, hi = head * dh, (head + 1) * dh
        qh = ad.slice_axis(q, 1, lo, hi)
        kh = ad.slice_axis(k, 1, lo, hi)
        vh = ad.slice_axis(v, 1, lo, hi)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        merged.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
    return _affine(p, f"dec{layer}.self.o", ad.concat(merged, axis=1))


def decode(p: dict, cfg: ModelConfig, pyramid: FeaturePyramid,
           queries: Tensor, refs: Tensor) -> list:
    """Run the decoder stack; returns [(queries_l, refs_l)] per layer.

    Each layer refines the scalar reference through a logit-space delta so
    refinements compose multiplicatively in probability space.
    """
    x, r = queries, refs
    out = []
    for i in range(cfg.dec_layers):
        x = _ln(p, f"dec{i}.ln1", ad.add(x, _self_attention(p, cfg, i, x)))
        cross = msdatt(x, r, pyramid, _msdatt_params(p, f"dec{i}.cross", cfg))
        x = _ln(p, f"dec{i}.ln2", ad.add(x, cross))
        x = _ln(p, f"dec{i}.ln3", ad.add(x, _ffn(p, f"dec{i}.ffn", x)))
        delta = ad.reshape(_affine(p, f"dec{i}.refine", x), (x.shape[0],))
        r = ad.sigmoid(ad.add(_logit(r), delta))
        out.append((x, r))
    return out


def localization_head(p: dict, queries: Tensor, refs: Tensor) -> Tensor:
    """Queries + refs -> segments [N, 2], clipped to [0, 1].

    The MLP emits a center delta (applied to the reference in logit space)
    and a width logit; zero activations give width 0.5 around the reference.
    """
    n = queries.shape[0]
    hidden = ad.relu(_affine(p, "loc.fc1", queries))
    hidden = ad.relu(_affine(p, "loc.fc2", hidden))
    raw = _affine(p, "loc.fc3", hidden)                      # [N, 2]
    d_center = ad.reshape(ad.slice_axis(raw, 1, 0, 1), (n,))
    d_width = ad.reshape(ad.slice_axis(raw, 1, 1, 2), (n,))
    center = ad.sigmoid(ad.add(_logit(refs), d_center))
    width = ad.sigmoid(d_width)
    half = ad.mul(width, 0.5)
    start = ad.clip(ad.add(center, ad.neg(half)), 0.0, 1.0)
    end = ad.clip(ad.add(center, half), 0.0, 1.0)
    return ad.concat([ad.reshape(start, (n, 1)), ad.reshape(end, (n, 1))], axis=1)


def confidence_head(p: dict, queries: Tensor) -> Tensor:
    n = queries.shape[0]
    return ad.sigmoid(ad.reshape(_affine(p, "conf", queries), (n,)))


@dataclass
class DecodeLayer:
    queries: Tensor          # [N, d]
    refs: Tensor             # [N]
    segments: Tensor         # [N, 2]
    confidence: Tensor       # [N]


@dataclass
class ForwardOutput:
    pyramid: FeaturePyramid
    layers: list             # DecodeLayer per decoder layer, last is final


def forward(p: dict, cfg: ModelConfig, frames: np.ndarray,
            person_feats: np.ndarray) -> ForwardOutput:
    pyramid = encode(p, cfg, frames)
    queries, refs = project_queries(p, cfg, person_feats)
    layers = [
        DecodeLayer(q, r, localization_head(p, q, r), confidence_head(p, q))
        for q, r in decode(p, cfg, pyramid, queries, refs)
    ]
    return ForwardOutput(pyramid, layers)


# ---------------------------------------------------------------------------
# caption decoding


def _lstm_step(p: dict, cfg: ModelConfig, x_t: Tensor, h: Tensor, c: Tensor):
    hh = cfg.lstm_hidden
    gates = ad.add_row(
        ad.add(ad.matmul(x_t, p["cap.lstm.wx"]), ad.matmul(h, p["cap.lstm.wh"])),
        p["cap.lstm.b"])
    i = ad.sigmoid(ad.slice_axis(gates, 1, 0, hh))
    f = ad.sigmoid(ad.slice_axis(gates, 1, hh, 2 * hh))
    g = ad.tanh(ad.slice_axis(gates, 1, 2 * hh, 3 * hh))
    o = ad.sigmoid(ad.slice_axis(gates, 1, 3 * hh, 4 * hh))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _caption_rollout(p: dict, cfg: ModelConfig, pyramid: FeaturePyramid,
                     queries: Tensor, refs: Tensor, inputs: np.ndarray):
    """Teacher-forced steps; inputs [P, T] int.  Returns logits per step."""
    n = queries.shape[0]
    values = dsa_values(pyramid, _dsa_params(p, cfg))
    h = ad.constant(np.zeros((n, cfg.lstm_hidden)))
    c = ad.constant(np.zeros((n, cfg.lstm_hidden)))
    step_logits = []
    for t in range(inputs.shape[1]):
        emb = ad.gather_rows(p["cap.embed"], inputs[:, t])
        z = dsa(h, queries, refs, pyramid, _dsa_params(p, cfg), values=values)
        x_t = ad.concat([z, queries, emb], axis=1)
        h, c = _lstm_step(p, cfg, x_t, h, c)
        step_logits.append(_affine(p, "cap.out", h))         # [P, V]
    return step_logits


def caption_logits(p: dict, cfg: ModelConfig, pyramid: FeaturePyramid,
                   queries: Tensor, refs: Tensor, token_rows: list) -> list:
    """Teacher-forced word logits for full token rows (with sentence marks).

    Returns per row (logits [T_i, V], targets [T_i], None) ready for the
    cross-entropy term; rows shorter than the longest are left-aligned.
    """
    if queries.shape[0] != len(token_rows):
        raise ContractError(f"{queries.shape[0]} queries for {len(token_rows)} rows")
    if any(len(row) < 2 for row in token_rows):
        raise ContractError("token rows need at least a start and end mark")
    n = len(token_rows)
    t_max = max(len(row) - 1 for row in token_rows)
    inputs = np.full((n, t_max), PAD, dtype=np.int64)
    for i, row in enumerate(token_rows):
        inputs[i, :len(row) - 1] = row[:-1]
    step_logits = _caption_rollout(p, cfg, pyramid, queries, refs, inputs)
    out = []
    for i, row in enumerate(token_rows):
        t_i = len(row) - 1
        rows = [ad.slice_axis(step_logits[t], 0, i, i + 1) for t in range(t_i)]
        logits = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        out.append((logits, np.asarray(row[1:], dtype=np.int64), None))
    return out


def greedy_captions(p: dict, cfg: ModelConfig, pyramid: FeaturePyramid,
                    queries: Tensor, refs: Tensor) -> list:
    """Argmax decoding until the end mark or the length cap; returns id rows."""
    n = queries.shape[0]
    if n == 0:
        return []
    values = dsa_values(pyramid, _dsa_params(p, cfg))
    h = ad.constant(np.zeros((n, cfg.lstm_hidden)))
    c = ad.constant(np.zeros((n, cfg.lstm_hidden)))
    prev = np.full(n, BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    rows: list[list[int]] = [[] for _ in range(n)]
    for _ in range(cfg.max_caption_len):
        emb = ad.gather_rows(p["cap.embed"], prev)
        z = dsa(h, queries, refs, pyramid, _dsa_params(p, cfg), values=values)
        x_t = ad.concat([z, queries, emb], axis=1)
        h, c = _lstm_step(p, cfg, x_t, h, c)
        logits = _affine(p, "cap.out", h).data
        nxt = np.argmax(logits, axis=1)
        for i in range(n):
            if done[i]:
                nxt[i] = EOS
            elif nxt[i] == EOS:
                done[i] = True
            else:
                rows[i].append(int(nxt[i]))
        if done.all():
            break
        prev = nxt
    return rows


def beam_captions(p: dict, cfg: ModelConfig, pyramid: FeaturePyramid,
                  queries: Tensor, refs: Tensor) -> list:
    """Per-query beam search over word sequences by summed log-probability."""
    width = cfg.beam_width
    out = []
    for i in range(queries.shape[0]):
        q_i = ad.slice_axis(queries, 0, i, i + 1)
        r_i = ad.slice_axis(refs, 0, i, i + 1)
        values = dsa_values(pyramid, _dsa_params(p, cfg))
        zero = ad.constant(np.zeros((1, cfg.lstm_hidden)))
        beams = [(0.0, [], BOS, zero, zero, False)]
        for _ in range(cfg.max_caption_len):
            if all(b[5] for b in beams):
                break
            grown = []
            for logp, toks, prev, h, c, finished in beams:
                if finished:
                    grown.append((logp, toks, prev, h, c, True))
                    continue
                emb = ad.gather_rows(p["cap.embed"], np.array([prev]))
                z = dsa(h, q_i, r_i, pyramid, _dsa_params(p, cfg), values=values)
                h2, c2 = _lstm_step(p, cfg, ad.concat([z, q_i, emb], axis=1), h, c)
                logits = _affine(p, "cap.out", h2)
                logprob = ad.log_softmax(logits, axis=-1).data[0]
                top = np.argsort(-logprob)[:width]
                for w in top:
                    w = int(w)
                    if w == EOS:
                        grown.append((logp + logprob[w], toks, w, h2, c2, True))
                    else:
                        grown.append((logp + logprob[w], toks + [w], w, h2, c2, False))
            grown.sort(key=lambda b: (-b[0], b[1]))
            beams = grown[:width]
        out.append(list(beams[0][1]))
    return out


# ---------------------------------------------------------------------------
# loss plumbing and inference


def video_loss(p: dict, cfg: ModelConfig, frames: np.ndarray,
               person_feats: np.ndarray, gt_segments: np.ndarray,
               token_rows: list, loss_w: LossWeights = LossWeights(),
               match_w: MatchWeights = MatchWeights()):
    """Set criterion over all decoder layers for one video."""
    fwd = forward(p, cfg, frames, person_feats)

    def captions_for_layer(layer: DecodeLayer):
        def captions_for(pairs):
            idx = np.array([i for i, _ in pairs], dtype=np.int64)
            rows = [token_rows[j] for _, j in pairs]
            q_sel = ad.gather_rows(layer.queries, idx)
            r_sel = ad.gather_rows(layer.refs, idx)
            return caption_logits(p, cfg, fwd.pyramid, q_sel, r_sel, rows)
        return captions_for

    layer_preds = [
        LayerPrediction(layer.segments, layer.confidence,
                        captions_for_layer(layer) if token_rows else None)
        for layer in fwd.layers
    ]
    loss, assignments = set_loss(layer_preds, gt_segments, loss_w, match_w)
    return loss, assignments, fwd


@dataclass(frozen=True)
class PredictedEvent:
    start_s: float
    end_s: float
    confidence: float
    caption: str


def infer_video(p: dict, cfg: ModelConfig, vocab: Vocab, frames: np.ndarray,
                person_feats: np.ndarray, duration_s: float) -> list:
    """Final-layer predictions above the confidence cut, sorted by start."""
    if p and not isinstance(next(iter(p.values())), Tensor):
        p = params_to_tensors(p, requires_grad=False)
    fwd = forward(p, cfg, frames, person_feats)
    final = fwd.layers[-1]
    conf = final.confidence.data
    keep = np.flatnonzero(conf >= cfg.confidence_threshold)
    if keep.size == 0:
        return []
    queries = ad.gather_rows(final.queries, keep)
    refs = ad.gather_rows(final.refs, keep)
    decoder = beam_captions if cfg.beam_width > 1 else greedy_captions
    rows = decoder(p, cfg, fwd.pyramid, queries, refs)
    segments = final.segments.data[keep] * duration_s
    events = [
        PredictedEvent(float(seg[0]), float(seg[1]), float(conf[i]),
                       " ".join(vocab.decode(row)))
        for seg, i, row in zip(segments, keep, rows)
    ]
    events.sort(key=lambda e: (e.start_s, e.end_s))
    return events


def serialize_predictions(video_id: str, events: list) -> str:
    doc = {
        "video_id": video_id,
        "predictions": [
            {"start_s": e.start_s, "end_s": e.end_s,
             "confidence": e.confidence, "caption": e.caption}
            for e in events
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_predictions(text: str) -> tuple:
    doc = json.loads(text)
    events = [PredictedEvent(float(e["start_s"]), float(e["end_s"]),
                             float(e["confidence"]), e["caption"])
              for e in doc["predictions"]]
    return doc["video_id"], events


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Per-video gradient steps with Adam; everything derives from the seed.

    One step is one video: forward, set criterion over all decoder layers,
    backward, parameter update.  Video order reshuffles every epoch from a
    seeded stream, so runs with equal seeds are bit-identical.
    """

    def __init__(self, samples, cfg: ModelConfig, seed: int = 0,
                 vocab: Vocab | None = None):
        if not samples:
            raise ContractError("trainer needs at least one video")
        self.cfg = cfg
        self.samples = list(samples)
        if vocab is None:
            captions = [p.caption for s in self.samples
                        for p in s.annotation.persons]
            vocab = Vocab.from_texts(captions)
        self.vocab = vocab
        feature_dim = self.samples[0].frames.shape[1]
        self.params = init_params(cfg, feature_dim, len(vocab), seed)
        self.state = adam_init(self.params)
        self._order_rng = np.random.default_rng([seed, _ORDER_STREAM])
        self._queue: list[int] = []
        self.loss_history: list[float] = []
        self._prepared = [self._prepare(s) for s in self.samples]

    def _prepare(self, sample):
        ann = sample.annotation
        gt = np.array([ann.segment_of(p) for p in ann.persons], dtype=np.float64)
        rows = [self.vocab.encode(p.caption) for p in ann.persons]
        return sample.frames, sample.person_feats, gt.reshape(-1, 2), rows

    def step(self) -> float:
        if not self._queue:
            self._queue = list(self._order_rng.permutation(len(self.samples)))
        idx = int(self._queue.pop(0))
        frames, person_feats, gt, rows = self._prepared[idx]
        tensors = params_to_tensors(self.params)
        with ad.Tape():
            loss, _, _ = video_loss(tensors, self.cfg, frames, person_feats,
                                    gt, rows)
            ad.backward(loss)
        grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
        self.params, self.state = adam_step(self.params, grads, self.state,
                                            self.cfg.learning_rate)
        value = float(loss.data)
        self.loss_history.append(value)
        return value

    def train(self, n_steps: int) -> list:
        for _ in range(n_steps):
            self.step()
        return self.loss_history

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.hcpt", self.params)
        self.vocab.save(out / "vocab.txt")
        (out / "config.txt").write_text(config_to_text(self.cfg))
        (out / "loss_history.txt").write_text(
            "".join(f"{v!r}\n" for v in self.loss_history))


def load_model(model_dir) -> tuple:
    """Read back (params, cfg, vocab) from a trainer save directory."""
    root = Path(model_dir)
    params = load_checkpoint(root / "model.hcpt")
    cfg = config_from_text((root / "config.txt").read_text())
    vocab = Vocab.load(root / "vocab.txt")
    return params, cfg, vocab
