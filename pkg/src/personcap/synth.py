"""Synthetic person-caption corpora with recoverable structure.

Each video gets a handful of persons, each with an activity segment, a box,
and a templated caption ("the person in <color> clothes <phrase> then
<phrase>").  Frame features are a fixed random projection of the sum of the
active persons' attribute vectors plus gaussian noise, so person count,
timing, and caption content stay linearly decodable.  Person features
project the track-averaged latent through the same map.

Everything derives from the corpus seed: video v uses default_rng([seed, v])
and the projection uses its own stream, so runs are byte-reproducible.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import (ANOMALY_LABELS, PALETTE, VideoAnnotation,
                         PersonRecord, save_annotation, save_features,
                         load_annotation, load_features)
from .errors import ContractError
from .geometry import BBox

NORMAL_PHRASES = (
    "walks forward", "walks to the left", "walks to the right",
    "turns around", "turns back",
    "looks around", "looks at the camera",
    "stands still",
)
ANOMALY_PHRASES = ("fights with another person", "runs away quickly")
PHRASES = NORMAL_PHRASES + ANOMALY_PHRASES

# attribute vector layout: count probe, endpoints, then one-hot blocks
_A_COUNT = 0
_A_APPEAR = 1
_A_DISAPPEAR = 2
_A_COLOR = 3                      # 30 slots
_A_P1 = _A_COLOR + 30             # len(PHRASES) slots
_A_P2 = _A_P1 + len(PHRASES)
ATTR_DIM = _A_P2 + len(PHRASES)

_PROJECTION_STREAM = 7001


@dataclass(frozen=True)
class SynthConfig:
    n_videos: int = 20
    seed: int = 0
    feature_dim: int = 128
    fps: float = 4.0
    duration_range: tuple = (8.0, 16.0)
    persons_range: tuple = (4, 8)
    frame_width: int = 320
    frame_height: int = 240
    noise_sigma: float = 0.05
    anomaly_fraction: float = 0.15
    split_fractions: tuple = (0.577, 0.203, 0.220)

    def __post_init__(self):
        if self.n_videos < 1:
            raise ContractError(f"n_videos must be positive, got {self.n_videos}")
        lo, hi = self.persons_range
        if not 1 <= lo <= hi <= 30:
            raise ContractError(f"persons_range must fit 1..30, got {self.persons_range}")
        lo, hi = self.duration_range
        if not 2.0 <= lo <= hi:
            raise ContractError(f"bad duration_range {self.duration_range}")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ContractError(f"bad anomaly_fraction {self.anomaly_fraction}")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ContractError(f"split_fractions must sum to 1, got {self.split_fractions}")


def synth_config_to_text(cfg: SynthConfig) -> str:
    """Flat key=value lines; tuple fields join with commas."""
    lines = []
    for field in dataclasses.fields(SynthConfig):
        value = getattr(cfg, field.name)
        if isinstance(value, tuple):
            value = ",".join(f"{v:g}" for v in value)
        lines.append(f"{field.name}={value}\n")
    return "".join(lines)


def synth_config_from_text(text: str, **overrides) -> SynthConfig:
    kinds = {f.name: f.type for f in dataclasses.fields(SynthConfig)}
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractError(f"config lines must be key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ContractError(f"unknown config key {key!r}")
        try:
            if kinds[key] in ("tuple", tuple):
                parts = [float(v) for v in raw.split(",")]
                if key == "persons_range":
                    parts = [int(v) for v in parts]
                values[key] = tuple(parts)
            elif kinds[key] in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = int(raw)
        except ValueError:
            raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from None
    values.update(overrides)
    return SynthConfig(**values)


def projection_matrix(cfg: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _PROJECTION_STREAM])
    return rng.standard_normal((ATTR_DIM, cfg.feature_dim)) / math.sqrt(ATTR_DIM)


def _quantize_down(value: float, fps: float) -> float:
    return math.floor(value * fps) / fps


def _attribute_vector(color_index: int, p1: int, p2: int,
                      appear_n: float, disappear_n: float) -> np.ndarray:
    v = np.zeros(ATTR_DIM)
    v[_A_COUNT] = 1.0
    v[_A_APPEAR] = appear_n
    v[_A_DISAPPEAR] = disappear_n
    v[_A_COLOR + color_index] = 1.0
    v[_A_P1 + p1] = 1.0
    v[_A_P2 + p2] = 1.0
    return v


def generate_video(cfg: SynthConfig, index: int):
    """Build one video: (annotation, frame features, person features).

    Features are float32; all timing lands on the frame grid so serialized
    floats are exact binary fractions.
    """
    rng = np.random.default_rng([cfg.seed, index])
    lo, hi = cfg.duration_range
    quarters = int(rng.integers(round(lo * cfg.fps), round(hi * cfg.fps) + 1))
    duration = quarters / cfg.fps
    n_frames = quarters
    n_persons = int(rng.integers(cfg.persons_range[0], cfg.persons_range[1] + 1))

    anomaly = rng.random() < cfg.anomaly_fraction
    scene = str(rng.choice(ANOMALY_LABELS)) if anomaly else "normal"

    drafts = []
    used = set()
    for _ in range(n_persons):
        appear = _quantize_down(float(rng.uniform(0.0, duration - 2.0)), cfg.fps)
        max_len = duration - appear
        length = max(1.0, _quantize_down(float(rng.uniform(1.0, max_len)), cfg.fps))
        disappear = appear + length
        first_frame = int(round(appear * cfg.fps))
        while True:
            x = int(rng.integers(0, cfg.frame_width - 60))
            if (first_frame, x) not in used:
                used.add((first_frame, x))
                break
        box = BBox(x, int(rng.integers(0, cfg.frame_height - 100)),
                   int(rng.integers(40, 61)), int(rng.integers(80, 101)))
        p1, p2 = (int(i) for i in rng.choice(len(NORMAL_PHRASES), size=2, replace=False))
        if anomaly:
            p2 = len(NORMAL_PHRASES) + int(rng.integers(len(ANOMALY_PHRASES)))
        drafts.append((first_frame, x, appear, disappear, box, p1, p2))

    drafts.sort(key=lambda d: (d[0], d[1]))
    persons = []
    attrs = np.zeros((n_persons, ATTR_DIM))
    spans = []
    for i, (first_frame, _, appear, disappear, box, p1, p2) in enumerate(drafts):
        color_index = i % 30
        caption = (f"the person in {PALETTE[color_index]} clothes "
                   f"{PHRASES[p1]} then {PHRASES[p2]}")
        persons.append(PersonRecord(
            person_index=i + 1, color_index=color_index, first_frame=first_frame,
            bbox=box, appear_s=appear, disappear_s=disappear, caption=caption))
        attrs[i] = _attribute_vector(color_index, p1, p2,
                                     appear / duration, disappear / duration)
        spans.append((first_frame, int(math.ceil(disappear * cfg.fps)) - 1))

    ann = VideoAnnotation(
        video_id=f"synth_{index:04d}", fps=cfg.fps,
        frame_width=cfg.frame_width, frame_height=cfg.frame_height,
        duration_s=duration, scene_label=scene, persons=tuple(persons))

    active = np.zeros((n_frames, n_persons))
    for i, (first, last) in enumerate(spans):
        active[first:last + 1, i] = 1.0
    latents = active @ attrs                                  # [T, ATTR_DIM]
    track_latents = np.stack([
        latents[first:last + 1].mean(axis=0) for first, last in spans])

    w = projection_matrix(cfg)
    frames = latents @ w + cfg.noise_sigma * rng.standard_normal((n_frames, cfg.feature_dim))
    person_feats = track_latents @ w + cfg.noise_sigma * rng.standard_normal(
        (n_persons, cfg.feature_dim))
    return ann, frames.astype(np.float32), person_feats.astype(np.float32)


def split_ids(ids, fractions, seed: int) -> dict:
    """Seeded shuffle, then contiguous slices sized by rounded fractions.

    The first two splits round to the nearest count; the last takes the
    remainder, so the three always partition the input.
    """
    ids = list(ids)
    if len(fractions) != 3:
        raise ContractError(f"need 3 fractions, got {len(fractions)}")
    rng = np.random.default_rng([seed, 424243])
    order = list(rng.permutation(len(ids)))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    if n_train + n_val > n:
        raise ContractError(f"fractions {fractions} overflow {n} items")
    return {"train": shuffled[:n_train],
            "val": shuffled[n_train:n_train + n_val],
            "test": shuffled[n_train + n_val:]}


def generate_corpus(cfg: SynthConfig, out_dir, workers: int = 1) -> list[str]:
    """Write annotations, feature files, and split manifests; return ids.

    Each video derives from its own seed stream, so building them on a
    thread pool changes nothing about the bytes written; ids are collected
    in index order either way.
    """
    out = Path(out_dir)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = list(pool.map(lambda v: generate_video(cfg, v),
                                  range(cfg.n_videos)))
    else:
        built = [generate_video(cfg, v) for v in range(cfg.n_videos)]
    ids = []
    for ann, frames, person_feats in built:
        save_annotation(ann, out / "annotations" / f"{ann.video_id}.json")
        save_features(out / "features" / f"{ann.video_id}.frames.hcft", frames)
        save_features(out / "features" / f"{ann.video_id}.persons.hcft", person_feats)
        ids.append(ann.video_id)
    splits = split_ids(ids, cfg.split_fractions, cfg.seed)
    for name, members in splits.items():
        (out / "splits" / f"{name}.txt").write_text(
            "".join(m + "\n" for m in members))
    return ids


@dataclass(frozen=True)
class VideoSample:
    annotation: VideoAnnotation
    frames: np.ndarray            # [T, C] float64
    person_feats: np.ndarray      # [N, C] float64


def corpus_ids(corpus_dir, split: str | None = None) -> list[str]:
    root = Path(corpus_dir)
    if split is None or split == "all":
        return sorted(p.stem for p in (root / "annotations").glob("*.json"))
    manifest = root / "splits" / f"{split}.txt"
    if not manifest.exists():
        raise ContractError(f"no split manifest {manifest}")
    return [ln for ln in manifest.read_text().splitlines() if ln]


def load_corpus(corpus_dir, split: str | None = None) -> list[VideoSample]:
    root = Path(corpus_dir)
    samples = []
    for vid in corpus_ids(corpus_dir, split):
        ann = load_annotation(root / "annotations" / f"{vid}.json")
        frames = load_features(root / "features" / f"{vid}.frames.hcft")
        person_feats = load_features(root / "features" / f"{vid}.persons.hcft")
        if frames.ndim != 2 or person_feats.ndim != 2:
            raise ContractError(f"{vid}: feature files must hold 2-D arrays")
        if person_feats.shape[0] != len(ann.persons):
            raise ContractError(
                f"{vid}: {person_feats.shape[0]} person feature rows for "
                f"{len(ann.persons)} annotated persons")
        samples.append(VideoSample(ann, frames.astype(np.float64),
                                   person_feats.astype(np.float64)))
    return samples
