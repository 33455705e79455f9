"""Person-level video annotations: schema, validation, and serialization.

A video document records per-person segments, boxes, and captions together
with scene-level fields.  The JSON serialization is canonical (fixed key
order, two-space indent, trailing newline) so parse -> serialize reproduces
a well-formed file byte for byte.

Feature tensors travel in a small binary container (magic ``HCFT``) holding
one little-endian row-major array, float32 or float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import _Reader
from .errors import ContractError, FormatError, ValidationError
from .geometry import BBox
from .text import tokenize

# Wardrobe color names indexed by (person_index - 1) % 30.
PALETTE = (
    "vivid yellow", "sky blue", "emerald green", "purple", "crimson",
    "burnt orange", "teal", "magenta", "olive green", "navy blue",
    "coral", "charcoal grey", "mint green", "mustard", "lavender",
    "brick red", "turquoise", "salmon", "forest green", "plum",
    "beige", "maroon", "ice blue", "copper", "rose pink",
    "slate grey", "lime green", "chocolate brown", "indigo", "pearl white",
)

ANOMALY_LABELS = (
    "abuse", "arrest", "arson", "assault", "burglary", "explosion",
    "fighting", "road_accident", "robbery", "shooting", "shoplifting",
    "stealing", "vandalism",
)
SCENE_LABELS = ("normal",) + ANOMALY_LABELS

CAPTION_TOKENS_HARD = (1, 120)
CAPTION_TOKENS_SOFT = (15, 65)

VERB_LEXICON = {
    "walk": ("walk", "walks", "walking", "walked"),
    "turn": ("turn", "turns", "turning", "turned"),
    "look": ("look", "looks", "looking", "looked"),
    "stand": ("stand", "stands", "standing", "stood"),
}


@dataclass(frozen=True)
class PersonRecord:
    person_index: int          # 1-based, consecutive
    color_index: int           # always (person_index - 1) % 30
    first_frame: int
    bbox: BBox                 # pixel box at first appearance
    appear_s: float
    disappear_s: float
    caption: str


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    fps: float
    frame_width: int
    frame_height: int
    duration_s: float
    scene_label: str
    persons: tuple

    def segment_of(self, person: PersonRecord) -> tuple[float, float]:
        """Person activity as a normalized [0, 1] segment."""
        return (person.appear_s / self.duration_s,
                person.disappear_s / self.duration_s)


# ---------------------------------------------------------------------------
# validation

_TOP_KEYS = ("video_id", "fps", "frame_width", "frame_height", "duration_s",
             "scene_label", "persons")
_PERSON_KEYS = ("person_index", "color_index", "first_frame", "bbox",
                "appear_s", "disappear_s", "caption")
_BBOX_KEYS = ("x", "y", "w", "h")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (_is_int(v) or isinstance(v, float)) and math.isfinite(v)


def validate_document(doc) -> tuple[list[ValidationError], list[str]]:
    """Check a parsed JSON document.  Returns (errors, warnings).

    Every error carries the dotted path of the offending field; checks run
    in a fixed order so diagnostics are reproducible.
    """
    errors: list[ValidationError] = []
    warnings: list[str] = []

    def bad(path, message):
        errors.append(ValidationError(path, message))

    if not isinstance(doc, dict):
        bad("$", f"document must be an object, got {type(doc).__name__}")
        return errors, warnings
    for key in _TOP_KEYS:
        if key not in doc:
            bad(key, "missing required field")
    for key in doc:
        if key not in _TOP_KEYS:
            bad(key, "unknown field")
    if errors:
        return errors, warnings

    if not isinstance(doc["video_id"], str) or not doc["video_id"]:
        bad("video_id", "must be a non-empty string")
    if not _is_num(doc["fps"]) or doc["fps"] <= 0:
        bad("fps", f"must be a positive number, got {doc['fps']!r}")
    for key in ("frame_width", "frame_height"):
        if not _is_int(doc[key]) or doc[key] <= 0:
            bad(key, f"must be a positive integer, got {doc[key]!r}")
    if not _is_num(doc["duration_s"]) or doc["duration_s"] <= 0:
        bad("duration_s", f"must be a positive number, got {doc['duration_s']!r}")
    if doc["scene_label"] not in SCENE_LABELS:
        bad("scene_label", f"unknown label {doc['scene_label']!r}")
    if not isinstance(doc["persons"], list):
        bad("persons", "must be a list")
    if errors:
        return errors, warnings

    width, height = doc["frame_width"], doc["frame_height"]
    duration = doc["duration_s"]
    for i, person in enumerate(doc["persons"]):
        at = f"persons[{i}]"
        if not isinstance(person, dict):
            bad(at, "must be an object")
            continue
        missing = [k for k in _PERSON_KEYS if k not in person]
        for key in missing:
            bad(f"{at}.{key}", "missing required field")
        for key in person:
            if key not in _PERSON_KEYS:
                bad(f"{at}.{key}", "unknown field")
        if missing:
            continue

        if not _is_int(person["person_index"]) or person["person_index"] != i + 1:
            bad(f"{at}.person_index",
                f"must be {i + 1} (1-based position), got {person['person_index']!r}")
        if not _is_int(person["color_index"]) or person["color_index"] != i % 30:
            bad(f"{at}.color_index",
                f"must equal (person_index - 1) mod 30 = {i % 30}, "
                f"got {person['color_index']!r}")
        if not _is_int(person["first_frame"]) or person["first_frame"] < 0:
            bad(f"{at}.first_frame", f"must be a non-negative integer, "
                                     f"got {person['first_frame']!r}")

        box = person["bbox"]
        if not isinstance(box, dict) or sorted(box) != sorted(_BBOX_KEYS):
            bad(f"{at}.bbox", f"must be an object with keys {_BBOX_KEYS}")
        else:
            ok = True
            for key in _BBOX_KEYS:
                if not _is_int(box[key]):
                    bad(f"{at}.bbox.{key}", f"must be an integer, got {box[key]!r}")
                    ok = False
            if ok:
                if box["x"] < 0 or box["y"] < 0:
                    bad(f"{at}.bbox.x" if box["x"] < 0 else f"{at}.bbox.y",
                        "corner outside the frame")
                if box["w"] <= 0 or box["h"] <= 0:
                    bad(f"{at}.bbox.w" if box["w"] <= 0 else f"{at}.bbox.h",
                        "extent must be positive")
                elif box["x"] + box["w"] > width:
                    bad(f"{at}.bbox.w", f"box right edge {box['x'] + box['w']} "
                                        f"exceeds frame width {width}")
                elif box["y"] + box["h"] > height:
                    bad(f"{at}.bbox.h", f"box bottom edge {box['y'] + box['h']} "
                                        f"exceeds frame height {height}")

        appear, disappear = person["appear_s"], person["disappear_s"]
        if not _is_num(appear) or appear < 0:
            bad(f"{at}.appear_s", f"must be a non-negative number, got {appear!r}")
        elif not _is_num(disappear):
            bad(f"{at}.disappear_s", f"must be a number, got {disappear!r}")
        elif disappear <= appear:
            bad(f"{at}.disappear_s",
                f"must exceed appear_s {appear!r}, got {disappear!r}")
        elif disappear > duration:
            bad(f"{at}.disappear_s",
                f"{disappear!r} exceeds video duration {duration!r}")

        caption = person["caption"]
        if not isinstance(caption, str):
            bad(f"{at}.caption", f"must be a string, got {type(caption).__name__}")
        else:
            n_tok = len(tokenize(caption))
            lo, hi = CAPTION_TOKENS_HARD
            if not lo <= n_tok <= hi:
                bad(f"{at}.caption", f"has {n_tok} tokens, outside [{lo}, {hi}]")
            else:
                lo, hi = CAPTION_TOKENS_SOFT
                if not lo <= n_tok <= hi:
                    warnings.append(f"{at}.caption: {n_tok} tokens, "
                                    f"outside the usual [{lo}, {hi}]")

    # appearance ordering; ties broken by the leftmost box
    persons = doc["persons"]
    for i in range(1, len(persons)):
        a, b = persons[i - 1], persons[i]
        if not (isinstance(a, dict) and isinstance(b, dict)):
            continue
        if not all(_is_int(p.get("first_frame")) for p in (a, b)):
            continue
        if b["first_frame"] < a["first_frame"]:
            bad(f"persons[{i}].first_frame",
                f"persons must be ordered by first_frame; "
                f"{b['first_frame']} follows {a['first_frame']}")
        elif b["first_frame"] == a["first_frame"]:
            ax = a.get("bbox", {}).get("x") if isinstance(a.get("bbox"), dict) else None
            bx = b.get("bbox", {}).get("x") if isinstance(b.get("bbox"), dict) else None
            if _is_int(ax) and _is_int(bx) and bx < ax:
                bad(f"persons[{i}].bbox.x",
                    f"first_frame tie must order by bbox.x; {bx} follows {ax}")
    return errors, warnings


# ---------------------------------------------------------------------------
# parse / serialize


def parse_annotation(text: str, label: str = "<string>") -> VideoAnnotation:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{label}: not valid JSON: {e}") from None
    errors, _ = validate_document(doc)
    if errors:
        raise errors[0]
    persons = tuple(
        PersonRecord(
            person_index=p["person_index"],
            color_index=p["color_index"],
            first_frame=p["first_frame"],
            bbox=BBox(p["bbox"]["x"], p["bbox"]["y"], p["bbox"]["w"], p["bbox"]["h"]),
            appear_s=float(p["appear_s"]),
            disappear_s=float(p["disappear_s"]),
            caption=p["caption"],
        )
        for p in doc["persons"]
    )
    return VideoAnnotation(
        video_id=doc["video_id"],
        fps=float(doc["fps"]),
        frame_width=doc["frame_width"],
        frame_height=doc["frame_height"],
        duration_s=float(doc["duration_s"]),
        scene_label=doc["scene_label"],
        persons=persons,
    )


def load_annotation(path: str | Path) -> VideoAnnotation:
    return parse_annotation(Path(path).read_text(), label=str(path))


def serialize_annotation(ann: VideoAnnotation) -> str:
    doc = {
        "video_id": ann.video_id,
        "fps": ann.fps,
        "frame_width": ann.frame_width,
        "frame_height": ann.frame_height,
        "duration_s": ann.duration_s,
        "scene_label": ann.scene_label,
        "persons": [
            {
                "person_index": p.person_index,
                "color_index": p.color_index,
                "first_frame": p.first_frame,
                "bbox": {"x": int(p.bbox.x), "y": int(p.bbox.y),
                         "w": int(p.bbox.w), "h": int(p.bbox.h)},
                "appear_s": p.appear_s,
                "disappear_s": p.disappear_s,
                "caption": p.caption,
            }
            for p in ann.persons
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def save_annotation(ann: VideoAnnotation, path: str | Path) -> None:
    Path(path).write_text(serialize_annotation(ann))


# ---------------------------------------------------------------------------
# feature container

FEATURE_MAGIC = b"HCFT"
FEATURE_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_features(path: str | Path, array: np.ndarray) -> None:
    """Write one array; dtype must already be float32 or float64."""
    arr = np.asarray(array)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ContractError(f"feature dtype must be float32 or float64, got {arr.dtype}")
    arr = arr.astype(_DTYPES[code], order="C")  # keeps 0-d arrays 0-d
    parts = [FEATURE_MAGIC,
             struct.pack("<HBH", FEATURE_VERSION, code, arr.ndim),
             struct.pack(f"<{arr.ndim}I", *arr.shape),
             arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(4) != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
    version, code, ndim = r.unpack("<HBH")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dims = r.unpack(f"<{ndim}I")
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    itemsize = np.dtype(_DTYPES[code]).itemsize
    payload = r.take(itemsize * n)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return np.frombuffer(payload, dtype=_DTYPES[code]).reshape(dims).copy()


# ---------------------------------------------------------------------------
# track clips


@dataclass(frozen=True)
class TrackClip:
    person_index: int
    bbox: BBox
    frames: tuple            # sampled frame indices, ascending within budget


def crop_tracks(ann: VideoAnnotation, frame_count: int,
                budget: int | None = None) -> list[TrackClip]:
    """Per-person clip descriptors over the frames each person is active.

    A budget of k keeps k frames at indices floor(i * n / k) of the track
    (repeats allowed when the track is shorter than the budget).
    """
    if frame_count <= 0:
        raise ContractError(f"frame_count must be positive, got {frame_count}")
    if budget is not None and budget <= 0:
        raise ContractError(f"budget must be positive, got {budget}")
    clips = []
    for p in ann.persons:
        start = p.first_frame
        last = math.ceil(p.disappear_s * ann.fps) - 1
        if start >= frame_count or last >= frame_count or last < start:
            raise ContractError(
                f"person {p.person_index}: frames [{start}, {last}] outside "
                f"video of {frame_count} frames")
        n = last - start + 1
        if budget is None:
            frames = tuple(range(start, last + 1))
        else:
            frames = tuple(start + (i * n) // budget for i in range(budget))
        clips.append(TrackClip(p.person_index, p.bbox, frames))
    return clips


# ---------------------------------------------------------------------------
# corpus statistics


@dataclass(frozen=True)
class CorpusStats:
    video_count: int
    person_count: int
    caption_token_total: int
    caption_token_mean: float
    caption_token_min: int
    caption_token_max: int
    persons_per_video: dict
    scene_counts: dict
    verb_counts: dict


def corpus_stats(annotations) -> CorpusStats:
    anns = list(annotations)
    if not anns:
        raise ContractError("no annotations to summarize")
    lengths = []
    persons_hist: dict[int, int] = {}
    scenes: dict[str, int] = {}
    verbs = {base: 0 for base in VERB_LEXICON}
    inflection_of = {form: base for base, forms in VERB_LEXICON.items()
                     for form in forms}
    total_persons = 0
    for ann in anns:
        n = len(ann.persons)
        total_persons += n
        persons_hist[n] = persons_hist.get(n, 0) + 1
        scenes[ann.scene_label] = scenes.get(ann.scene_label, 0) + 1
        for p in ann.persons:
            toks = tokenize(p.caption)
            lengths.append(len(toks))
            for tok in toks:
                base = inflection_of.get(tok)
                if base is not None:
                    verbs[base] += 1
    total = sum(lengths)
    return CorpusStats(
        video_count=len(anns),
        person_count=total_persons,
        caption_token_total=total,
        caption_token_mean=total / len(lengths) if lengths else 0.0,
        caption_token_min=min(lengths) if lengths else 0,
        caption_token_max=max(lengths) if lengths else 0,
        persons_per_video=dict(sorted(persons_hist.items())),
        scene_counts=dict(sorted(scenes.items())),
        verb_counts=verbs,
    )


def render_stats(stats: CorpusStats) -> str:
    lines = [
        f"videos {stats.video_count}",
        f"persons {stats.person_count}",
        f"caption tokens total {stats.caption_token_total} "
        f"mean {stats.caption_token_mean:.2f} "
        f"min {stats.caption_token_min} max {stats.caption_token_max}",
        "persons per video: " + ", ".join(f"{k}: {v}" for k, v in
                                          stats.persons_per_video.items()),
        "scenes: " + ", ".join(f"{k}: {v}" for k, v in stats.scene_counts.items()),
        "verbs: " + ", ".join(f"{k}: {v}" for k, v in stats.verb_counts.items()),
    ]
    return "\n".join(lines) + "\n"
