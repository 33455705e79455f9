"""Caption and localization quality measures plus the evaluation report.

All scoring operates on token lists from text.tokenize so results do not
depend on caller-side preprocessing.  Scores avoid wall-clock state and
randomness entirely: the same inputs always render byte-identical reports.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .geometry import tiou, tiou_matrix
from .text import porter_stem, tokenize

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)
CAPTION_METRICS = ("bleu4", "meteor", "rouge_l", "cider_d")


def _tokens(caption) -> list[str]:
    if isinstance(caption, str):
        return tokenize(caption)
    return [str(t) for t in caption]


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# sentence-level measures


def bleu4(candidate, reference) -> float:
    """BLEU with up to 4-gram precision and brevity penalty.

    Orders longer than the candidate are dropped from the geometric mean.
    When any included precision is zero, counts for orders >= 2 get add-one
    smoothing; a zero unigram precision still yields 0.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    stats = []
    for n in range(1, 5):
        total = len(cand) - n + 1
        if total <= 0:
            continue
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in _ngram_counts(cand, n).items())
        stats.append((n, clipped, total))
    smooth = any(clipped == 0 for _, clipped, _ in stats)
    log_sum = 0.0
    for n, clipped, total in stats:
        if smooth and n >= 2:
            p = (clipped + 1) / (total + 1)
        else:
            p = clipped / total
        if p == 0.0:
            return 0.0
        log_sum += math.log(p)
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum / len(stats))


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """Longest-common-subsequence F-measure with recall weight beta."""
    cand, ref = _tokens(candidate), _tokens(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    b2 = beta * beta
    return (1.0 + b2) * p * r / (r + b2 * p)


def _greedy_align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Match candidate positions to the earliest free reference position.

    Two passes: surface forms first, Porter stems on whatever remains.
    Scanning left to right on both sides keeps chunk counts low and the
    result deterministic.
    """
    pairs: list[tuple[int, int]] = []
    cand_free = [True] * len(cand)
    ref_free = [True] * len(ref)
    for key in (lambda t: t, porter_stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(cand):
            if not cand_free[i]:
                continue
            want = key(tok)
            for j, rk in enumerate(ref_keys):
                if ref_free[j] and rk == want:
                    pairs.append((i, j))
                    cand_free[i] = False
                    ref_free[j] = False
                    break
    return sorted(pairs)


def meteor_lite(candidate, reference, alpha: float = 0.9,
                beta: float = 3.0, gamma: float = 0.5) -> float:
    """Unigram F-mean with a fragmentation penalty.

    Alignment is exact match then stem match, greedy from the left.  The
    penalty is gamma * (chunks / matches) ** beta; the F-mean weighs
    precision by alpha.
    """
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs = _greedy_align(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = p * r / (alpha * p + (1.0 - alpha) * r)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    penalty = gamma * (chunks / m) ** beta
    return fmean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# corpus-level consensus measure


def cider_d(items, n_max: int = 4, sigma: float = 6.0) -> float:
    """Consensus scoring by tf-idf n-gram cosine with a length gaussian.

    items: list of (candidate, references) where references is a list of
    caption texts or token lists.  Document frequencies come from the
    reference side of the whole batch; the result is the mean item score
    scaled to [0, 10].
    """
    if not items:
        raise ContractError("cider_d needs at least one item")
    parsed = []
    for cand, refs in items:
        parsed.append((_tokens(cand), [_tokens(r) for r in refs]))

    df: Counter = Counter()
    for _, refs in parsed:
        seen = set()
        for ref in refs:
            for n in range(1, n_max + 1):
                seen.update(_ngram_counts(ref, n))
        df.update(seen)
    log_n = math.log(max(1.0, float(len(parsed))))

    def vec(tokens: list[str], n: int) -> dict:
        out = {}
        for g, c in _ngram_counts(tokens, n).items():
            out[g] = c * (log_n - math.log(max(1.0, df[g])))
        return out

    total = 0.0
    for cand, refs in parsed:
        if not refs:
            continue
        cand_vecs = [vec(cand, n) for n in range(1, n_max + 1)]
        cand_norms = [sum(v * v for v in cv.values()) for cv in cand_vecs]
        item = 0.0
        for ref in refs:
            delta = float(len(cand) - len(ref))
            gauss = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            acc = 0.0
            for n in range(1, n_max + 1):
                rv = vec(ref, n)
                nr2 = sum(v * v for v in rv.values())
                nc2 = cand_norms[n - 1]
                if nc2 == 0.0 or nr2 == 0.0:
                    continue
                num = sum(min(cv, rv[g]) * rv[g]
                          for g, cv in cand_vecs[n - 1].items() if g in rv)
                acc += num / math.sqrt(nc2 * nr2) * gauss
            item += 10.0 * acc / n_max
        total += item / len(refs)
    return total / len(parsed)


# ---------------------------------------------------------------------------
# localization matching and the story-level score


def greedy_tiou_match(pred_segments, gt_segments) -> list[tuple[int, int, float]]:
    """One-to-one matching by descending overlap.

    Ties prefer the earlier ground-truth index, then the earlier prediction.
    Pairs with zero overlap never match.  The result does not depend on any
    threshold; callers filter by overlap afterwards.
    """
    pred = np.asarray(pred_segments, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        return []
    overlap = tiou_matrix(pred, gt)
    order = sorted(((float(overlap[i, j]), i, j)
                    for i in range(pred.shape[0]) for j in range(gt.shape[0])
                    if overlap[i, j] > 0.0),
                   key=lambda t: (-t[0], t[2], t[1]))
    pred_free = [True] * pred.shape[0]
    gt_free = [True] * gt.shape[0]
    pairs = []
    for t, i, j in order:
        if pred_free[i] and gt_free[j]:
            pairs.append((i, j, t))
            pred_free[i] = False
            gt_free[j] = False
    return pairs


def soda_c(preds, gts) -> float:
    """Story-level F-score over an order-preserving segment alignment.

    preds and gts are lists of ((start, end), caption).  Dynamic programming
    maximizes the summed overlap-weighted caption similarity over pairings
    that respect temporal order on both sides.
    """
    pred = sorted(((float(s), float(e), _tokens(c)) for (s, e), c in preds),
                  key=lambda t: (t[0], t[1]))
    gt = sorted(((float(s), float(e), _tokens(c)) for (s, e), c in gts),
                key=lambda t: (t[0], t[1]))
    n, m = len(pred), len(gt)
    if n == 0 and m == 0:
        return 1.0
    if n == 0 or m == 0:
        return 0.0
    score = np.zeros((n, m))
    for i, (ps, pe, pc) in enumerate(pred):
        for j, (gs, ge, gc) in enumerate(gt):
            t = float(tiou(np.array([ps, pe]), np.array([gs, ge])))
            if t > 0.0:
                score[i, j] = t * meteor_lite(pc, gc)
    best = np.zeros((n + 1, m + 1))
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best[i, j] = max(best[i - 1, j], best[i, j - 1],
                             best[i - 1, j - 1] + score[i - 1, j - 1])
    total = float(best[n, m])
    p = total / n
    r = total / m
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass
class VideoEval:
    video_id: str
    n_predictions: int
    n_references: int
    matched: dict
    scores: dict
    soda: float
    diagnostics: list = field(default_factory=list)


@dataclass
class EvalReport:
    thresholds: tuple
    videos: list
    scores: dict
    averages: dict
    matched: dict
    soda: float
    diagnostics: list = field(default_factory=list)


def _parse_side(entries):
    segs = np.zeros((len(entries), 2))
    caps = []
    for k, ((s, e), caption) in enumerate(entries):
        segs[k] = (float(s), float(e))
        caps.append(_tokens(caption))
    return segs, caps


def _eval_one_video(vid, p_entries, g_entries, thresholds) -> VideoEval:
    p_segs, p_caps = _parse_side(p_entries)
    g_segs, g_caps = _parse_side(g_entries)
    notes = []
    if not g_entries:
        notes.append(f"{vid}: no reference persons; all scores forced to 0")
    if not p_entries:
        notes.append(f"{vid}: no predictions")

    pairs = greedy_tiou_match(p_segs, g_segs)
    pair_scores = {
        (i, j): {"bleu4": bleu4(p_caps[i], g_caps[j]),
                 "meteor": meteor_lite(p_caps[i], g_caps[j]),
                 "rouge_l": rouge_l(p_caps[i], g_caps[j])}
        for i, j, _ in pairs
    }

    matched = {}
    scores = {name: {} for name in CAPTION_METRICS}
    for tau in thresholds:
        kept = [(i, j) for i, j, t in pairs if t >= tau]
        matched[tau] = len(kept)
        n_pred = len(p_entries)
        for name in ("bleu4", "meteor", "rouge_l"):
            if n_pred == 0:
                scores[name][tau] = 0.0
            else:
                scores[name][tau] = sum(pair_scores[p][name] for p in kept) / n_pred
        if n_pred == 0:
            scores["cider_d"][tau] = 0.0
        else:
            kept_ref = dict(kept)
            items = [(p_caps[i], [g_caps[kept_ref[i]]] if i in kept_ref else [])
                     for i in range(n_pred)]
            scores["cider_d"][tau] = cider_d(items)

    soda = soda_c([((row[0], row[1]), cap) for row, cap in zip(p_segs, p_caps)],
                  [((row[0], row[1]), cap) for row, cap in zip(g_segs, g_caps)])
    return VideoEval(vid, len(p_entries), len(g_entries),
                     matched, scores, soda, notes)


def tiou_matched_eval(preds: dict, gts: dict,
                      thresholds=DEFAULT_THRESHOLDS,
                      workers: int = 1) -> EvalReport:
    """Score predicted events against references over a video collection.

    preds and gts map video id to a list of ((start, end), caption).
    For each overlap threshold, predictions are matched one-to-one to
    references by descending overlap; caption measures average over all
    predictions, with unmatched ones contributing zero.  Consensus scoring
    treats each video's predictions as one batch.  With ``workers`` above
    one, videos score on a thread pool; aggregation keeps video-id order
    either way.
    """
    thresholds = tuple(sorted(float(t) for t in thresholds))
    if not thresholds or not all(0.0 < t <= 1.0 for t in thresholds):
        raise ContractError(f"bad thresholds {thresholds}")
    video_ids = sorted(set(gts) | set(preds))
    if not video_ids:
        raise ContractError("nothing to evaluate: no videos on either side")

    def work(vid):
        return _eval_one_video(vid, list(preds.get(vid, [])),
                               list(gts.get(vid, [])), thresholds)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            videos = list(pool.map(work, video_ids))
    else:
        videos = [work(vid) for vid in video_ids]
    diagnostics = [note for v in videos for note in v.diagnostics]

    n_vid = len(videos)
    corpus_scores = {name: {tau: sum(v.scores[name][tau] for v in videos) / n_vid
                            for tau in thresholds}
                     for name in CAPTION_METRICS}
    averages = {name: sum(corpus_scores[name][tau] for tau in thresholds) / len(thresholds)
                for name in CAPTION_METRICS}
    matched_total = {tau: sum(v.matched[tau] for v in videos) for tau in thresholds}
    soda_mean = sum(v.soda for v in videos) / n_vid
    return EvalReport(thresholds, videos, corpus_scores, averages,
                      matched_total, soda_mean, diagnostics)


# ---------------------------------------------------------------------------
# rendering


def render_report(report: EvalReport) -> str:
    """Human-readable summary.  Contains no timestamps by design."""
    lines = []
    n_pred = sum(v.n_predictions for v in report.videos)
    n_ref = sum(v.n_references for v in report.videos)
    lines.append(f"evaluation over {len(report.videos)} videos")
    lines.append(f"predictions {n_pred}, references {n_ref}")
    lines.append("")
    header = ["metric".ljust(10)] + [f"tiou>={tau:g}".rjust(11) for tau in report.thresholds]
    header.append("average".rjust(11))
    lines.append("".join(header))
    for name in CAPTION_METRICS:
        row = [name.ljust(10)]
        row += [f"{report.scores[name][tau]:.4f}".rjust(11) for tau in report.thresholds]
        row.append(f"{report.averages[name]:.4f}".rjust(11))
        lines.append("".join(row))
    row = ["matched".ljust(10)]
    row += [str(report.matched[tau]).rjust(11) for tau in report.thresholds]
    lines.append("".join(row))
    lines.append("")
    lines.append(f"soda_c {report.soda:.4f}")
    if report.diagnostics:
        lines.append("")
        lines.append("diagnostics:")
        lines.extend("  " + d for d in report.diagnostics)
    return "\n".join(lines) + "\n"


def table_rows(report: EvalReport) -> list[str]:
    """Flat rows: one per video x metric x threshold, plus soda_c per video."""
    rows = ["video\tmetric\tthreshold\tscore"]
    for v in report.videos:
        for name in CAPTION_METRICS:
            for tau in report.thresholds:
                rows.append(f"{v.video_id}\t{name}\t{tau:g}\t{v.scores[name][tau]:.6f}")
        rows.append(f"{v.video_id}\tsoda_c\t-\t{v.soda:.6f}")
    return rows


def write_table(report: EvalReport, path) -> None:
    from pathlib import Path
    Path(path).write_text("".join(r + "\n" for r in table_rows(report)))
