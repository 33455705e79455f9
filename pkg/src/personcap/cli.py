"""Batch command line: synth, validate, stats, train, infer, eval, gradcheck.

Every command is a plain batch run: explicit paths in, files out, exit code
0 only on success.  Each run drops exactly one JSON manifest describing the
command, its resolved configuration, seed, touched paths, wall-clock time,
and sha256 hashes of everything written, so a run can be reproduced or
audited from the manifest alone.  Output files themselves carry no
timestamps; ``PERSONCAP_LOG`` (debug/info/warning/error) controls stderr
logging verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .annotation import (corpus_stats, load_annotation, render_stats,
                         validate_document)
from .errors import PersoncapError
from .gradcheck import KERNELS, run_kernel
from .metrics import (DEFAULT_THRESHOLDS, render_report, tiou_matched_eval,
                      write_table)
from .model import (ModelConfig, Trainer, config_from_text, config_to_text,
                    infer_video, load_model, parse_predictions,
                    serialize_predictions)
from .synth import (SynthConfig, corpus_ids, generate_corpus, load_corpus,
                    synth_config_from_text, synth_config_to_text)

log = logging.getLogger("personcap.cli")

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
           "warning": logging.WARNING, "error": logging.ERROR}


def _setup_logging() -> None:
    name = os.environ.get("PERSONCAP_LOG", "warning").lower()
    level = _LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_tree(root: Path, skip: Path) -> dict:
    if root.is_file():
        return {root.name: _sha256(root)}
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path != skip:
            out[path.relative_to(root).as_posix()] = _sha256(path)
    return out


class _Run:
    """Collects manifest fields over a command's lifetime."""

    def __init__(self, command: str, config: dict, seed=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._t0 = time.perf_counter()
        self._started = datetime.now(timezone.utc).isoformat()

    def reads(self, *paths) -> None:
        self.inputs.extend(str(p) for p in paths if p is not None)

    def writes(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def finish(self, manifest_path) -> None:
        manifest_path = Path(manifest_path)
        artifacts = {}
        for out in self.outputs:
            artifacts.update(_hash_tree(Path(out), skip=manifest_path))
        doc = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "started_at_utc": self._started,
            "duration_s": round(time.perf_counter() - self._t0, 3),
            "artifacts": artifacts,
        }
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
        log.info("manifest at %s", manifest_path)


def _sibling_manifest(report_path: Path) -> Path:
    return report_path.parent / (report_path.stem + ".manifest.json")


def _write_report(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.config:
        cfg = synth_config_from_text(Path(args.config).read_text())
    else:
        cfg = SynthConfig()
    overrides = {}
    if args.count is not None:
        overrides["n_videos"] = args.count
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    run = _Run("synth", dataclasses.asdict(cfg), seed=cfg.seed)
    run.reads(args.config)
    out = Path(args.out)
    ids = generate_corpus(cfg, out, workers=args.workers)
    run.writes(out)
    run.finish(out / "run_manifest.json")
    print(f"wrote {len(ids)} videos to {out}")
    return 0


def cmd_validate(args) -> int:
    root = Path(args.dir)
    files = sorted(root.glob("*.json"))
    if not files:
        print(f"error: no annotation files in {root}", file=sys.stderr)
        return 1
    run = _Run("validate", {"dir": str(root)})
    run.reads(root)
    lines = []
    bad = 0
    for path in files:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            lines.append(f"{path.name}: not JSON: {exc}")
            bad += 1
            continue
        errors, warnings = validate_document(doc)
        if errors:
            bad += 1
            lines.extend(f"{path.name}: {e}" for e in errors)
        else:
            lines.append(f"{path.name}: ok"
                         + (f" ({len(warnings)} warnings)" if warnings else ""))
        lines.extend(f"{path.name}: warning: {w}" for w in warnings)
    lines.append(f"{len(files) - bad}/{len(files)} files valid")
    report = "".join(line + "\n" for line in lines)
    out = Path(args.out)
    _write_report(out, report)
    run.writes(out)
    run.finish(_sibling_manifest(out))
    return 1 if bad else 0


def cmd_stats(args) -> int:
    root = Path(args.dir)
    files = sorted(root.glob("*.json"))
    if not files:
        print(f"error: no annotation files in {root}", file=sys.stderr)
        return 1
    run = _Run("stats", {"dir": str(root)})
    run.reads(root)
    annotations = [load_annotation(path) for path in files]
    report = render_stats(corpus_stats(annotations))
    out = Path(args.out)
    _write_report(out, report)
    run.writes(out)
    run.finish(_sibling_manifest(out))
    return 0


def cmd_train(args) -> int:
    if args.config:
        cfg = config_from_text(Path(args.config).read_text())
    else:
        cfg = ModelConfig.desk()
    samples = load_corpus(args.corpus, args.split)
    snapshot = dataclasses.asdict(cfg)
    snapshot.update(steps=args.steps, split=args.split)
    run = _Run("train", snapshot, seed=args.seed)
    run.reads(args.config, args.corpus)
    trainer = Trainer(samples, cfg, seed=args.seed)
    log.info("training on %d videos, vocab %d, %d steps",
             len(samples), len(trainer.vocab), args.steps)
    report_every = max(1, args.steps // 20)
    for step in range(1, args.steps + 1):
        value = trainer.step()
        if step % report_every == 0 or step == args.steps:
            log.info("step %d/%d loss %.4f", step, args.steps, value)
    out = Path(args.out)
    trainer.save(out)
    run.writes(out)
    run.finish(out / "run_manifest.json")
    final = trainer.loss_history[-1]
    print(f"trained {args.steps} steps, final loss {final:.4f}, saved to {out}")
    return 0


def cmd_infer(args) -> int:
    params, cfg, vocab = load_model(args.model)
    samples = load_corpus(args.corpus, args.split)
    run = _Run("infer", {**dataclasses.asdict(cfg), "split": args.split})
    run.reads(args.model, args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for sample in samples:
        ann = sample.annotation
        events = infer_video(params, cfg, vocab, sample.frames,
                             sample.person_feats, ann.duration_s)
        (out / f"{ann.video_id}.json").write_text(
            serialize_predictions(ann.video_id, events))
        total += len(events)
        log.info("%s: %d events", ann.video_id, len(events))
    run.writes(out)
    run.finish(out / "run_manifest.json")
    print(f"wrote predictions for {len(samples)} videos "
          f"({total} events) to {out}")
    return 0


def cmd_eval(args) -> int:
    ann_dir = Path(args.corpus) / "annotations"
    ids = corpus_ids(args.corpus, args.split)
    gts = {}
    for vid in ids:
        ann = load_annotation(ann_dir / f"{vid}.json")
        gts[vid] = [((p.appear_s, p.disappear_s), p.caption)
                    for p in ann.persons]
    preds = {}
    pred_root = Path(args.predictions)
    for vid in ids:
        path = pred_root / f"{vid}.json"
        if not path.exists():
            continue
        _, events = parse_predictions(path.read_text())
        preds[vid] = [((e.start_s, e.end_s), e.caption) for e in events]
    run = _Run("eval", {"split": args.split,
                        "thresholds": list(DEFAULT_THRESHOLDS)})
    run.reads(args.predictions, args.corpus)
    report = tiou_matched_eval(preds, gts, DEFAULT_THRESHOLDS,
                               workers=args.workers)
    out = Path(args.out)
    _write_report(out, render_report(report))
    run.writes(out)
    if args.table:
        write_table(report, args.table)
        run.writes(args.table)
    run.finish(_sibling_manifest(out))
    return 0


def cmd_gradcheck(args) -> int:
    run = _Run("gradcheck", {"trials": args.trials}, seed=args.seed)
    lines = [f"{'kernel':24s}{'tol':>10s}{'worst':>14s}  verdict"]
    failed = 0
    for name in sorted(KERNELS):
        kernel = KERNELS[name]
        result = run_kernel(name, args.trials, args.seed)
        ok = result.max_rel_err < kernel.tol
        failed += not ok
        lines.append(f"{name:24s}{kernel.tol:>10.0e}{result.max_rel_err:>14.3e}"
                     f"  {'pass' if ok else 'FAIL'}")
        log.info("%s: %.3e", name, result.max_rel_err)
    lines.append(f"{len(KERNELS) - failed}/{len(KERNELS)} kernels pass")
    out = Path(args.out)
    _write_report(out, "".join(line + "\n" for line in lines))
    run.writes(out)
    run.finish(_sibling_manifest(out))
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="personcap",
        description="Person-level dense captioning: synthetic corpora, "
                    "training, inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--count", type=int, help="number of videos")
    p.add_argument("--seed", type=int, help="corpus seed")
    p.add_argument("--config", help="key=value synthesis config file")
    p.add_argument("--workers", type=int, default=4,
                   help="video build threads (output is identical)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check annotation files")
    p.add_argument("--dir", required=True, help="directory of annotation JSON")
    p.add_argument("--out", required=True, help="diagnostics report file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="corpus statistics tables")
    p.add_argument("--dir", required=True, help="directory of annotation JSON")
    p.add_argument("--out", required=True, help="report file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--config", help="key=value model config file")
    p.add_argument("--steps", type=int, default=1000, help="training steps")
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--split", default="all",
                   help="corpus split to train on (train/val/test/all)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict events for a corpus")
    p.add_argument("--model", required=True, help="trained model directory")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="predictions output directory")
    p.add_argument("--split", default="all", help="corpus split to read")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--predictions", required=True,
                   help="directory of prediction JSON files")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--table", help="optional per-video TSV table file")
    p.add_argument("--split", default="all", help="corpus split to score")
    p.add_argument("--workers", type=int, default=4,
                   help="scoring threads (aggregation order is fixed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all kernels")
    p.add_argument("--out", required=True, help="report file")
    p.add_argument("--seed", type=int, default=0, help="probe seed")
    p.add_argument("--trials", type=int, default=100,
                   help="random instances per kernel")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except PersoncapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
