"""A small end-to-end run: synthesize, overfit, predict, evaluate.

Three tiny videos and a narrow model keep this under a minute or two on a
CPU.  The point is the shape of the loop, not the scores; the acceptance
suite runs the same loop at full desk scale.
"""

import tempfile
from pathlib import Path

import numpy as np

from personcap.metrics import render_report, tiou_matched_eval
from personcap.model import ModelConfig, Trainer, infer_video
from personcap.synth import SynthConfig, generate_corpus, load_corpus

root = Path(tempfile.mkdtemp(prefix="personcap_demo_"))
generate_corpus(SynthConfig(n_videos=3, seed=2, feature_dim=24,
                            persons_range=(2, 3),
                            duration_range=(6.0, 8.0)), root / "corpus")
samples = load_corpus(root / "corpus")

cfg = ModelConfig(d_model=32, ffn_dim=48, enc_layers=1, dec_layers=2,
                  heads=2, levels=2, points=2, dsa_points=2, dsa_key_dim=8,
                  lstm_hidden=24, embed_dim=12, learning_rate=8e-4,
                  nominal_frames=16)
trainer = Trainer(samples, cfg, seed=0)
print(f"{len(samples)} videos, vocab {len(trainer.vocab)} words,",
      f"{sum(v.size for v in trainer.params.values())} parameters")

for step in range(1, 401):
    loss = trainer.step()
    if step % 100 == 0 or step == 1:
        print(f"  step {step:3d}  loss {loss:7.3f}")

# ---------------------------------------------------------------------------
# predictions on one training video against its annotation

s = samples[0]
ann = s.annotation
events = infer_video(trainer.params, cfg, trainer.vocab, s.frames,
                     s.person_feats, ann.duration_s)
print(f"\n{ann.video_id}:")
for e in events:
    print(f"  pred {e.start_s:5.2f}s -> {e.end_s:5.2f}s"
          f"  ({e.confidence:.2f})  '{e.caption}'")
for p in ann.persons:
    print(f"  true {p.appear_s:5.2f}s -> {p.disappear_s:5.2f}s"
          f"          '{p.caption}'")

# ---------------------------------------------------------------------------
# the evaluation protocol over the training set

preds, gts = {}, {}
for s in samples:
    ann = s.annotation
    events = infer_video(trainer.params, cfg, trainer.vocab, s.frames,
                         s.person_feats, ann.duration_s)
    preds[ann.video_id] = [((e.start_s, e.end_s), e.caption) for e in events]
    gts[ann.video_id] = [((p.appear_s, p.disappear_s), p.caption)
                         for p in ann.persons]
print()
print(render_report(tiou_matched_eval(preds, gts)))
print("the CLI wraps the same loop: personcap synth / train / infer / eval")
