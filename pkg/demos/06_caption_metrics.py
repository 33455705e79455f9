"""Caption metrics from scratch, and the matched evaluation protocol.

Scores live on sentence pairs (BLEU, ROUGE-L, METEOR-lite), corpora
(CIDEr-D), and whole timelines (SODA).  The evaluation protocol matches
predicted segments to references by overlap at several thresholds and
averages the caption scores over the matched pairs.
"""

import math

from personcap.metrics import (bleu4, cider_d, meteor_lite, render_report,
                               rouge_l, soda_c, tiou_matched_eval)

ref = "the person in sky blue clothes walks forward then turns left"
close = "the person in sky blue clothes walks forward then stops"
loose = "a person walks"

print(f"reference: '{ref}'")
for cand in (close, loose):
    print(f"  '{cand}'")
    print(f"    bleu4 {bleu4(cand, ref):.4f}  rouge_l {rouge_l(cand, ref):.4f}"
          f"  meteor {meteor_lite(cand, ref):.4f}")

# a textbook corner: 3-gram candidate against a 4-gram reference drops the
# 4-gram term and one trigram is missing, so BLEU is exactly exp(-1/3)
case = bleu4("the man walks", "the man walks away")
print(f"\nbleu4('the man walks', 'the man walks away') = {case:.6f}"
      f"  (exp(-1/3) = {math.exp(-1/3):.6f})")

# CIDEr-D is corpus-level: tf-idf weights need more than one item to exist
corpus = [(c, [c]) for c in (ref, close, "a dog runs across the yard")]
print(f"identical corpus scores the maximum: cider_d = {cider_d(corpus):g}")

# ---------------------------------------------------------------------------
# timeline scoring

preds = [((0.8, 4.1), "the person in purple clothes walks forward"),
         ((5.2, 8.9), "the person stands still then looks around")]
gts = [((1.0, 4.0), "the person in purple clothes walks forward"),
       ((5.0, 9.0), "the person in teal clothes stands still")]
print(f"\nsoda_c on a two-event timeline: {soda_c(preds, gts):.4f}")

# the full protocol over a (tiny) collection
report = tiou_matched_eval({"vid_0": preds}, {"vid_0": gts})
print()
print(render_report(report))
