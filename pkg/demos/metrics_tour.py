"""Small worked examples of the scoring rules and position buckets."""

import numpy as np

from uvlg.evaldecode import bleu, rank_choices, true_false_score, vqa_score
from uvlg.nn_core.position import VISUAL_POSITION, relative_position_bucket
from uvlg.synthworld import iou

ref = "a red dog sits on the blue cube".split()
for cand in (ref, "a red dog sits".split(), "the the the".split()):
    print(f"bleu({' '.join(cand)!r}) = {bleu(cand, [ref]):.4f}")

for n in range(5):
    print(f"vqa_score with {n} matching humans = {vqa_score('red', ['red'] * n + ['blue'] * (10 - n)):.1f}")

print("iou:", iou([0, 0, 1, 1], [0, 0, 1, 1]), iou([0, 0, 1, 1], [2, 2, 3, 3]),
      round(iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]), 6))

# four answer choices; the third has the largest true-vs-false margin
logits = np.zeros((4, 3))
logits[:, 1] = [0.2, 1.0, 2.5, -1.0]
idx, scores = rank_choices(logits, true_id=1, false_id=2)
print("choice scores:", np.round(scores, 3), "-> pick", idx)
print("P(true)=0.6, P(false)=0.2 ->", true_false_score(np.log(0.6), np.log(0.2)))

deltas = [-100, -8, -1, 0, 1, 5, 8, 100]
# token positions are >= 0; -1 is the visual-slot tag, so offset the query
q = 200
print("buckets:", {d: int(relative_position_bucket(q, q + d)) for d in deltas},
      "visual:", int(relative_position_bucket(q, VISUAL_POSITION)))
