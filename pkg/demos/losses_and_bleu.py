"""
Focal loss, label smoothing and corpus BLEU
===========================================

A quick tour of the scoring pieces. Runs in about a second.
"""

import numpy as np

from lowres_nmt.criterion import FocalConfig, SmoothedCEConfig, focal_loss, focal_value, label_smoothed_ce
from lowres_nmt.evaluation import corpus_bleu

# focal loss down-weights tokens the model already gets right
for p in (0.1, 0.5, 0.9, 0.99):
    ce = -np.log(p)
    fl = focal_value(p, 0.5, 1.0)
    print(f"p_t={p:<5} CE={ce:.4f} focal={fl:.4f} ratio={fl / ce:.3f}")

# with gamma=0 and alpha=1 it is plain cross-entropy
rng = np.random.default_rng(0)
logits = rng.normal(size=(2, 5, 12))
targets = rng.integers(1, 12, size=(2, 5))
print("focal(g=0, a=1):", focal_loss(logits, targets, FocalConfig(alpha=1.0, gamma=0.0)).loss)
print("smoothed CE eps=0:", label_smoothed_ce(logits, targets, SmoothedCEConfig(epsilon=0.0)).loss)
print("smoothed CE eps=0.2:", label_smoothed_ce(logits, targets, SmoothedCEConfig(epsilon=0.2)).loss)

# corpus BLEU pools n-gram counts over all sentences before taking precisions
refs = ["the cat sat on the mat .", "a dog barked at the mailman ."]
hyps = ["the cat sat on a mat .", "the dog barked at the mailman !"]
report = corpus_bleu(hyps, refs)
print(report.format())
print("matches", report.matches, "totals", report.totals)

# a short hypothesis pays the brevity penalty
print(corpus_bleu(["the cat sat on"], ["the cat sat on the mat ."]).format())
