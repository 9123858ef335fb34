"""
What the perturbation network sees
==================================

Each training sample is summarised by ten numbers: its loss, margin,
gradient norm, feature/class-weight cosine, prediction entropy, the share
of its class, its class's running loss, the class weight norm, and loss
and margin relative to the class average.
"""

import numpy as np

from clp import characteristics as ch

stats = ch.ClassStats.create([300, 100, 20])
stats = ch.update_class_stats(stats, [0, 1, 2], [0.2, 0.6, 1.4], [0.5, 0.1, -0.3])

rng = np.random.default_rng(0)
logits = np.array([[3.0, 0.5, -1.0],   # confident and right
                   [0.1, 0.0, 0.2],    # unsure
                   [2.5, 0.0, -0.5]])  # confident and wrong (label 2)
labels = [0, 1, 2]
raw, degenerate = ch.extract_batch(logits, rng.normal(size=(3, 8)), labels,
                                   rng.normal(size=(3, 8)), stats)
names = ["loss", "margin", "grad", "cos", "entropy", "share", "cls_loss", "w_norm",
         "rel_loss", "rel_margin"]
print("".join(f"{n:>11}" for n in names))
for row in raw:
    print("".join(f"{v:11.3f}" for v in row))

###############################################################################
# Before entering the network the vectors are standardised with running
# statistics and clipped.

norm = ch.FeatureNormalizer()
print(np.round(ch.normalize(raw, norm), 2))
