"""
Counterfactual and factual images
=================================

A counterfactual copy replaces the shape and keeps the background; it is
labelled "not the original class". A factual copy keeps the shape and
replaces the background; its label stays. Both are written out as
graymaps so they can be inspected.
"""

import numpy as np

from clp import causalaug as ca
from clp import synthdata as sd
from clp.evalreport import encode_pgm

ds = sd.synth_spurshapes(4, 4, 32, 32, 5, 0.5, seed=4)
s = ds[0]
rng = np.random.default_rng(0)

cf = ca.counterfactual_augment(s, ca.InfillSpec("counterfactual", "tile"), rng)
donor = next(d for d in ds if d.orig_label != s.orig_label)
f = ca.factual_augment(s, ca.InfillSpec("factual", "mix_rand"), rng, donor=donor)

inside = s.mask.astype(bool)
print("counterfactual keeps background:", np.array_equal(cf.pixels[:, ~inside], s.pixels[:, ~inside]))
print("factual keeps the shape:       ", np.array_equal(f.pixels[:, inside], s.pixels[:, inside]))

for name, img in (("original", s), ("counterfactual", cf), ("factual", f)):
    with open(f"{name}.pgm", "wb") as fh:
        fh.write(encode_pgm(img.pixels.mean(axis=0)))

###############################################################################
# ``augment_metadata`` applies this to a whole metadata set: with the
# default plan each sample gains one counterfactual and one factual copy.

meta, _ = sd.draw_meta_subset(ds, 4, seed=1)
big = ca.augment_metadata(meta, ca.AugmentPlan(seed=2))
print(len(meta), "->", len(big), "metadata samples")
