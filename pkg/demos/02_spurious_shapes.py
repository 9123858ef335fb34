"""
A dataset with a shortcut
=========================

Each image holds one coloured shape (the class) on a textured background.
With spuriousness ``rho`` most images of class k sit on background k, so
a classifier can score well by reading the background alone.
"""

import numpy as np

from clp import synthdata as sd

train = sd.synth_spurshapes(num_classes=4, num_backgrounds=4, height=32, width=32,
                            n_per_class=100, rho=0.95, seed=0)
print(len(train), "images, pixels", train.pixels.shape, train.pixels.dtype)

# count images per (class, background) group; the diagonal dominates
counts = np.bincount(train.groups, minlength=16).reshape(4, 4)
print("rows = class, columns = background")
print(counts)

###############################################################################
# Two more biases can be layered on: a long tail over classes and
# corrupted labels. The original labels are kept for scoring.

tail = sd.apply_longtail(train, 10, seed=1)
print("long-tail class sizes:", tail.class_counts.tolist())

noisy = sd.inject_label_noise(train, "uniform", 0.4, seed=2)
print("labels changed:", int((noisy.labels != noisy.orig_labels).sum()), "of", len(noisy))

###############################################################################
# A small clean, class-balanced subset serves as metadata, and the whole
# set round-trips through the binary container format.

meta, rest = sd.draw_meta_subset(train, per_class=10, seed=3)
print("metadata per class:", meta.class_counts.tolist())
blob = sd.encode_container(meta)
print("container bytes:", len(blob), "round trip ok:", sd.decode_container(blob).equals(meta))
