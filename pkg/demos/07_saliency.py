"""
Where does the classifier look?
===============================

The saliency map is the squared input gradient of the true-class
probability, summed over colour channels. Its mean inside the shape
over its mean outside says how much the model relies on the shape.
"""

import numpy as np

from clp import metatrain as mt
from clp import synthdata as sd
from clp.evalreport import encode_pgm, saliency_map, saliency_ratio
from clp.models import ModelConfig

train = sd.synth_spurshapes(4, 4, 16, 16, 100, 0.95, seed=0)
test = sd.synth_spurshapes(4, 4, 16, 16, 5, 0.0, seed=5, balanced=True)
models = ModelConfig(hidden_widths=(64,))

ratios = {}
for lam in (0.0, 1.0):
    cfg = mt.TrainConfig(eta1=0.02, lam=lam, iters=300, seed=0)
    state, _ = mt.train_erm(cfg, train, models)
    ratios[lam] = [saliency_ratio(state.clf, s) for s in test]
    with open(f"saliency_lambda{lam:g}.pgm", "wb") as fh:
        fh.write(encode_pgm(saliency_map(state.clf, test[0])))

for lam, r in ratios.items():
    print(f"lambda {lam}: median inside/outside saliency ratio {np.median(r):.2f}")
