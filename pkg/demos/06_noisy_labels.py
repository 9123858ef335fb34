"""
Which samples get their loss pushed up?
=======================================

On data with corrupted labels, a trained perturbation network tends to
raise the loss of clean samples more often than that of noisy ones, so
the noisy ones count for less.
"""

from clp import metatrain as mt
from clp import synthdata as sd
from clp.evalreport import loss_increase_fractions
from clp.models import ModelConfig

clean = sd.synth_spurshapes(4, 4, 16, 16, 100, 0.0, seed=0, balanced=True)
train = sd.inject_label_noise(clean, "uniform", 0.4, seed=1)
pool = sd.synth_spurshapes(4, 4, 16, 16, 20, 0.0, seed=2, balanced=True)
meta, _ = sd.draw_meta_subset(pool, 10, seed=3)

cfg = mt.TrainConfig(eta1=0.02, eta2=1e-2, iters=300, seed=0)
state, _ = mt.train(cfg, train, meta, ModelConfig(hidden_widths=(64,), pnet_hidden=32))
frac_clean, frac_noisy = loss_increase_fractions(state.clf, state.pnet, state.stats, train,
                                                 state.normalizer)
print(f"loss raised on {frac_clean:.1%} of clean and {frac_noisy:.1%} of noisy samples")
