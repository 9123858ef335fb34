"""
Gradients and gradients of gradients
====================================

The engine in ``clp.tensorad`` records every operation on a ``Node`` and
replays the record backwards. Asking for ``create_graph=True`` keeps the
backward pass itself on record, so it can be differentiated again.
"""

import numpy as np

from clp import tensorad as ad

# f(x) = sum(tanh(x) ** 2)
x = ad.leaf(np.array([0.3, -1.2, 2.0]))
f = ad.sum_(ad.square(ad.tanh(x)))
(g,) = ad.backward(f, [x], create_graph=True)
print("f      =", float(f.value))
print("df/dx  =", g.value)

# closed form: 2 tanh(x) (1 - tanh(x)^2)
t = np.tanh(x.value)
print("check  =", 2 * t * (1 - t ** 2))

# differentiate the gradient once more (diagonal of the Hessian)
(h,) = ad.backward(ad.sum_(g), [x])
print("d2f/dx2 =", h.value)

###############################################################################
# Central differences are the reference for every primitive. The helper
# returns the worst relative error over all coordinates.

err = ad.finite_diff_check(lambda n: ad.sum_(ad.exp(ad.log_softmax(n))), np.random.default_rng(0).normal(size=(2, 4)))
print("softmax finite-difference error:", err)
