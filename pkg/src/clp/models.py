"""Backbone classifier and the perturbation network.

Both models are plain MLPs whose ``forward`` takes an optional explicit
parameter list. Passing graph nodes there is how the training loop evaluates
the network at a virtual parameter set that is itself a function of other
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .characteristics import NUM_CHARACTERISTICS
from .errors import ConformanceError

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


def _he_normal(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))


def _dense(h, w, b, batch):
    return ad.add(ad.matmul(h, w), ad.expand(b, 0, batch))


class _MLP:
    params: list

    def param_shapes(self):
        return [tuple(np.shape(p.value if isinstance(p, ad.Node) else p)) for p in self.params]

    @property
    def num_params(self):
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def with_params(self, params):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = list(params)
        return clone

    def param_values(self):
        return [p.value if isinstance(p, ad.Node) else p for p in self.params]

    def leaves(self):
        return [ad.leaf(p) for p in self.param_values()]


@dataclass
class ModelConfig:
    hidden_widths: tuple = (256, 128)
    pnet_hidden: int = 100
    init_seed: int = 0
    activation: str = "relu"
    pnet_activation: str = "relu"


class Classifier(_MLP):
    """Flatten -> hidden layers -> ``num_classes`` logits.

    Weights are stored input-major (``x @ W``), so the final-layer matrix in
    the (classes x features) orientation is ``params[-2].T``.
    """

    def __init__(self, input_dim, num_classes, hidden_widths=(256, 128),
                 activation="relu", seed=0):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden_widths = tuple(int(h) for h in hidden_widths)
        self.activation = activation
        rng = np.random.default_rng(seed)
        dims = (self.input_dim, *self.hidden_widths, self.num_classes)
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            self.params += [_he_normal(rng, fan_in, fan_out), np.zeros(fan_out)]

    @property
    def feature_dim(self):
        return self.hidden_widths[-1] if self.hidden_widths else self.input_dim

    def forward(self, x, params=None):
        """Return ``(features, logits)`` nodes for a batch ``x`` of shape (B, D)."""
        params = self.params if params is None else params
        x = x if isinstance(x, ad.Node) else ad.constant(
            np.asarray(x, dtype=np.float64).reshape(len(x), -1))
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ConformanceError(f"classifier expects (B, {self.input_dim}), got {x.shape}")
        act = _ACTIVATIONS[self.activation]
        batch = x.shape[0]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers - 1):
            h = act(_dense(h, _as_node(params[2 * i]), _as_node(params[2 * i + 1]), batch))
        logits = _dense(h, _as_node(params[-2]), _as_node(params[-1]), batch)
        return h, logits

    def class_weights(self, params=None):
        """Final-layer weights as a (classes x features) array."""
        params = self.params if params is None else params
        w = params[-2]
        return (w.value if isinstance(w, ad.Node) else w).T


class PerturbNet(_MLP):
    """Two-layer MLP mapping a characteristic vector to a logit perturbation.

    The output layer starts at zero, so the initial perturbation is zero.
    """

    def __init__(self, num_classes, hidden=100, activation="relu", seed=0,
                 n_inputs=NUM_CHARACTERISTICS):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        self.n_inputs = int(n_inputs)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params = [_he_normal(rng, self.n_inputs, self.hidden), np.zeros(self.hidden),
                       np.zeros((self.hidden, self.num_classes)), np.zeros(self.num_classes)]

    def forward(self, cv, params=None):
        params = self.params if params is None else params
        cv = cv if isinstance(cv, ad.Node) else ad.constant(np.atleast_2d(cv))
        if cv.ndim != 2 or cv.shape[1] != self.n_inputs:
            raise ConformanceError(f"perturbation net expects (B, {self.n_inputs}), got {cv.shape}")
        w1, b1, w2, b2 = (_as_node(p) for p in params)
        batch = cv.shape[0]
        h = _ACTIVATIONS[self.activation](_dense(cv, w1, b1, batch))
        return _dense(h, w2, b2, batch)


def _as_node(p):
    return p if isinstance(p, ad.Node) else ad.constant(p)


def classify(clf, x, params=None):
    return clf.forward(x, params)


def perturb(pnet, cv, params=None):
    return pnet.forward(cv, params)


def params_flatten(model):
    return np.concatenate([np.ravel(p) for p in model.param_values()])


def params_assign(model, flat):
    """Copy of ``model`` whose parameters are carved out of ``flat``.

    If ``flat`` is a graph node, the new parameters are slices of it, so
    gradients flow back into ``flat``.
    """
    shapes = model.param_shapes()
    total = int(sum(np.prod(s) for s in shapes))
    n = flat.shape[0] if isinstance(flat, ad.Node) else np.size(flat)
    if n != total:
        raise ConformanceError(f"expected {total} parameters, got {n}")
    params, start = [], 0
    for s in shapes:
        size = int(np.prod(s))
        if isinstance(flat, ad.Node):
            params.append(ad.reshape(ad.slice_(flat, start, start + size), s))
        else:
            params.append(np.asarray(flat[start:start + size], dtype=np.float64).reshape(s).copy())
        start += size
    return model.with_params(params)


def build_models(input_dim, num_classes, cfg=None):
    cfg = cfg or ModelConfig()
    clf = Classifier(input_dim, num_classes, cfg.hidden_widths, cfg.activation,
                     seed=cfg.init_seed)
    pnet = PerturbNet(num_classes, cfg.pnet_hidden, cfg.pnet_activation,
                      seed=cfg.init_seed + 1)
    return clf, pnet
