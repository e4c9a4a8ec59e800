"""Small analytic models and builders shared by the test modules."""

import numpy as np

from advflat.models import MlpClassifier
from advflat.numerics import SeededRng


class Quadratic:
    """Classification loss ``c * sum(x**2)`` (adversarial loss ``-c * sum(x**2)``)."""

    is_smooth = True

    def __init__(self, c=1.0):
        self.c = c

    def loss(self, x, y):
        x = np.asarray(x, dtype=float)
        return self.c * np.sum(x * x, axis=-1)

    def input_gradient(self, x, y):
        return 2.0 * self.c * np.asarray(x, dtype=float)


class Linear:
    """Classification loss ``a . x``; constant gradient ``a``."""

    is_smooth = True

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def loss(self, x, y):
        return np.asarray(x, dtype=float) @ self.a

    def input_gradient(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.a, x.shape).copy()


def random_mlp(seed, hidden=(8,), activation="tanh", d=2, C=3, scale=1.0, model_id="m"):
    rng = SeededRng(seed, 99)
    sizes = [d, *hidden, C]
    model = MlpClassifier.initialize(sizes, activation, rng, model_id)
    if scale != 1.0:
        model = model.copy(weights=[w * scale for w in model.weights])
    return model


def fuzz_model(seed):
    """Random smooth MLP with varied depth/width/activation and d in 1..4."""
    r = np.random.default_rng(seed)
    d = int(r.integers(1, 5))
    C = int(r.integers(2, 5))
    hidden = tuple(int(h) for h in r.integers(2, 12, size=int(r.integers(0, 3))))
    act = ["tanh", "softplus"][int(r.integers(0, 2))]
    model = random_mlp(seed, hidden, act, d, C, scale=float(r.uniform(0.5, 2.5)))
    x = r.uniform(0, 1, d)
    y = int(r.integers(0, C))
    return model, x, y
