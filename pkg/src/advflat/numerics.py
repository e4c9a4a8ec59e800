"""Vector primitives shared by the models, attacks and flatness estimators.

Everything here works on float64 numpy arrays. Functions accept either a single
vector of shape ``(d,)`` or a batch of shape ``(B, d)``; reductions (norms) are
taken over the last axis.

Randomness is routed through :class:`SeededRng`, a thin wrapper over numpy's
counter-based Philox bit generator keyed by a :class:`numpy.random.SeedSequence`.
A stream is identified by ``(master_seed, stream_id)`` and sub-streams extend the
spawn key, so ``SeededRng(s, i).child(t)`` is the stream for outer iteration
``t`` of example ``i``.
"""

from __future__ import annotations

import numpy as np

RNG_VERSION = "philox4x64-seedsequence-v1"


def as_vector(values) -> np.ndarray:
    """Return ``values`` as a finite float64 array, raising on NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature vector contains non-finite entries")
    return arr


def sign(v: np.ndarray) -> np.ndarray:
    # np.sign maps 0 -> 0 and -0.0 -> -0.0; add 0.0 so the zero is always +0.0
    return np.sign(v) + 0.0


def norm(v: np.ndarray, p=2) -> np.ndarray | float:
    """p-norm over the last axis for p in {1, 2, inf}."""
    v = np.asarray(v, dtype=np.float64)
    if p == 1:
        out = np.sum(np.abs(v), axis=-1)
    elif p == 2:
        # scale by the largest magnitude so tiny vectors do not underflow to 0
        big = np.max(np.abs(v), axis=-1, keepdims=True) if v.shape[-1] else np.zeros(v.shape[:-1] + (1,))
        safe = np.where(big > 0, big, 1.0)
        out = big[..., 0] * np.sqrt(np.sum((v / safe) ** 2, axis=-1))
    elif p in (np.inf, "inf"):
        out = np.max(np.abs(v), axis=-1) if v.shape[-1] else np.zeros(v.shape[:-1])
    else:
        raise ValueError(f"unsupported norm order: {p!r}")
    return float(out) if np.ndim(out) == 0 else out


def project_box_linf(candidate, origin, eps: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Nearest point to ``candidate`` inside ``B_inf(origin, eps) ∩ [lo, hi]^d``.

    Both sets are axis-aligned boxes, so their intersection is a box and the
    Euclidean projection is a per-coordinate clip.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if candidate.shape != origin.shape:
        raise ValueError(f"dimension mismatch: candidate {candidate.shape} vs origin {origin.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    lower = _inward(origin - eps, origin, eps, np.inf)
    upper = _inward(origin + eps, origin, eps, -np.inf)
    return np.minimum(np.maximum(candidate, np.maximum(lower, lo)), np.minimum(upper, hi))


def _inward(bound, origin, eps, towards):
    # origin +/- eps can round one ulp outside the ball; step back until |bound - origin| <= eps holds
    bound = np.asarray(bound, dtype=np.float64)
    while True:
        bad = np.abs(bound - origin) > eps
        if not np.any(bad):
            return bound
        bound = np.where(bad, np.nextafter(bound, towards), bound)


class SeededRng:
    """Deterministic random stream keyed by ``(master_seed, stream_id)``.

    Streams with different keys come from disjoint SeedSequence spawn keys and
    are statistically independent. ``child(k)`` appends ``k`` to the key.
    """

    def __init__(self, master_seed: int, stream_id: int | tuple = 0):
        self.master_seed = int(master_seed)
        key = stream_id if isinstance(stream_id, tuple) else (int(stream_id),)
        if any(k < 0 for k in key):
            raise ValueError("stream ids must be non-negative")
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.master_seed & (2**64 - 1), spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    @property
    def stream_id(self) -> int:
        return self.key[0]

    def child(self, sub_id: int) -> SeededRng:
        return SeededRng(self.master_seed, self.key + (int(sub_id),))

    def uniform(self, low, high, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def __repr__(self):
        return f"SeededRng(master_seed={self.master_seed}, key={self.key})"


def sample_uniform_ball(rng: SeededRng, d: int, xi: float, n: int | None = None) -> np.ndarray:
    """Draw perturbations with each coordinate uniform on ``[-xi, xi]``.

    Returns shape ``(d,)`` or ``(n, d)`` when ``n`` is given.
    """
    if xi < 0:
        raise ValueError("xi must be non-negative")
    shape = (d,) if n is None else (n, d)
    if xi == 0:
        return np.zeros(shape)
    return rng.uniform(-xi, xi, shape)
