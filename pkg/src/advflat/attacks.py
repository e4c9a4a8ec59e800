"""FGSM, MI-FGSM and the Adversarial Flatness Attack (AFA).

All attacks run on a batch of examples at once (rows of ``x``); a single
``(d,)`` input is treated as a batch of one and returns an unbatched result.
Rows never interact: each example owns its random stream and every reduction
is per row, so the result for a row depends only on that row's inputs and the
batch it was evaluated in.

Random draws for AFA follow a fixed splitting rule: example ``i`` uses
``SeededRng(cfg.seed, stream_ids[i])`` and outer iteration ``t`` draws all of
its ``N`` neighbourhood offsets at once from ``.child(t)``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .models import Ensemble
from .numerics import SeededRng, norm, project_box_linf, sample_uniform_ball, sign

GUARD = 1e-12
SCHEMES = ("fdm", "bdm", "cdm")


@dataclass
class AttackConfig:
    """Hyperparameters of AFA (and of the MI/FGSM baselines, which use a subset).

    ``alpha``, ``xi``, ``gamma_mcas`` and ``lambda_f`` default to ``eps/T``,
    ``3*eps``, ``0.15*eps`` and ``alpha*beta_f``; they are resolved once at
    construction, so changing ``eps`` later does not rescale them.
    """

    eps: float = 16.0 / 255.0
    T: int = 10
    alpha: float | None = None
    eta: float = 1.0
    N: int = 20
    xi: float | None = None
    gamma_mcas: float | None = None
    eta_mcas: float = 0.9
    beta_f: float = 0.5
    lambda_f: float | None = None
    scheme: str = "fdm"
    neighbor_ascent: bool = True
    mcas_enabled: bool = True
    mcas_reset_per_iteration: bool = True
    seed: int = 0
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("invalid attack config: T must be >= 1")
        if self.alpha is None:
            self.alpha = self.eps / self.T
        if self.xi is None:
            self.xi = 3.0 * self.eps
        if self.gamma_mcas is None:
            self.gamma_mcas = 0.15 * self.eps
        if self.lambda_f is None:
            self.lambda_f = self.alpha * self.beta_f
        self.scheme = self.scheme.lower()
        problems = []
        if not self.eps > 0:
            problems.append("eps must be > 0")
        if self.T < 1:
            problems.append("T must be >= 1")
        if self.N < 1:
            problems.append("N must be >= 1")
        if not self.alpha > 0:
            problems.append("alpha must be > 0")
        if not 0.0 <= self.beta_f <= 1.0:
            problems.append("beta_f must lie in [0, 1]")
        if self.xi < 0:
            problems.append("xi must be >= 0")
        if self.gamma_mcas < 0:
            problems.append("gamma_mcas must be >= 0")
        if not 0.0 <= self.eta_mcas <= 1.0:
            problems.append("eta_mcas must lie in [0, 1]")
        if self.scheme not in SCHEMES:
            problems.append(f"scheme must be one of {SCHEMES}")
        if problems:
            raise ValueError("invalid attack config: " + "; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


TRACE_COLUMNS = ("t", "adv_loss", "g_l1", "cos_align_g0", "loss_std_over_samples", "momentum_l1")


@dataclass
class AttackTrace:
    """Per-iteration diagnostics for one attacked example (T records).

    ``adv_loss[t]`` is the adversarial loss at the iterate entering step t,
    ``sample_losses[t]`` holds the N inner-sample classification losses,
    ``iterates`` has T+1 rows starting at the clean input.
    """

    adv_loss: np.ndarray
    g_l1: np.ndarray
    cos_align_g0: np.ndarray
    sample_losses: np.ndarray
    momentum_l1: np.ndarray
    guard_skipped: np.ndarray
    iterates: np.ndarray

    @property
    def loss_std(self):
        return self.sample_losses.std(axis=-1)

    def rows(self):
        std = self.loss_std
        for t in range(len(self.adv_loss)):
            yield (t, self.adv_loss[t], self.g_l1[t], self.cos_align_g0[t], std[t], self.momentum_l1[t])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for row in self.rows():
                w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


@dataclass
class BatchTrace:
    """Stacked traces; every field has a leading batch axis."""

    adv_loss: np.ndarray
    g_l1: np.ndarray
    cos_align_g0: np.ndarray
    sample_losses: np.ndarray
    momentum_l1: np.ndarray
    guard_skipped: np.ndarray
    iterates: np.ndarray

    def __len__(self):
        return self.adv_loss.shape[0]

    def __getitem__(self, i) -> AttackTrace:
        return AttackTrace(**{f.name: getattr(self, f.name)[i] for f in fields(self)})

    @classmethod
    def concat(cls, parts):
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})


class _TraceRecorder:
    def __init__(self, B, T, N, x):
        self.adv_loss = np.zeros((B, T))
        self.g_l1 = np.zeros((B, T))
        self.cos = np.zeros((B, T))
        self.sample_losses = np.zeros((B, T, N))
        self.momentum_l1 = np.zeros((B, T))
        self.skipped = np.zeros((B, T), dtype=bool)
        self.iterates = np.zeros((B, T + 1, x.shape[1]))
        self.iterates[:, 0] = x

    def finish(self):
        return BatchTrace(
            self.adv_loss, self.g_l1, self.cos, self.sample_losses, self.momentum_l1, self.skipped, self.iterates
        )


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    yb = np.broadcast_to(np.atleast_1d(np.asarray(y)), (xb.shape[0],)).copy()
    return xb, yb, single


def _cosine(a, b):
    na, nb = norm(a, 2), norm(b, 2)
    denom = na * nb
    return np.where(denom > 0, np.sum(a * b, axis=-1) / np.where(denom > 0, denom, 1.0), 0.0)


def momentum_step(m, g, eta):
    """``m <- eta*m + g/||g||_1`` per row; rows with ``||g||_1 < GUARD`` only decay."""
    l1 = norm(g, 1)
    ok = l1 >= GUARD
    step = np.where(ok[:, None], g / np.where(ok, l1, 1.0)[:, None], 0.0)
    return eta * m + step, ~ok


def fgsm(model, x, y, eps, lo=0.0, hi=1.0):
    """One signed-gradient step of size ``eps``, clamped to the valid box."""
    xb, yb, single = _as_batch(x, y)
    g = model.input_gradient(xb, yb)
    out = project_box_linf(xb + eps * sign(g), xb, eps, lo, hi)
    return out[0] if single else out


def mi_fgsm(model, x, y, cfg: AttackConfig):
    """Momentum iterative FGSM with L1-normalised gradient accumulation."""
    xb, yb, single = _as_batch(x, y)
    B, T = xb.shape[0], cfg.T
    rec = _TraceRecorder(B, T, 1, xb)
    x_adv = xb.copy()
    m = np.zeros_like(xb)
    for t in range(T):
        g = model.input_gradient(x_adv, yb)
        losses = model.loss(x_adv, yb)
        rec.adv_loss[:, t] = -losses
        rec.sample_losses[:, t, 0] = losses
        rec.g_l1[:, t] = norm(g, 1)
        rec.cos[:, t] = _cosine(g, g)
        m, skipped = momentum_step(m, g, cfg.eta)
        rec.skipped[:, t] = skipped
        rec.momentum_l1[:, t] = norm(m, 1)
        x_adv = project_box_linf(x_adv + cfg.alpha * sign(m), xb, cfg.eps, cfg.lo, cfg.hi)
        rec.iterates[:, t + 1] = x_adv
    trace = rec.finish()
    return (x_adv[0], trace[0]) if single else (x_adv, trace)


@dataclass
class DualOrderGradients:
    """Gradients at the base sample and its three probe points.

    ``d01`` and ``d23`` are the scheme's estimates of the zeroth- and
    first-order gradient differences, oriented like the forward scheme
    (``g1 - g0`` and ``g3 - g2``). For the central scheme ``g1``/``g3``
    are the forward probes and the backward ones are kept separately.
    """

    g0: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    d01: np.ndarray
    d23: np.ndarray
    scheme: str = "fdm"
    g1_back: np.ndarray | None = None
    g3_back: np.ndarray | None = None


def _probe(model, base, g_base, direction, step, y):
    """Move ``step`` along ``direction/||direction||_1`` and take the gradient there.

    Rows whose direction has ``||.||_1 < GUARD`` stay at ``base`` and reuse
    ``g_base`` instead of recomputing it.
    """
    l1 = norm(direction, 1)
    ok = l1 >= GUARD
    unit = np.where(ok[:, None], direction / np.where(ok, l1, 1.0)[:, None], 0.0)
    x_new = np.where(ok[:, None], base + step * unit, base)
    g_new = model.input_gradient(x_new, y)
    g_new = np.where(ok[:, None], g_new, g_base)
    return x_new, g_new


def dual_order_gradients(model, x0, y, alpha, scheme="fdm") -> DualOrderGradients:
    """Gradients g0..g3 at x0 and the finite-difference probe points x1..x3.

    Forward scheme, step by step::

        x1 = x0 - alpha * g0 / |g0|_1
        x2 = x0 - alpha * (g1 - g0) / |g1 - g0|_1
        x3 = x2 - alpha * g2 / |g2|_1

    The backward scheme flips every probe step and the central scheme probes
    on both sides and averages the two one-sided differences.
    """
    xb, yb, single = _as_batch(x0, y)
    scheme = scheme.lower()
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    g0 = model.input_gradient(xb, yb)
    g1b = g3b = None
    if scheme == "fdm":
        x1, g1 = _probe(model, xb, g0, g0, -alpha, yb)
        d01 = g1 - g0
        x2, g2 = _probe(model, xb, g0, d01, -alpha, yb)
        x3, g3 = _probe(model, x2, g2, g2, -alpha, yb)
        d23 = g3 - g2
    elif scheme == "bdm":
        x1, g1 = _probe(model, xb, g0, g0, alpha, yb)
        d01 = g0 - g1
        x2, g2 = _probe(model, xb, g0, d01, alpha, yb)
        x3, g3 = _probe(model, x2, g2, g2, alpha, yb)
        d23 = g2 - g3
    else:
        x1, g1 = _probe(model, xb, g0, g0, -alpha, yb)
        _, g1b = _probe(model, xb, g0, g0, alpha, yb)
        d01 = 0.5 * (g1 - g1b)
        x2, g2 = _probe(model, xb, g0, d01, -alpha, yb)
        x3, g3 = _probe(model, x2, g2, g2, -alpha, yb)
        _, g3b = _probe(model, x2, g2, g2, alpha, yb)
        d23 = 0.5 * (g3 - g3b)
    dg = DualOrderGradients(g0, g1, g2, g3, xb, x1, x2, x3, d01, d23, scheme, g1b, g3b)
    if single:
        dg = DualOrderGradients(
            **{f.name: (v[0] if isinstance(v, np.ndarray) else v) for f in fields(dg) for v in [getattr(dg, f.name)]}
        )
    return dg


def afa_objective_gradient(dg: DualOrderGradients, lambda_f, beta_f, neighbor_ascent=True):
    """``g0 + lambda_f*(beta_f*d01 + (1-beta_f)*d23)``, plus ``g1+g2+g3`` with neighbour ascent."""
    out = dg.g0 + lambda_f * (beta_f * dg.d01 + (1.0 - beta_f) * dg.d23)
    if neighbor_ascent:
        out = out + dg.g1 + dg.g2 + dg.g3
    return out


def mcas_offset(g_s, gamma):
    return -gamma * sign(g_s)


def mcas_update(g_s, eta_mcas, g0):
    return eta_mcas * g_s - g0


def _resolve_rngs(rng, B, cfg, stream_ids):
    if rng is None:
        ids = range(B) if stream_ids is None else stream_ids
        return [SeededRng(cfg.seed, int(i)) for i in ids]
    if isinstance(rng, SeededRng):
        if B != 1:
            raise ValueError("pass one SeededRng per example for batched attacks")
        return [rng]
    rngs = list(rng)
    if len(rngs) != B:
        raise ValueError(f"got {len(rngs)} rng streams for {B} examples")
    return rngs


def afa_attack(model, x, y, cfg: AttackConfig, rng=None, stream_ids=None):
    """Adversarial Flatness Attack.

    Per outer step: draw N offsets around the current iterate, shift each by
    the MCAS offset, accumulate the dual-order objective gradient over the
    samples, then take a momentum sign step projected onto the eps-box.

    ``rng`` is a :class:`SeededRng` for a single example, a sequence of them
    (one per row), or ``None`` to derive streams from ``cfg.seed`` and
    ``stream_ids`` (default ``0..B-1``).
    """
    xb, yb, single = _as_batch(x, y)
    B, d = xb.shape
    T, N = cfg.T, cfg.N
    rngs = _resolve_rngs(rng, B, cfg, stream_ids)
    needs_probes = cfg.neighbor_ascent or cfg.lambda_f != 0
    rec = _TraceRecorder(B, T, N, xb)
    x_adv = xb.copy()
    m = np.zeros_like(xb)
    g_s = np.zeros_like(xb)
    for t in range(T):
        offsets = np.stack([sample_uniform_ball(r.child(t), d, cfg.xi, N) for r in rngs])
        g_bar = np.zeros_like(xb)
        g0_sum = np.zeros_like(xb)
        if cfg.mcas_reset_per_iteration:
            g_s = np.zeros_like(xb)
        rec.adv_loss[:, t] = -model.loss(x_adv, yb)
        for i in range(N):
            x0 = x_adv + offsets[:, i]
            if cfg.mcas_enabled:
                x0 = x0 + mcas_offset(g_s, cfg.gamma_mcas)
            if needs_probes:
                dg = dual_order_gradients(model, x0, yb, cfg.alpha, cfg.scheme)
                g0 = dg.g0
                g_obj = afa_objective_gradient(dg, cfg.lambda_f, cfg.beta_f, cfg.neighbor_ascent)
            else:
                g0 = g_obj = model.input_gradient(x0, yb)
            rec.sample_losses[:, t, i] = model.loss(x0, yb)
            g_bar = g_bar + g_obj / N
            g0_sum = g0_sum + g0
            if cfg.mcas_enabled:
                g_s = mcas_update(g_s, cfg.eta_mcas, g0)
        rec.g_l1[:, t] = norm(g_bar, 1)
        rec.cos[:, t] = _cosine(g_bar, g0_sum / N)
        m, skipped = momentum_step(m, g_bar, cfg.eta)
        rec.skipped[:, t] = skipped
        rec.momentum_l1[:, t] = norm(m, 1)
        x_adv = project_box_linf(x_adv + cfg.alpha * sign(m), xb, cfg.eps, cfg.lo, cfg.hi)
        rec.iterates[:, t + 1] = x_adv
    trace = rec.finish()
    return (x_adv[0], trace[0]) if single else (x_adv, trace)


def attack_ensemble(models, x, y, cfg: AttackConfig, rng=None, stream_ids=None):
    """AFA against the logit-averaged ensemble of ``models``."""
    return afa_attack(Ensemble(models), x, y, cfg, rng, stream_ids)


def run_attack(algo, model, x, y, cfg: AttackConfig, stream_ids=None):
    """Dispatch by name; FGSM gets a trivial trace so callers can treat all alike."""
    algo = algo.lower()
    if algo == "afa":
        return afa_attack(model, x, y, cfg, stream_ids=stream_ids)
    if algo == "mi":
        return mi_fgsm(model, x, y, cfg)
    if algo == "fgsm":
        xb, yb, single = _as_batch(x, y)
        x_adv = fgsm(model, xb, yb, cfg.eps, cfg.lo, cfg.hi)
        rec = _TraceRecorder(xb.shape[0], 1, 1, xb)
        losses = model.loss(xb, yb)
        rec.adv_loss[:, 0] = -losses
        rec.sample_losses[:, 0, 0] = losses
        rec.g_l1[:, 0] = norm(model.input_gradient(xb, yb), 1)
        rec.cos[:, 0] = 1.0
        rec.iterates[:, 1] = x_adv
        trace = rec.finish()
        return (x_adv[0], trace[0]) if single else (x_adv, trace)
    raise ValueError(f"unknown attack {algo!r}; choose from afa, mi, fgsm")


def write_traces(trace: BatchTrace, out_dir, indices=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = range(len(trace)) if indices is None else indices
    for row, idx in enumerate(indices):
        trace[row].to_csv(out_dir / f"example_{int(idx):05d}.csv")
