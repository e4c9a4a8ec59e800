"""Zeroth/first-order adversarial flatness estimators and landscape probes.

The adversarial loss is the negated classification loss, ``L_adv(x) = -L(x)``.
Every quantity in this module is stated in terms of ``L_adv`` so that a wrong
sign shows up as a failing bound rather than a silently inverted attack.

Models are duck-typed: anything with batched ``loss(x, y)`` and
``input_gradient(x, y)`` works, which lets tests plug in analytic losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .numerics import SeededRng, norm, sample_uniform_ball

MAX_GRID_DIM = 3


def adversarial_loss(model, x, y):
    return -np.asarray(model.loss(x, y))


def adversarial_gradient(model, x, y):
    return -np.asarray(model.input_gradient(x, y))


def _batch_labels(y, n):
    return np.full(n, y) if np.ndim(y) == 0 else np.asarray(y)


@dataclass
class FlatnessEstimate:
    psi0: float
    psi1: float
    psi_af: float
    xi: float
    beta_f: float
    n_samples: int
    seed: int | None = None


def estimate_psi0(model, x_adv, y, xi, n, rng: SeededRng) -> float:
    """Sampled zeroth-order flatness: the largest rise of ``L_adv`` over the ball.

    The centre (offset zero) is always part of the candidate set, hence the
    result is never negative.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    offsets = sample_uniform_ball(rng, x_adv.size, xi, n)
    centre = adversarial_loss(model, x_adv, y)
    around = adversarial_loss(model, x_adv + offsets, _batch_labels(y, n))
    return float(max(0.0, np.max(around - centre)))


def estimate_psi1(model, x_adv, y, xi, n, rng: SeededRng) -> float:
    """Sampled first-order flatness: ``xi`` times the largest gradient L2 norm."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    offsets = sample_uniform_ball(rng, x_adv.size, xi, n)
    g_centre = norm(adversarial_gradient(model, x_adv, y), 2)
    g_around = norm(adversarial_gradient(model, x_adv + offsets, _batch_labels(y, n)), 2)
    return float(xi * max(g_centre, np.max(g_around)))


def adversarial_flatness(psi0, psi1, beta_f):
    if not 0.0 <= beta_f <= 1.0:
        raise ValueError("beta_f must lie in [0, 1]")
    # endpoints return the input exactly (no 0*x + 1*y rounding)
    if beta_f == 1.0:
        return psi0
    if beta_f == 0.0:
        return psi1
    return beta_f * psi0 + (1.0 - beta_f) * psi1


def estimate_flatness(model, x_adv, y, xi, n, beta_f, seed=0, stream_id=0) -> FlatnessEstimate:
    """Both estimators on the same sample set, combined into ``psi_af``."""
    psi0 = estimate_psi0(model, x_adv, y, xi, n, SeededRng(seed, stream_id))
    psi1 = estimate_psi1(model, x_adv, y, xi, n, SeededRng(seed, stream_id))
    return FlatnessEstimate(psi0, psi1, adversarial_flatness(psi0, psi1, beta_f), xi, beta_f, n, seed)


def grid_offsets(d, xi, n_grid, ball="linf") -> np.ndarray:
    """All points of a regular ``n_grid^d`` lattice on ``[-xi, xi]^d``.

    ``ball="l2"`` keeps only lattice points with ``||offset||_2 <= xi``.
    The lattice always contains the origin when ``n_grid`` is odd.
    """
    if d > MAX_GRID_DIM:
        raise ValueError(f"grid brute force refused for d={d} > {MAX_GRID_DIM}")
    half = (n_grid - 1) / 2
    axis = (np.arange(n_grid) - half) * (xi / half) if n_grid > 1 else np.zeros(1)
    pts = np.array(list(product(axis, repeat=d)), dtype=np.float64)
    if ball == "l2":
        pts = pts[norm(pts, 2) <= xi * (1 + 1e-12)]
    elif ball != "linf":
        raise ValueError(f"unknown ball {ball!r}")
    return pts


def grid_psi0(model, x_adv, y, xi, n_grid, ball="linf") -> float:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    pts = grid_offsets(x_adv.size, xi, n_grid, ball)
    rise = adversarial_loss(model, x_adv + pts, _batch_labels(y, len(pts))) - adversarial_loss(model, x_adv, y)
    return float(max(0.0, np.max(rise)))


def grid_psi1(model, x_adv, y, xi, n_grid, ball="linf") -> float:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    pts = grid_offsets(x_adv.size, xi, n_grid, ball)
    g = norm(adversarial_gradient(model, x_adv + pts, _batch_labels(y, len(pts))), 2)
    return float(xi * max(np.max(g), norm(adversarial_gradient(model, x_adv, y), 2)))


@dataclass
class VicinityReport:
    violations: int
    total: int
    max_excess: float
    psi0: float
    psi1: float
    psi_af: float
    beta_f: float
    ball: str


def check_vicinity_bound(model, x_adv, y, xi, n_grid=101, beta_f=0.5, tol=1e-9, ball="l2") -> VicinityReport:
    """Count lattice offsets where ``L_adv(x+o) > L_adv(x) + psi_af + tol``.

    Both flatness terms are brute-forced on the same lattice. The mean-value /
    Cauchy-Schwarz argument behind the bound needs ``||o||_2 <= xi``, so the
    default lattice is clipped to the L2 ball; ``ball="linf"`` evaluates the
    full cube, where the first-order term alone can undershoot by up to
    ``sqrt(d)``.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    d = x_adv.size
    if d > MAX_GRID_DIM:
        raise ValueError(f"vicinity check needs d <= {MAX_GRID_DIM}, got d={d}")
    if n_grid < 11:
        raise ValueError("n_grid must be at least 11")
    pts = grid_offsets(d, xi, n_grid, ball)
    labels = _batch_labels(y, len(pts))
    centre = float(adversarial_loss(model, x_adv, y))
    rise = adversarial_loss(model, x_adv + pts, labels) - centre
    psi0 = float(max(0.0, np.max(rise)))
    gnorm = norm(adversarial_gradient(model, x_adv + pts, labels), 2)
    psi1 = float(xi * max(np.max(gnorm), norm(adversarial_gradient(model, x_adv, y), 2)))
    psi_af = adversarial_flatness(psi0, psi1, beta_f)
    excess = rise - psi_af
    return VicinityReport(
        violations=int(np.sum(excess > tol)),
        total=len(pts),
        max_excess=float(np.max(excess)),
        psi0=psi0,
        psi1=psi1,
        psi_af=float(psi_af),
        beta_f=beta_f,
        ball=ball,
    )


def hvp_oracle(model, x, y, direction, h=1e-4) -> np.ndarray:
    """Central difference of gradients: ``(g(x + h v) - g(x - h v)) / 2h ≈ H v``."""
    if h <= 0:
        raise ValueError("h must be positive")
    if not getattr(model, "is_smooth", True):
        raise ValueError("Hessian-vector products need a C2 model; relu networks are excluded")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(direction, dtype=np.float64)
    return (model.input_gradient(x + h * v, y) - model.input_gradient(x - h * v, y)) / (2 * h)


@dataclass
class SurfaceGrid:
    direction_a: np.ndarray
    direction_b: np.ndarray
    range: float
    resolution: int
    losses: np.ndarray
    center_loss: float
    seed: int | None = None
    coords: np.ndarray = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        lines = [
            f"# range={self.range!r},resolution={self.resolution},seed={self.seed},center_loss={self.center_loss:.17g}"
        ]
        lines += [",".join(f"{v:.17g}" for v in row) for row in self.losses]
        Path(path).write_text("\n".join(lines) + "\n")

    def to_json(self, path) -> None:
        payload = {
            "range": self.range,
            "resolution": self.resolution,
            "seed": self.seed,
            "center_loss": self.center_loss,
            "direction_a": self.direction_a.tolist(),
            "direction_b": self.direction_b.tolist(),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_surface_csv(path):
    """Parse a surface CSV back into ``(header dict, loss matrix)``."""
    text = Path(path).read_text().splitlines()
    header = dict(item.split("=", 1) for item in text[0].lstrip("# ").split(","))
    matrix = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line])
    return header, matrix


def loss_surface_grid(model, x_adv, y, rng: SeededRng, range_, resolution) -> SurfaceGrid:
    """Classification loss on a 2-D slice through ``x_adv``.

    The slice is spanned by two orthonormalized Gaussian directions; entry
    ``[i, j]`` is the loss at ``x_adv + a_i * u + b_j * v``.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_adv.size < 2:
        raise ValueError("loss surface needs d >= 2")
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")
    if range_ <= 0:
        raise ValueError("range must be positive")
    raw = rng.normal((2, x_adv.size))
    u = raw[0] / norm(raw[0], 2)
    v = raw[1] - (raw[1] @ u) * u
    v = v / norm(v, 2)
    mid = (resolution - 1) // 2
    coords = (np.arange(resolution) - mid) * (range_ / mid)
    a, b = np.meshgrid(coords, coords, indexing="ij")
    pts = x_adv + a.reshape(-1, 1) * u + b.reshape(-1, 1) * v
    losses = np.asarray(model.loss(pts, _batch_labels(y, len(pts)))).reshape(resolution, resolution)
    center = float(model.loss(x_adv, y))
    # the batched evaluation may differ from the single-point call by an ulp
    losses[mid, mid] = center
    return SurfaceGrid(u, v, float(range_), resolution, losses, center, rng.master_seed, coords)
