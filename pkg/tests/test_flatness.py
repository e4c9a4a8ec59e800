import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advflat.flatness import (
    adversarial_flatness,
    check_vicinity_bound,
    estimate_flatness,
    estimate_psi0,
    estimate_psi1,
    grid_offsets,
    grid_psi0,
    hvp_oracle,
    loss_surface_grid,
    read_surface_csv,
)
from advflat.models import MlpClassifier
from advflat.numerics import SeededRng
from helpers import Linear, Quadratic, random_mlp


def test_psi0_examples():
    m = random_mlp(0)
    x = np.array([0.4, 0.6])
    assert estimate_psi0(m, x, 1, 0.0, 10, SeededRng(0)) == 0.0
    # adversarial loss z^2 <=> classification loss -z^2
    q = Quadratic(c=-1.0)
    assert estimate_psi0(q, np.zeros(1), 0, 0.5, 20000, SeededRng(1)) == pytest.approx(0.25, rel=1e-3)


def test_psi1_examples():
    lin = Linear([-3.0])  # adversarial loss 3z
    assert estimate_psi1(lin, np.array([0.2]), 0, 0.4, 1, SeededRng(0)) == pytest.approx(0.4 * 3.0)
    q = Quadratic(c=-1.0)
    assert estimate_psi1(q, np.zeros(1), 0, 0.5, 20000, SeededRng(1)) == pytest.approx(0.5, rel=1e-3)


def test_estimators_nonnegative_at_local_max():
    # adversarial loss -z^2 peaks at the centre, so every sample is a fall
    q = Quadratic(c=1.0)
    assert estimate_psi0(q, np.zeros(2), 0, 0.3, 50, SeededRng(0)) == 0.0


def test_estimators_monotone_in_n():
    m = random_mlp(3, (6,), "tanh")
    x = np.array([0.5, 0.5])
    vals0 = [estimate_psi0(m, x, 0, 0.2, n, SeededRng(7)) for n in (5, 50, 500)]
    vals1 = [estimate_psi1(m, x, 0, 0.2, n, SeededRng(7)) for n in (5, 50, 500)]
    # prefixes of the same stream are nested sample sets
    assert vals0 == sorted(vals0) and vals1 == sorted(vals1)


def test_psi1_linear_in_xi_on_linear_model():
    lin = Linear([1.0, -2.0])
    a = estimate_psi1(lin, np.array([0.5, 0.5]), 0, 0.1, 10, SeededRng(0))
    b = estimate_psi1(lin, np.array([0.5, 0.5]), 0, 0.3, 10, SeededRng(0))
    assert b == pytest.approx(3 * a, rel=1e-12)


def test_adversarial_flatness_examples():
    assert adversarial_flatness(0.25, 0.5, 1.0) == 0.25
    assert adversarial_flatness(0.25, 0.5, 0.0) == 0.5
    assert adversarial_flatness(0.25, 0.5, 0.5) == 0.375
    with pytest.raises(ValueError):
        adversarial_flatness(0.1, 0.2, 1.5)


@given(st.floats(0, 10), st.floats(0, 10))
def test_adversarial_flatness_endpoints_bitwise(p0, p1):
    assert adversarial_flatness(p0, p1, 1.0) == p0
    assert adversarial_flatness(p0, p1, 0.0) == p1


def test_estimate_flatness_record():
    m = random_mlp(4)
    est = estimate_flatness(m, np.array([0.3, 0.3]), 2, 0.1, 100, 0.5, seed=9)
    assert est.psi_af == 0.5 * est.psi0 + 0.5 * est.psi1
    assert est.n_samples == 100 and est.seed == 9 and est.xi == 0.1


def test_grid_offsets():
    pts = grid_offsets(2, 1.0, 5)
    assert pts.shape == (25, 2)
    assert any(np.array_equal(p, [0.0, 0.0]) for p in pts)
    assert np.abs(pts).max() == 1.0
    ball = grid_offsets(2, 1.0, 5, ball="l2")
    assert np.all(np.linalg.norm(ball, axis=1) <= 1.0 + 1e-12)
    with pytest.raises(ValueError):
        grid_offsets(4, 1.0, 5)


def test_vicinity_examples():
    m = random_mlp(5, (8,), "tanh")
    x = np.array([0.45, 0.55])
    rep = check_vicinity_bound(m, x, 1, 0.2, n_grid=41, beta_f=1.0)
    assert rep.violations == 0 and rep.total > 0
    q = Quadratic(c=1.0)  # adversarial loss maximal at 0
    for beta in (0.0, 0.5, 1.0):
        assert check_vicinity_bound(q, np.zeros(1), 0, 0.3, n_grid=51, beta_f=beta).violations == 0
    rep = check_vicinity_bound(m, x, 1, 0.2, n_grid=101, beta_f=0.5)
    assert rep.violations == 0


def test_vicinity_refusals():
    m = random_mlp(0, d=4)
    with pytest.raises(ValueError, match="d <= 3"):
        check_vicinity_bound(m, np.full(4, 0.5), 0, 0.1)
    with pytest.raises(ValueError):
        check_vicinity_bound(random_mlp(0), np.full(2, 0.5), 0, 0.1, n_grid=5)


def test_first_order_term_alone_fails_on_cube_corners():
    # rise at the corner is xi*(|a1|+|a2|) but xi*||a||_2 is smaller
    lin = Linear([-1.0, -1.0])
    cube = check_vicinity_bound(lin, np.array([0.5, 0.5]), 0, 0.1, n_grid=21, beta_f=0.0, ball="linf")
    assert cube.violations > 0
    assert cube.max_excess == pytest.approx(0.1 * (2 - np.sqrt(2)), rel=1e-9)
    ball = check_vicinity_bound(lin, np.array([0.5, 0.5]), 0, 0.1, n_grid=21, beta_f=0.0)
    assert ball.violations == 0


def test_hvp_examples():
    lin = MlpClassifier([np.array([[1.0, -2.0], [0.5, 0.3]])], [np.zeros(2)])
    lin_q = Linear([1.0, 2.0])
    assert np.allclose(hvp_oracle(lin_q, np.array([0.3, 0.3]), 0, np.array([1.0, 0.0])), 0.0)
    q = Quadratic(c=1.0)
    for h in (1e-1, 1e-4):
        assert hvp_oracle(q, np.array([0.7]), 0, np.array([1.0]), h=h) == pytest.approx([2.0])
    # a softmax linear model is smooth, a relu MLP is not
    hvp_oracle(lin, np.array([0.1, 0.2]), 0, np.array([1.0, 0.0]))
    with pytest.raises(ValueError, match="relu"):
        hvp_oracle(random_mlp(0, (4,), "relu"), np.array([0.1, 0.2]), 0, np.array([1.0, 0.0]))


def test_hvp_linearity():
    m = random_mlp(11, (6,), "tanh")
    x = np.array([0.4, 0.7])
    u, v = np.array([0.3, -0.2]), np.array([0.1, 0.5])
    lhs = hvp_oracle(m, x, 1, u + v)
    rhs = hvp_oracle(m, x, 1, u) + hvp_oracle(m, x, 1, v)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_surface_examples(tmp_path):
    const = MlpClassifier([np.zeros((3, 2))], [np.array([0.2, 0.1, 0.0])])
    g = loss_surface_grid(const, np.array([0.5, 0.5]), 1, SeededRng(0), 0.1, 3)
    assert g.losses.shape == (3, 3) and np.all(g.losses == g.losses[1, 1])

    m = random_mlp(2, (5,), "softplus", d=3)
    x = np.array([0.2, 0.4, 0.9])
    a = loss_surface_grid(m, x, 0, SeededRng(5), 0.3, 21)
    assert a.losses[10, 10] == m.loss(x, 0)
    assert abs(a.direction_a @ a.direction_b) < 1e-12
    assert np.linalg.norm(a.direction_a) == pytest.approx(1.0)
    b = loss_surface_grid(m, x, 0, SeededRng(5), 0.3, 21)
    assert np.array_equal(a.losses, b.losses)

    a.to_csv(tmp_path / "s.csv")
    a.to_json(tmp_path / "s.json")
    header, mat = read_surface_csv(tmp_path / "s.csv")
    assert np.array_equal(mat, a.losses)
    assert header["resolution"] == "21" and float(header["center_loss"]) == a.center_loss
    side = json.loads((tmp_path / "s.json").read_text())
    assert np.array_equal(side["direction_a"], a.direction_a)


def test_surface_errors():
    m = random_mlp(0)
    with pytest.raises(ValueError):
        loss_surface_grid(m, np.array([0.5, 0.5]), 0, SeededRng(0), 0.1, 4)
    with pytest.raises(ValueError):
        loss_surface_grid(m, np.array([0.5, 0.5]), 0, SeededRng(0), 0.0, 5)
    with pytest.raises(ValueError):
        loss_surface_grid(random_mlp(0, d=1), np.array([0.5]), 0, SeededRng(0), 0.1, 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
def test_sampled_psi0_never_exceeds_dense_grid(seed, xi):
    m = random_mlp(seed % 50, (5,), "tanh")
    x = np.array([0.5, 0.5])
    s = estimate_psi0(m, x, 0, xi, 50, SeededRng(seed))
    assert 0.0 <= s <= grid_psi0(m, x, 0, xi, 201) + 1e-3 * xi
