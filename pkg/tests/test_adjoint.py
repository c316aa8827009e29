import csv
import math

import numpy as np
import pytest

from conftest import SQRT2, random_coefficients
from nearopt import (ControlProcess, ModelCoefficients, MultiplierPair, TimeGrid, UnsupportedSolverError,
                     polynomial_cost)
from nearopt import adjoint, fbsde
from nearopt.paths import sample_brownian


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _random_lq(rng):
    return polynomial_cost(running=[(rng.uniform(0, 1), 2, 0, 0), (rng.uniform(-1, 1), 1, 0, 0), (1.0, 0, 0, 2)],
                           terminal=[0, rng.uniform(-1, 1), rng.uniform(0, 1)],
                           initial=[0, rng.uniform(-1, 1)])


def test_example1_necessary_adjoints(example1):
    coeffs, cost, uset, mult = example1
    ens = sample_brownian(TimeGrid(100), 300, seed=1)
    eps = 0.04
    u = ControlProcess.constant(1 - math.sqrt(eps), uset)
    sol = fbsde.solve(coeffs, u, ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol, mult, "necessary")
    assert b.first.method == "closed-form" and b.second.deterministic_flag
    np.testing.assert_allclose(b.q, SQRT2 / 2, atol=1e-14)
    np.testing.assert_allclose(b.p, sol.x, atol=1e-13)
    np.testing.assert_allclose(b.k, 1 - math.sqrt(eps), atol=1e-13)
    np.testing.assert_allclose(b.P1, 1.0, atol=1e-13)
    assert np.all(b.P2 == 0) and np.all(b.P3 == 0)


def test_example2_sufficient_adjoints(example2):
    coeffs, cost, uset, _ = example2
    ens = sample_brownian(TimeGrid(80), 200, seed=2)
    u = ControlProcess.constant(0.7, uset)
    b = adjoint.solve_adjoints(coeffs, cost, fbsde.solve(coeffs, u, ens), None, "sufficient")
    np.testing.assert_allclose(b.q, 1.0, atol=1e-14)
    np.testing.assert_allclose(b.p, ens.W * 0.7, atol=1e-13)
    np.testing.assert_allclose(b.k, 0.7, atol=1e-13)
    np.testing.assert_allclose(b.P1, 1.0, atol=1e-13)
    assert b.theta == 1.0 and b.variant == "sufficient"


def test_zero_theta0_gives_zero_q(example1):
    coeffs, cost, uset, _ = example1
    ens = sample_brownian(TimeGrid(40), 50)
    sol = fbsde.solve(coeffs, ControlProcess.constant(1.0, uset), ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol, MultiplierPair(0.0, 1.0), "necessary")
    assert np.all(b.q == 0.0)
    np.testing.assert_allclose(b.p, -1.0, atol=1e-14)
    assert np.all(b.P1 == 0.0)


def test_zero_problem_has_zero_adjoints():
    ens = sample_brownian(TimeGrid(20), 30)
    sol = fbsde.solve(ModelCoefficients(D=1.0), ControlProcess.constant(0.5), ens)
    b = adjoint.solve_adjoints(ModelCoefficients(D=1.0), polynomial_cost(), sol)
    for name in ("p", "q", "k", "P1", "P2", "P3"):
        assert np.all(getattr(b, name) == 0.0), name


def test_necessary_variant_needs_multipliers(example1):
    coeffs, cost, uset, _ = example1
    sol = fbsde.solve(coeffs, ControlProcess.constant(1.0, uset), sample_brownian(TimeGrid(10), 5))
    with pytest.raises(ValueError):
        adjoint.solve_adjoints(coeffs, cost, sol, None, "necessary")
    with pytest.raises(ValueError):
        adjoint.solve_adjoints(coeffs, cost, sol, None, "other")


def test_closed_form_rejects_feedback_control(example1):
    coeffs, cost, uset, mult = example1
    ens = sample_brownian(TimeGrid(20), 1000, seed=3)
    u = ControlProcess.feedback(lambda t, x: x, uset=uset, clamp=True)
    sol = fbsde.solve(coeffs, u, ens)
    with pytest.raises(UnsupportedSolverError):
        adjoint.solve_adjoints(coeffs, cost, sol, mult, "necessary", method="closed-form")
    b = adjoint.solve_adjoints(coeffs, cost, sol, mult, "necessary")
    assert b.first.method == "lsmc"
    assert "deterministic" in adjoint.pk_closed_form_check(cost, sol, b.q)


def test_cubic_terminal_cost_needs_lsmc():
    cost = polynomial_cost(terminal=[0, 0, 0, 1])
    ens = sample_brownian(TimeGrid(10), 1000)
    coeffs = ModelCoefficients(D=1.0, x0=0.5)
    sol = fbsde.solve(coeffs, ControlProcess.constant(0.5), ens)
    q = adjoint.solve_q_forward(coeffs, cost, sol, None, "sufficient")
    assert adjoint.pk_closed_form_check(cost, sol, q) == "phi_x is not affine"
    with pytest.raises(UnsupportedSolverError):
        adjoint.solve_second_order(coeffs, cost, sol, None, "sufficient", method="closed-form")


@pytest.mark.parametrize("seed", range(4))
def test_closed_form_matches_lsmc_on_random_models(seed):
    rng = np.random.default_rng(500 + seed)
    coeffs = random_coefficients(rng)
    cost = _random_lq(rng)
    ens = sample_brownian(TimeGrid(100), 10000, seed=seed)
    u = ControlProcess.deterministic(lambda t: np.cos(3 * t))
    sol = fbsde.solve(coeffs, u, ens)
    ref = adjoint.solve_adjoints(coeffs, cost, sol, method="closed-form")
    got = adjoint.solve_adjoints(coeffs, cost, sol, method="lsmc")
    assert got.first.method == "lsmc" and not got.second.deterministic_flag
    for name in ("p", "k", "P1"):
        assert rel_l2(getattr(got, name), getattr(ref, name)) <= 0.02, name


def test_adjoints_are_linear_in_multipliers(example1):
    coeffs, cost, uset, mult = example1
    ens = sample_brownian(TimeGrid(50), 100, seed=4)
    sol = fbsde.solve(coeffs, ControlProcess.deterministic(lambda t: t, uset), ens)
    b1 = adjoint.solve_adjoints(coeffs, cost, sol, mult, "necessary")
    b3 = adjoint.solve_adjoints(coeffs, cost, sol, mult.scaled(3.0), "necessary")
    for name in ("p", "q", "k", "P1", "P2", "P3"):
        np.testing.assert_allclose(getattr(b3, name), 3 * getattr(b1, name), atol=1e-12)


def test_duality_is_trivial_for_identical_controls(example2):
    coeffs, cost, uset, _ = example2
    ens = sample_brownian(TimeGrid(40), 200, seed=5)
    sol = fbsde.solve(coeffs, ControlProcess.constant(0.8, uset), ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol)
    rep = adjoint.duality_check(coeffs, cost, sol, sol, b)
    assert rep.passed
    assert rep.state.lhs == 0.0 and rep.state.rhs == 0.0 and rep.backward.gap == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_duality_on_random_models(seed):
    rng = np.random.default_rng(700 + seed)
    coeffs = random_coefficients(rng)
    cost = _random_lq(rng)
    ens = sample_brownian(TimeGrid(100), 5000, seed=seed)
    sol = fbsde.solve(coeffs, ControlProcess.deterministic(lambda t: np.sin(4 * t)), ens)
    other = fbsde.solve(coeffs, ControlProcess.constant(0.3), ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol)
    rep = adjoint.duality_check(coeffs, cost, sol, other, b)
    assert rep.passed, rep.to_dict()
    d = rep.to_dict()
    assert set(d) == {"state", "backward", "passed"}


def test_duality_rejects_other_ensemble(example2):
    coeffs, cost, uset, _ = example2
    u = ControlProcess.constant(1.0, uset)
    s1 = fbsde.solve(coeffs, u, sample_brownian(TimeGrid(10), 5))
    s2 = fbsde.solve(coeffs, u, sample_brownian(TimeGrid(20), 5))
    from nearopt import IncompatibleError
    with pytest.raises(IncompatibleError):
        adjoint.duality_check(coeffs, cost, s1, s2, adjoint.solve_adjoints(coeffs, cost, s1))


def test_moment_helpers(example1):
    coeffs, cost, uset, mult = example1
    g = TimeGrid(100)
    ens = sample_brownian(g, 20000, seed=6)
    eps = 0.09
    b0 = adjoint.solve_adjoints(coeffs, cost, fbsde.solve(coeffs, ControlProcess.constant(1.0, uset), ens),
                                mult, "necessary")
    be = adjoint.solve_adjoints(coeffs, cost,
                                fbsde.solve(coeffs, ControlProcess.constant(1 - math.sqrt(eps), uset), ens),
                                mult, "necessary")
    assert adjoint.pk_difference(b0, b0, g.dt, 2) == 0.0
    # p - p' = sqrt(eps) W and k - k' = sqrt(eps), so the difference is eps (E int W^2 dt + 1)
    expected = eps * (np.sum(g.times[:-1]) * g.dt + 1)
    assert adjoint.pk_difference(b0, be, g.dt, 2) == pytest.approx(expected, rel=0.03)
    assert adjoint.second_order_moment(b0, g.dt) == pytest.approx(1.0)
    m1 = adjoint.first_order_moment(b0, g.dt)
    assert m1 == pytest.approx(0.5 + np.mean(np.max(ens.W ** 2, axis=1)) + 1.0)


def test_adjoint_csv(tmp_path, example2):
    coeffs, cost, uset, _ = example2
    g = TimeGrid(3)
    sol = fbsde.solve(coeffs, ControlProcess.constant(1.0, uset), sample_brownian(g, 4))
    b = adjoint.solve_adjoints(coeffs, cost, sol)
    path = tmp_path / "adj.csv"
    adjoint.write_adjoints_csv(b, g.times, path, max_paths=2)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == adjoint.ADJOINT_COLUMNS
    assert len(rows) == 1 + 2 * 4
    assert rows[4][4] == "" and rows[4][8] == ""
    assert float(rows[2][2]) == b.p[0, 1]
