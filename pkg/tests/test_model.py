import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nearopt import (ControlProcess, ControlSet, DomainError, InvalidModelError, ModelCoefficients,
                     MultiplierPair, PiecewiseConstant, polynomial_cost, validate_model)
from nearopt.model import eval_coefficients, lipschitz_in_u
from nearopt.paths import TimeGrid, sample_brownian

ZERO_COST = polynomial_cost()


def test_example2_coefficients_at_half(example2):
    coeffs = example2[0]
    assert tuple(eval_coefficients(coeffs, 0.5)) == (0, 0, 0, 1, 0, 0, 2)


def test_zero_model_coefficients():
    for t in (0.0, 0.3, 1.0):
        assert tuple(eval_coefficients(ModelCoefficients(), t)) == (0,) * 7


def test_piecewise_is_right_continuous():
    coeffs = ModelCoefficients(A=PiecewiseConstant((0.0, 0.5), (1.0, 3.0)))
    assert eval_coefficients(coeffs, 0.5).A == 3.0
    assert eval_coefficients(coeffs, 0.4999).A == 1.0
    assert eval_coefficients(coeffs, 1.0).A == 3.0


@pytest.mark.parametrize("t", [-0.01, 1.01])
def test_eval_outside_horizon(t):
    with pytest.raises(DomainError):
        eval_coefficients(ModelCoefficients(), t)


def test_evaluation_is_pure():
    coeffs = ModelCoefficients(A=PiecewiseConstant((0.0, 0.25, 0.7), (1.0, -2.0, 0.5)), c=3.0)
    t = np.linspace(0, 1, 101)
    assert np.array_equal(coeffs.on_grid(t).A, coeffs.on_grid(t).A)


@pytest.mark.parametrize("bp, vals", [((0.1,), (1.0,)), ((0.0, 0.5, 0.4), (1, 2, 3)), ((0.0,), (1, 2))])
def test_piecewise_rejects_bad_tables(bp, vals):
    with pytest.raises(ValueError):
        PiecewiseConstant(bp, vals)


def test_presets_pass_validation(example1, example2):
    for coeffs, cost, uset, _ in (example1, example2):
        rep = validate_model(coeffs, cost, uset)
        assert rep.passed, [c.name for c in rep.failed()]


def test_zero_model_validates_with_zero_constants():
    rep = validate_model(ModelCoefficients(), ZERO_COST, ControlSet(0, 1))
    assert rep.passed
    for name in ("H2:lipschitz:phi_x", "H2:lipschitz:gamma_y", "H2:lipschitz:l_x,l_y"):
        assert rep.get(name).constant == 0.0


def test_quartic_terminal_cost_fails_lipschitz_probe():
    cost = polynomial_cost(terminal=[0, 0, 0, 0, 1])
    rep = validate_model(ModelCoefficients(), cost, ControlSet(0, 1))
    check = rep.get("H2:lipschitz:phi_x")
    assert not check.passed
    assert "x" in check.witness
    assert not rep.get("H1:bounded:phi_xx").passed


def test_validation_rejects_coarse_grid():
    with pytest.raises(ValueError):
        validate_model(ModelCoefficients(), ZERO_COST, ControlSet(0, 1), grid_density=8)


def test_non_finite_coefficient_is_named():
    coeffs = ModelCoefficients(b=PiecewiseConstant((0.0, 0.5), (1.0, math.inf)))
    with pytest.raises(InvalidModelError) as info:
        validate_model(coeffs, ZERO_COST, ControlSet(0, 1))
    assert info.value.coefficient == "b"
    assert info.value.t >= 0.5


def test_wrong_derivative_is_caught():
    good = polynomial_cost(running=[(1.0, 2, 0, 0)])
    bad = good.__class__(**{**good.__dict__, "l_x": lambda t, x, y, u: 3 * x})
    rep = validate_model(ModelCoefficients(), bad, ControlSet(0, 1))
    assert not rep.get("derivative:l_x").passed
    assert rep.get("derivative:l_y").passed


monomial = st.tuples(st.floats(-3, 3, allow_nan=False), st.integers(0, 2), st.integers(0, 2), st.integers(0, 3))


@settings(max_examples=40, deadline=None)
@given(st.lists(monomial, max_size=4),
       st.lists(st.floats(-2, 2, allow_nan=False), max_size=4),
       st.lists(st.floats(-2, 2, allow_nan=False), max_size=4))
def test_polynomial_derivatives_match_finite_differences(running, terminal, initial):
    cost = polynomial_cost(running, terminal, initial)
    rep = validate_model(ModelCoefficients(), cost, ControlSet(-1, 1), n_probe=100, box=3.0)
    for c in rep.checks:
        if c.name.startswith("derivative:"):
            assert c.passed, (c.name, c.detail)


def test_polynomial_cost_values():
    cost = polynomial_cost(running=[(2.0, 1, 1, 0), (1.0, 0, 0, 2)], terminal=[1, 0, 3], initial=[0, -1])
    assert cost.l(0.0, 2.0, 3.0, 4.0) == pytest.approx(2 * 2 * 3 + 16)
    assert cost.l_xy(0.0, 2.0, 3.0, 4.0) == pytest.approx(2.0)
    assert cost.l_u(0.0, 2.0, 3.0, 4.0) == pytest.approx(8.0)
    assert cost.phi(2.0) == pytest.approx(13.0)
    assert cost.phi_xx(5.0) == pytest.approx(6.0)
    assert cost.gamma_y(7.0) == pytest.approx(-1.0)
    assert cost.is_quadratic_in_state(ControlSet(0, 1))
    assert not polynomial_cost(running=[(1.0, 3, 0, 0)]).is_quadratic_in_state(ControlSet(0, 1))


def test_quadratic_probe_without_source():
    cost = polynomial_cost(running=[(1.0, 2, 0, 1)], terminal=[0, 0, 1])
    stripped = cost.__class__(**{**cost.__dict__, "source": None})
    assert stripped.is_quadratic_in_state(ControlSet(0, 1))
    cubic = polynomial_cost(terminal=[0, 0, 0, 1])
    assert not cubic.__class__(**{**cubic.__dict__, "source": None}).is_quadratic_in_state(ControlSet(0, 1))


def test_clamped_controls_stay_in_set():
    uset = ControlSet(0.0, 1.0)
    grid = TimeGrid(50)
    ens = sample_brownian(grid, 64, seed=3)
    u = ControlProcess.feedback(lambda t, x: 5 * x, uset=uset, clamp=True)
    x = np.tile(np.linspace(-3, 3, 51), (64, 1))
    vals = u.realize(ens, x)
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    det = ControlProcess.deterministic(lambda t: 3 * t - 1, uset=uset, clamp=True)
    assert uset.contains(det.grid_values(grid))


def test_adapted_control_only_sees_past():
    grid = TimeGrid(20)
    ens = sample_brownian(grid, 10, seed=1)
    seen = []

    def rule(i, t, W_past):
        seen.append(W_past.shape[1])
        return W_past[:, -1]

    u = ControlProcess.adapted(rule, ens)
    assert seen == list(range(1, 21))
    # u_i = W(t_i) only uses increments 0..i-1
    np.testing.assert_array_equal(u.values, ens.W[:, :-1])


def test_clamp_requires_set():
    with pytest.raises(ValueError):
        ControlProcess("grid", [0.5], clamp=True)


def test_multiplier_normalization(example1):
    mult = example1[3]
    assert mult.normalization(np.random.default_rng(0).normal(size=100)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        MultiplierPair(-0.1)
    scaled = mult.scaled(2.0)
    assert scaled.theta0 == pytest.approx(2 * mult.theta0)
    assert scaled.theta1(0.3) == pytest.approx(2 * mult.theta1(0.3))


def test_lipschitz_in_u():
    uset = ControlSet(0, 1)
    assert lipschitz_in_u(polynomial_cost(running=[(1.0, 0, 0, 1)]), uset) == pytest.approx(1.0)
    assert lipschitz_in_u(polynomial_cost(), uset) == 0.0


def test_control_set():
    uset = ControlSet(-1, 2)
    assert uset.contains([-1, 0, 2]) and not uset.contains(2.1)
    assert uset.grid(4).tolist() == [-1, 0, 1, 2]
    with pytest.raises(ValueError):
        ControlSet(1, 0)
