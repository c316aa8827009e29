import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nearopt import ControlProcess, ControlSet, DomainError, IncompatibleError, SpikeSpec, TimeGrid
from nearopt import adjoint, fbsde
from nearopt.paths import (PathEnsemble, WeightProcess, build_weight, ekeland_distance, sample_brownian,
                           spike_variation, weighted_distance)

UNIT = ControlSet(0.0, 1.0)


def test_time_grid():
    g = TimeGrid(8)
    assert g.times[0] == 0.0 and g.times[-1] == 1.0
    assert np.all(np.diff(g.times) > 0)
    assert g.dt == pytest.approx(0.125)
    with pytest.raises(ValueError):
        TimeGrid(0)


def test_terminal_variance_of_brownian_motion():
    ens = sample_brownian(TimeGrid(1), 10 ** 6, seed=7)
    assert 0.99 <= ens.W[:, -1].var() <= 1.01


def test_brownian_starts_at_zero_and_is_reproducible():
    g = TimeGrid(30)
    a = sample_brownian(g, 500, seed=11)
    b = sample_brownian(g, 500, seed=11)
    assert np.all(a.W[:, 0] == 0.0)
    assert np.array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, sample_brownian(g, 500, seed=12).increments)


def test_path_draws_do_not_depend_on_ensemble_size():
    g = TimeGrid(10)
    small = sample_brownian(g, 100, seed=5)
    large = sample_brownian(g, 5000, seed=5)
    assert np.array_equal(small.increments, large.increments[:100])


def test_increment_moments_within_five_sigma():
    g = TimeGrid(16)
    n = 200000
    dW = sample_brownian(g, n, seed=2).increments
    mean_se = math.sqrt(g.dt / n)
    var_se = g.dt * math.sqrt(2.0 / n)
    assert np.all(np.abs(dW.mean(axis=0)) <= 5 * mean_se)
    assert np.all(np.abs(dW.var(axis=0) - g.dt) <= 5 * var_se)


def test_increments_are_read_only():
    ens = sample_brownian(TimeGrid(4), 3)
    with pytest.raises(ValueError):
        ens.increments[0, 0] = 1.0


def test_ekeland_basic_values():
    g = TimeGrid(40)
    ens = sample_brownian(g, 20)
    zero, one = ControlProcess.constant(0.0), ControlProcess.constant(1.0)
    assert ekeland_distance(one, one, ens) == 0.0
    assert ekeland_distance(zero, one, ens) == 1.0


@pytest.mark.parametrize("n_steps", [50, 100, 137])
def test_spike_distance_equals_width(n_steps):
    g = TimeGrid(n_steps)
    ens = sample_brownian(g, 8)
    u = ControlProcess.constant(1.0, UNIT)
    v = spike_variation(u, SpikeSpec(0.2, 0.1, 0.0), g)
    assert abs(ekeland_distance(u, v, ens) - 0.1) <= 1.0 / n_steps + 1e-12


def test_distance_mismatch_raises():
    ens = sample_brownian(TimeGrid(10), 4)
    with pytest.raises(IncompatibleError):
        ekeland_distance(np.zeros(9), np.zeros(10), ens)


controls = st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=12, max_size=12)


@settings(max_examples=60, deadline=None)
@given(controls, controls, controls)
def test_ekeland_metric_axioms(a, b, c):
    ens = sample_brownian(TimeGrid(12), 3)
    d = lambda u, v: ekeland_distance(np.array(u), np.array(v), ens)  # noqa: E731
    assert 0.0 <= d(a, b) <= 1.0
    assert d(a, b) == d(b, a)
    assert d(a, a) == 0.0
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-15


def test_feedback_distance_uses_tolerance():
    g = TimeGrid(10)
    ens = sample_brownian(g, 5)
    x = np.zeros((5, 11))
    u = ControlProcess.feedback(lambda t, x: 0.1 + 0.2 + 0 * x)
    v = ControlProcess.feedback(lambda t, x: 0.3 + 0 * x)
    assert ekeland_distance(u, v, ens, x_u=x, x_v=x) == 0.0
    assert ekeland_distance(u, v, ens, tol=0.0, x_u=x, x_v=x) == 1.0


def test_weighted_distance_unit_weight():
    g = TimeGrid(25)
    ens = sample_brownian(g, 10)
    w = WeightProcess(np.ones((10, 25)))
    assert weighted_distance(ControlProcess.constant(1.0), ControlProcess.constant(0.0), w, ens) == pytest.approx(1.0)
    assert weighted_distance(ControlProcess.constant(0.4), ControlProcess.constant(0.4), w, ens) == 0.0
    with pytest.raises(IncompatibleError):
        weighted_distance(ControlProcess.constant(1.0), ControlProcess.constant(0.0),
                          WeightProcess(np.ones((10, 24))), ens)


def test_weighted_distance_matches_path_loop(example2):
    coeffs, cost, uset, mult = example2
    g = TimeGrid(40)
    ens = sample_brownian(g, 300, seed=4)
    eps = 0.2
    u = ControlProcess.constant(1 - eps ** 2, uset)
    v = ControlProcess.constant(1 - eps ** 2 + 0.1)
    sol = fbsde.solve(coeffs, u, ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol, mult, "sufficient")
    w = build_weight(b, sol)
    got = weighted_distance(u, v, w, ens)
    total = 0.0
    for j in range(ens.n_paths):
        acc = 0.0
        for i in range(g.n_steps):
            wv = (1 + abs(b.p[j, i]) + abs(b.q[j, i]) + abs(b.k[j, i]) + abs(b.P1[j, i])
                  + abs(b.P1[j, i]) * abs(sol.x[j, i]))
            acc += wv * abs((1 - eps ** 2) - (1 - eps ** 2 + 0.1)) * g.dt
        total += acc
    assert got == pytest.approx(total / ens.n_paths, abs=1e-12)


def test_build_weight_example1(example1):
    coeffs, cost, uset, mult = example1
    g = TimeGrid(50)
    ens = sample_brownian(g, 20, seed=9)
    eps = 0.04
    u = ControlProcess.constant(1 - math.sqrt(eps), uset)
    sol = fbsde.solve(coeffs, u, ens)
    b = adjoint.solve_adjoints(coeffs, cost, sol, mult, "necessary")
    w = build_weight(b, sol).values
    W = ens.W[:, :-1]
    hand = 1 + 0.8 * np.abs(W) + 0.8 + math.sqrt(2) / 2 + 1 + np.abs(0.8 * W)
    np.testing.assert_allclose(w, hand, atol=1e-12)
    assert w.min() >= 1.0


def test_build_weight_of_zero_bundle_is_one():
    class Zero:
        p = q = P1 = np.zeros((3, 6))
        k = np.zeros((3, 5))

    class Sol:
        x = np.zeros((3, 6))

    assert np.all(build_weight(Zero, Sol).values == 1.0)


def test_full_spike_is_constant():
    g = TimeGrid(20)
    u = ControlProcess.deterministic(lambda t: t, UNIT)
    v = spike_variation(u, SpikeSpec(0.0, 1.0, 0.25), g)
    assert np.all(v.grid_values(g) == 0.25)


def test_spike_with_same_value_is_identity():
    g = TimeGrid(20)
    u = ControlProcess.constant(0.6, UNIT)
    v = spike_variation(u, SpikeSpec(0.3, 0.2, 0.6), g)
    assert np.array_equal(u.grid_values(g), v.grid_values(g))


def test_spike_validation():
    with pytest.raises(DomainError):
        SpikeSpec(0.8, 0.3, 0.0)
    with pytest.raises(DomainError):
        SpikeSpec(-0.1, 0.3, 0.0)
    with pytest.raises(DomainError):
        spike_variation(ControlProcess.constant(0.5, UNIT), SpikeSpec(0.1, 0.1, 2.0), TimeGrid(10))


def test_spike_of_path_and_feedback_controls():
    g = TimeGrid(10)
    ens = sample_brownian(g, 4)
    pc = ControlProcess("path", np.full((4, 10), 0.5), uset=UNIT)
    sp = spike_variation(pc, SpikeSpec(0.0, 0.3, 1.0))
    assert np.all(sp.values[:, :3] == 1.0) and np.all(sp.values[:, 3:] == 0.5)
    fb = ControlProcess.feedback(lambda t, x: np.full(np.shape(x), 0.5), uset=UNIT)
    sf = spike_variation(fb, SpikeSpec(0.5, 0.2, 0.0), g)
    vals = sf.realize(ens, np.zeros((4, 11)))
    assert np.all(vals[:, 5:7] == 0.0) and np.all(vals[:, :5] == 0.5) and np.all(vals[:, 7:] == 0.5)
    with pytest.raises(ValueError):
        spike_variation(fb, SpikeSpec(0.5, 0.2, 0.0))


def test_manual_ensemble_compatibility():
    g = TimeGrid(5)
    a = PathEnsemble(g, 2, np.zeros((2, 5)), 0)
    assert a.compatible(sample_brownian(g, 2, seed=3))
    assert not a.compatible(sample_brownian(TimeGrid(6), 2))
