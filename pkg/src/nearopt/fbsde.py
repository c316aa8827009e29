"""Forward-backward solves of the controlled linear FBSDE and the cost functional.

Array conventions: node quantities (x, y) have shape (n_paths, n_steps + 1);
cell quantities (u, z) have shape (n_paths, n_steps) and hold the value on
[t_i, t_{i+1}). Time integrals use the left-point rule.

Closed-form backward solve (deterministic control): with y = alpha x + beta,
Ito's formula gives dy = (alpha' x + alpha (A x + B u) + beta') dt
+ alpha (C x + D u) dW. Matching with dy = -(a x + b y + c u) dt + z dW:

    alpha' = -(A + b) alpha - a,          alpha(1) = M
    beta'  = -b beta - (c + alpha B) u,   beta(1)  = 0
    z      = alpha (C x + D u)

On cell i the stored z is alpha(t_{i+1}) (C x_i + D u_i): the exact diffusion
coefficient of y = alpha x + beta along the Euler path over that cell, which
differs from the continuous formula by O(dt) (see docs/derivations.md).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import lsmc
from .errors import DivergenceError, IncompatibleError, UnsupportedControlError
from .model import ControlProcess, CostSpec, ModelCoefficients

SOLVERS = ("closed-form", "lsmc")


@dataclass(frozen=True, eq=False)
class ForwardPaths:
    x: np.ndarray
    u: np.ndarray


@dataclass(frozen=True, eq=False)
class FbsdeSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    control: ControlProcess
    solver_tag: str
    ensemble: object

    def coupling_error(self, M):
        return np.abs(self.y[:, -1] - M * self.x[:, -1])


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int

    def to_dict(self):
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths}


def _cell_coefficients(coeffs, grid):
    return coeffs.on_grid(grid.times[:-1])


def solve_forward(coeffs: ModelCoefficients, u: ControlProcess, ensemble) -> ForwardPaths:
    """Euler-Maruyama: x_{i+1} = x_i + (A x_i + B u_i) dt + (C x_i + D u_i) dW_i."""
    grid = ensemble.grid
    n, N, dt = ensemble.n_paths, grid.n_steps, grid.dt
    A, B, C, D, *_ = _cell_coefficients(coeffs, grid)
    dW = ensemble.increments
    x = np.empty((n, N + 1))
    x[:, 0] = coeffs.x0
    if u.kind == "feedback":
        uu = np.empty((n, N))
    else:
        uu = u.realize(ensemble)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            if u.kind == "feedback":
                uu[:, i] = u.step(i, grid.times[i], x[:, i], n)
            ui = uu[:, i]
            x[:, i + 1] = x[:, i] + (A[i] * x[:, i] + B[i] * ui) * dt + (C[i] * x[:, i] + D[i] * ui) * dW[:, i]
            if not np.all(np.isfinite(x[:, i + 1])):
                raise DivergenceError(i + 1)
    return ForwardPaths(x, uu)


def _rk4_backward(rhs, terminal, N, dt):
    """Integrate dY/dt = rhs(i, Y) backward over cells with frozen cell data.

    ``rhs(i, Y, s)`` receives the fraction s in [0, 1] of the cell (for data that
    varies inside the cell). Returns Y at all nodes, stacked on axis 0.
    """
    Y = [None] * (N + 1)
    Y[N] = np.asarray(terminal, dtype=float)
    h = -dt
    for i in range(N - 1, -1, -1):
        y = Y[i + 1]
        k1 = rhs(i, y, 1.0)
        k2 = rhs(i, y + 0.5 * h * k1, 0.5)
        k3 = rhs(i, y + 0.5 * h * k2, 0.5)
        k4 = rhs(i, y + h * k3, 0.0)
        Y[i] = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return np.stack(Y)


def decoupling_field(coeffs: ModelCoefficients, u_cells, grid):
    """alpha (nodes,) and beta (nodes, batch...) for deterministic cell controls.

    ``u_cells`` has shape (n_steps,) or (batch, n_steps).
    """
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    U = np.asarray(u_cells, dtype=float)
    batch = U.shape[:-1]

    def rhs(i, Y, s):
        al, be = Y[0], Y[1:]
        dal = -(A[i] + b[i]) * al - a[i]
        dbe = -b[i] * be - (c[i] + al * B[i]) * U[..., i]
        return np.concatenate([np.atleast_1d(dal), np.reshape(dbe, -1)])

    term = np.concatenate([[coeffs.M], np.zeros(int(np.prod(batch)) if batch else 1)])
    Y = _rk4_backward(rhs, term, grid.n_steps, grid.dt)
    alpha = Y[:, 0]
    beta = Y[:, 1:].reshape((grid.n_steps + 1,) + (batch if batch else ()))
    return alpha, beta


def solve_backward_closed_form(coeffs: ModelCoefficients, u: ControlProcess, fwd: ForwardPaths, ensemble):
    if not u.is_deterministic:
        raise UnsupportedControlError(
            f"closed-form backward solve needs a deterministic control, got kind={u.kind!r}; use lsmc")
    grid = ensemble.grid
    uc = u.grid_values(grid)
    alpha, beta = decoupling_field(coeffs, uc, grid)
    _, _, C, D, *_ = _cell_coefficients(coeffs, grid)
    x = fwd.x
    y = alpha[None, :] * x + beta[None, :]
    y[:, -1] = coeffs.M * x[:, -1]
    # on the Euler path, y_{i+1} - E_i[y_{i+1}] = alpha_{i+1} (C x_i + D u_i) dW_i exactly
    z = alpha[None, 1:] * (C[None, :] * x[:, :-1] + D[None, :] * uc[None, :])
    return y, z


def solve_backward_lsmc(coeffs: ModelCoefficients, u: ControlProcess, fwd: ForwardPaths, ensemble,
                        basis_degree: int = 3):
    """Regression scheme from y_N = M x_N; y_i = (1 + b dt) E_i[y_{i+1}] + (a x_i + c u_i) dt."""
    grid = ensemble.grid
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    x, uu = fwd.x, fwd.u
    h = a[None, :] * x[:, :-1] + c[None, :] * uu
    return lsmc.solve_linear_bsde(coeffs.M * x[:, -1], b, 0.0, h, x, ensemble, basis_degree)


def solve(coeffs: ModelCoefficients, u: ControlProcess, ensemble, method="auto", basis_degree=3) -> FbsdeSolution:
    if method not in ("auto",) + SOLVERS:
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "closed-form" if u.is_deterministic else "lsmc"
    fwd = solve_forward(coeffs, u, ensemble)
    if method == "closed-form":
        y, z = solve_backward_closed_form(coeffs, u, fwd, ensemble)
    else:
        y, z = solve_backward_lsmc(coeffs, u, fwd, ensemble, basis_degree)
    return FbsdeSolution(fwd.x, y, z, fwd.u, u, method, ensemble)


# -- cost ------------------------------------------------------------------


def path_costs(cost: CostSpec, sol: FbsdeSolution):
    grid = sol.ensemble.grid
    t = grid.times[:-1][None, :]
    run = cost.l(t, sol.x[:, :-1], sol.y[:, :-1], sol.u)
    run = np.broadcast_to(run, sol.u.shape).sum(axis=1) * grid.dt
    return run + cost.phi(sol.x[:, -1]) + cost.gamma(sol.y[:, 0])


def _estimate(samples):
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return CostEstimate(float(samples.mean()), se, n)


def evaluate_cost(cost: CostSpec, sol: FbsdeSolution, ensemble=None) -> CostEstimate:
    if ensemble is not None and ensemble is not sol.ensemble and not ensemble.compatible(sol.ensemble):
        raise IncompatibleError("solution and ensemble differ")
    return _estimate(path_costs(cost, sol))


def exact_expected_cost(coeffs: ModelCoefficients, cost: CostSpec, u_cells, grid):
    """E[J] of the Euler scheme for deterministic cell controls, without sampling.

    Valid when l, phi, gamma are at most quadratic in (x, y): then only the
    mean and variance of x_i enter, and both follow exact recursions of the
    Euler scheme. ``u_cells`` is (n_steps,) or (batch, n_steps); returns a
    scalar or a (batch,) array.
    """
    U = np.asarray(u_cells, dtype=float)
    single = U.ndim == 1
    U = np.atleast_2d(U)
    A, B, C, D, *_ = _cell_coefficients(coeffs, grid)
    alpha, beta = decoupling_field(coeffs, U, grid)
    dt = grid.dt
    m = np.full(U.shape[0], coeffs.x0)
    v = np.zeros(U.shape[0])
    run = np.zeros(U.shape[0])
    for i in range(grid.n_steps):
        t = grid.times[i]
        ui = U[:, i]
        al, be = alpha[i], beta[i]
        ym = al * m + be
        curv = cost.l_xx(t, m, ym, ui) + 2 * al * cost.l_xy(t, m, ym, ui) + al ** 2 * cost.l_yy(t, m, ym, ui)
        run += (cost.l(t, m, ym, ui) + 0.5 * curv * v) * dt
        g = 1 + A[i] * dt
        v, m = (g * g * v + dt * (C[i] ** 2 * (v + m * m) + 2 * C[i] * D[i] * ui * m + D[i] ** 2 * ui * ui),
                g * m + B[i] * ui * dt)
    y0 = alpha[0] * coeffs.x0 + beta[0]
    total = run + cost.phi(m) + 0.5 * cost.phi_xx(m) * v + cost.gamma(y0)
    return float(total[0]) if single else total


def expected_cost(coeffs, cost, uset, u: ControlProcess, ensemble, method="auto") -> CostEstimate:
    """J(u): exact moment route when available (deterministic u, quadratic costs), else Monte Carlo."""
    if method == "auto":
        method = "exact" if (u.is_deterministic and cost.is_quadratic_in_state(uset)) else "mc"
    if method == "exact":
        if not u.is_deterministic:
            raise UnsupportedControlError("exact expected cost needs a deterministic control")
        return CostEstimate(exact_expected_cost(coeffs, cost, u.grid_values(ensemble.grid), ensemble.grid),
                            0.0, ensemble.n_paths)
    return evaluate_cost(cost, solve(coeffs, u, ensemble))


# -- a priori estimates ------------------------------------------------------


@dataclass
class StabilityReport:
    lhs: float
    rhs: float
    ratio: float
    lhs_single: float
    rhs_single: float
    ratio_single: float

    def to_dict(self):
        return dict(self.__dict__)


def _ratio(lhs, rhs):
    if lhs == 0.0:
        return 0.0
    return lhs / rhs if rhs > 0 else float("inf")


def norm_n2(x, y, z, dt):
    """E[sup|x|^2 + sup|y|^2 + int |z|^2 dt]."""
    return float(np.mean(np.max(x ** 2, axis=1) + np.max(y ** 2, axis=1) + np.sum(z ** 2, axis=1) * dt))


def single_bound_bracket(coeffs, sol):
    """Bracket of the single-control a priori estimate, averaged over paths."""
    grid = sol.ensemble.grid
    _, B, _, D, _, _, c = _cell_coefficients(coeffs, grid)
    u, dt = sol.u, grid.dt
    br = (coeffs.x0 ** 2 + coeffs.M ** 2 + (np.sum(np.abs(B * u), axis=1) * dt) ** 2
          + np.sum((D * u) ** 2, axis=1) * dt + (np.sum(np.abs(c * u), axis=1) * dt) ** 2)
    return float(np.mean(br))


def difference_bracket(coeffs, sol, sol_t):
    grid = sol.ensemble.grid
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    dt = grid.dt
    dx = (sol.x - sol_t.x)
    dy = (sol.y - sol_t.y)
    du = sol.u - sol_t.u
    dxc, dyc = dx[:, :-1], dy[:, :-1]
    br = ((coeffs.M * dx[:, -1]) ** 2
          + (np.sum(np.abs(A * dxc + B * du), axis=1) * dt) ** 2
          + (np.sum(np.abs(a * dxc + b * dyc + c * du), axis=1) * dt) ** 2
          + np.sum((C * dxc + D * du) ** 2, axis=1) * dt)
    return float(np.mean(br))


def stability_probe(coeffs, u, u_tilde, ensemble, method="auto", basis_degree=3) -> StabilityReport:
    """Measured ratios for the a priori estimates (without their constant C)."""
    sol = solve(coeffs, u, ensemble, method, basis_degree)
    sol_t = solve(coeffs, u_tilde, ensemble, method, basis_degree)
    dt = ensemble.grid.dt
    lhs = norm_n2(sol.x - sol_t.x, sol.y - sol_t.y, sol.z - sol_t.z, dt)
    rhs = difference_bracket(coeffs, sol, sol_t)
    lhs1 = norm_n2(sol.x, sol.y, sol.z, dt)
    rhs1 = single_bound_bracket(coeffs, sol)
    return StabilityReport(lhs, rhs, _ratio(lhs, rhs), lhs1, rhs1, _ratio(lhs1, rhs1))


def sup_moments(sol: FbsdeSolution, power=4):
    """(E sup|x|^power, E sup|y|^power)."""
    return (float(np.mean(np.max(np.abs(sol.x), axis=1) ** power)),
            float(np.mean(np.max(np.abs(sol.y), axis=1) ** power)))


# -- export ----------------------------------------------------------------

SOLUTION_COLUMNS = ("path", "t", "x", "y", "z", "u")


def _blank_last(arr, i, N):
    return "" if i == N else repr(float(arr[i]))


def write_solution_csv(sol: FbsdeSolution, path, max_paths=None):
    """One row per (path, node). z and u are cell values; they are blank at t=1."""
    times = sol.ensemble.grid.times
    N = len(times) - 1
    n = sol.x.shape[0] if max_paths is None else min(max_paths, sol.x.shape[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SOLUTION_COLUMNS)
        for p in range(n):
            for i in range(N + 1):
                w.writerow([p, repr(float(times[i])), repr(float(sol.x[p, i])), repr(float(sol.y[p, i])),
                            _blank_last(sol.z[p], i, N), _blank_last(sol.u[p], i, N)])
