"""First- and second-order adjoint processes along a solved FBSDE.

First order (theta = theta0 for the necessary variant, 1 for the sufficient one):

    -dp = (A p - a q + C k + theta l_x) dt - k dW
     dq = (-b q - theta l_y) dt
    necessary:  p(1) = theta0 phi_x(x(1)) - M theta1,  q(0) = -theta0 gamma_y(y(0))
    sufficient: p(1) = phi_x(x(1)) - M q(1),           q(0) = -gamma_y(y(0))

Second order, solved in the order P3 -> P2 -> P1:

    -dP3 = (-2b P3 - theta l_yy) dt - Q3 dW,                           P3(1) = 0
    -dP2 = (A P2 + C Q2 - a P3 - b P2 - theta l_xy) dt - Q2 dW,       P2(1) = 0
    -dP1 = ((2A + C^2) P1 + 2C Q1 - 2a P2 - theta l_xx) dt - Q1 dW,   P1(1) = theta phi_xx(x(1))
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import lsmc
from .errors import IncompatibleError, UnsupportedSolverError
from .fbsde import FbsdeSolution, _cell_coefficients, _rk4_backward
from .model import CostSpec, ModelCoefficients, MultiplierPair

VARIANTS = ("necessary", "sufficient")


@dataclass(frozen=True, eq=False)
class FirstOrderAdjoint:
    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    variant: str
    method: str


@dataclass(frozen=True, eq=False)
class SecondOrderAdjoint:
    P1: np.ndarray
    P2: np.ndarray
    P3: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    Q3: np.ndarray
    deterministic_flag: bool


@dataclass(frozen=True, eq=False)
class AdjointBundle:
    first: FirstOrderAdjoint
    second: SecondOrderAdjoint
    theta: float
    multipliers: MultiplierPair | None

    @property
    def variant(self):
        return self.first.variant

    def __getattr__(self, name):
        if name in ("p", "q", "k"):
            return getattr(self.first, name)
        if name in ("P1", "P2", "P3", "Q1", "Q2", "Q3"):
            return getattr(self.second, name)
        raise AttributeError(name)


def _theta(mult, variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if variant == "necessary":
        if mult is None:
            raise ValueError("the necessary variant needs a multiplier pair")
        return mult.theta0
    return 1.0


def _node_controls(sol):
    """Cell controls extended to nodes by holding the last cell value at t=1."""
    return np.concatenate([sol.u, sol.u[:, -1:]], axis=1)


def _along(fn, sol, cells=True):
    times = sol.ensemble.grid.times
    if cells:
        t = times[:-1][None, :]
        out = fn(t, sol.x[:, :-1], sol.y[:, :-1], sol.u)
        return np.broadcast_to(out, sol.u.shape)
    out = fn(times[None, :], sol.x, sol.y, _node_controls(sol))
    return np.broadcast_to(out, sol.x.shape)


def _path_constant(arr, tol=1e-12):
    """True if ``arr`` (paths along axis 0) is the same on every path."""
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.shape[0] <= 1:
        return True
    spread = np.max(np.abs(arr - arr[:1]))
    return bool(spread <= tol * (1 + np.max(np.abs(arr))))


def solve_q_forward(coeffs: ModelCoefficients, cost: CostSpec, sol: FbsdeSolution,
                    mult: MultiplierPair | None, variant: str):
    """Pathwise dq = (-b q - theta l_y) dt; exact decay over a cell, trapezoid for l_y."""
    theta = _theta(mult, variant)
    grid = sol.ensemble.grid
    b = _cell_coefficients(coeffs, grid).b
    dt = grid.dt
    ly = _along(cost.l_y, sol, cells=False)
    n, N = sol.x.shape[0], grid.n_steps
    q = np.empty((n, N + 1))
    q[:, 0] = -theta * np.broadcast_to(cost.gamma_y(sol.y[:, 0]), (n,))
    for i in range(N):
        e = np.exp(-b[i] * dt)
        q[:, i + 1] = e * q[:, i] - theta * 0.5 * dt * (e * ly[:, i] + ly[:, i + 1])
    return q


def _p_terminal(cost, sol, mult, q, variant, theta, M):
    xN = sol.x[:, -1]
    if variant == "necessary":
        return theta * cost.phi_x(xN) - M * mult.theta1(xN)
    return cost.phi_x(xN) - M * q[:, -1]


def pk_closed_form_check(cost, sol, q):
    """Return None if the affine ansatz p = a1 x + a2 applies, else the reason."""
    if not sol.control.is_deterministic:
        return "control is not deterministic"
    if not _path_constant(q):
        return "q is path dependent"
    xN = sol.x[:, -1]
    f1 = np.broadcast_to(cost.phi_xx(xN), xN.shape)
    if not _path_constant(f1):
        return "phi_x is not affine"
    lxx = _along(cost.l_xx, sol)
    if not _path_constant(lxx):
        return "l_x is not affine in x"
    if np.any(_along(cost.l_xy, sol) != 0):
        return "l_x depends on y"
    e0 = _along(cost.l_x, sol) - lxx * sol.x[:, :-1]
    if not _path_constant(e0, tol=1e-10):
        return "l_x is not affine in x"
    return None


def _solve_pk_closed_form(coeffs, cost, sol, mult, q, variant, theta):
    grid = sol.ensemble.grid
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    u = sol.u[0]
    lxx = _along(cost.l_xx, sol)[0]
    e0 = (_along(cost.l_x, sol) - _along(cost.l_xx, sol) * sol.x[:, :-1])[0]
    qd = q[0]
    xN0 = sol.x[0, -1]
    f1 = float(cost.phi_xx(xN0))
    f0 = float(cost.phi_x(xN0)) - f1 * xN0
    M = coeffs.M
    if variant == "necessary":
        term = np.array([theta * f1 - M * mult.theta1_slope, theta * f0 - M * mult.theta1_const])
    else:
        term = np.array([f1, f0 - M * qd[-1]])

    def rhs(i, Y, s):
        a1, a2 = Y
        qs = qd[i] + s * (qd[i + 1] - qd[i])
        return np.array([-(2 * A[i] + C[i] ** 2) * a1 - theta * lxx[i],
                         -A[i] * a2 - (B[i] + C[i] * D[i]) * a1 * u[i] + a[i] * qs - theta * e0[i]])

    Y = _rk4_backward(rhs, term, grid.n_steps, grid.dt)
    a1, a2 = Y[:, 0], Y[:, 1]
    p = a1[None, :] * sol.x + a2[None, :]
    # cell value a1(t_{i+1}) (C x_i + D u_i), as for z in the forward-backward solve
    k = a1[None, 1:] * (C[None, :] * sol.x[:, :-1] + D[None, :] * sol.u)
    return p, k


def solve_pk_backward(coeffs: ModelCoefficients, cost: CostSpec, sol: FbsdeSolution,
                      mult: MultiplierPair | None, q, variant: str, method="auto", basis_degree=3):
    theta = _theta(mult, variant)
    if method == "auto":
        method = "closed-form" if pk_closed_form_check(cost, sol, q) is None else "lsmc"
    if method == "closed-form":
        reason = pk_closed_form_check(cost, sol, q)
        if reason is not None:
            raise UnsupportedSolverError(f"closed-form adjoint not applicable: {reason}")
        return _solve_pk_closed_form(coeffs, cost, sol, mult, q, variant, theta)
    if method != "lsmc":
        raise ValueError(f"unknown method {method!r}")
    grid = sol.ensemble.grid
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    h = -a[None, :] * q[:, :-1] + theta * _along(cost.l_x, sol)
    terminal = _p_terminal(cost, sol, mult, q, variant, theta, coeffs.M)
    return lsmc.solve_linear_bsde(terminal, A, C, h, sol.x, sol.ensemble, basis_degree)


def second_order_deterministic(cost, sol):
    xN = sol.x[:, -1]
    return (all(_path_constant(_along(f, sol)) for f in (cost.l_xx, cost.l_xy, cost.l_yy))
            and _path_constant(np.broadcast_to(cost.phi_xx(xN), xN.shape)))


def solve_second_order(coeffs: ModelCoefficients, cost: CostSpec, sol: FbsdeSolution,
                       mult: MultiplierPair | None, variant: str, method="auto", basis_degree=3):
    theta = _theta(mult, variant)
    grid = sol.ensemble.grid
    n, N = sol.x.shape[0], grid.n_steps
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    deterministic = second_order_deterministic(cost, sol)
    if method == "auto":
        method = "closed-form" if deterministic else "lsmc"
    lxx, lxy, lyy = (_along(f, sol) for f in (cost.l_xx, cost.l_xy, cost.l_yy))
    xN = sol.x[:, -1]
    P1N = theta * np.broadcast_to(cost.phi_xx(xN), (n,))
    if method == "closed-form":
        if not deterministic:
            raise UnsupportedSolverError("second-order closed form needs deterministic second derivatives")
        dxx, dxy, dyy = lxx[0], lxy[0], lyy[0]

        def rhs(i, Y, s):
            P1, P2, P3 = Y
            return np.array([-(2 * A[i] + C[i] ** 2) * P1 + 2 * a[i] * P2 + theta * dxx[i],
                             -(A[i] - b[i]) * P2 + a[i] * P3 + theta * dxy[i],
                             2 * b[i] * P3 + theta * dyy[i]])

        Y = _rk4_backward(rhs, np.array([P1N[0], 0.0, 0.0]), N, grid.dt)
        P1, P2, P3 = (np.broadcast_to(Y[:, j], (n, N + 1)).copy() for j in range(3))
        Q = np.zeros((n, N))
        return SecondOrderAdjoint(P1, P2, P3, Q, Q.copy(), Q.copy(), True)
    if method != "lsmc":
        raise ValueError(f"unknown method {method!r}")
    zero = np.zeros(n)
    P3, Q3 = lsmc.solve_linear_bsde(zero, -2 * b, 0.0, -theta * lyy, sol.x, sol.ensemble, basis_degree)
    P2, Q2 = lsmc.solve_linear_bsde(zero, A - b, C, -a[None, :] * P3[:, :-1] - theta * lxy,
                                    sol.x, sol.ensemble, basis_degree)
    P1, Q1 = lsmc.solve_linear_bsde(P1N, 2 * A + C ** 2, 2 * C, -2 * a[None, :] * P2[:, :-1] - theta * lxx,
                                    sol.x, sol.ensemble, basis_degree)
    return SecondOrderAdjoint(P1, P2, P3, Q1, Q2, Q3, False)


def solve_adjoints(coeffs, cost, sol, mult=None, variant="sufficient", method="auto",
                   basis_degree=3) -> AdjointBundle:
    theta = _theta(mult, variant)
    q = solve_q_forward(coeffs, cost, sol, mult, variant)
    pk_method = method
    if method == "auto":
        pk_method = "closed-form" if pk_closed_form_check(cost, sol, q) is None else "lsmc"
    p, k = solve_pk_backward(coeffs, cost, sol, mult, q, variant, pk_method, basis_degree)
    second = solve_second_order(coeffs, cost, sol, mult, variant, method, basis_degree)
    return AdjointBundle(FirstOrderAdjoint(p, q, k, variant, pk_method), second, theta, mult)


# -- duality pairings ------------------------------------------------------


@dataclass
class Identity:
    lhs: float
    rhs: float
    gap: float
    std_error: float
    passed: bool

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class DualityReport:
    state: Identity      # pairing of p with x^eps - x
    backward: Identity   # pairing of q with y^eps - y

    @property
    def passed(self):
        return self.state.passed and self.backward.passed

    def to_dict(self):
        return {"state": self.state.to_dict(), "backward": self.backward.to_dict(), "passed": self.passed}


def _identity(lhs_paths, rhs_paths, n_se=3.0):
    d = lhs_paths - rhs_paths
    n = d.size
    se = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    lhs, rhs, gap = float(lhs_paths.mean()), float(rhs_paths.mean()), float(d.mean())
    floor = 1e-10 * (1 + abs(lhs) + abs(rhs))
    return Identity(lhs, rhs, gap, se, abs(gap) <= n_se * se + floor)


def duality_check(coeffs, cost, sol_eps: FbsdeSolution, sol_other: FbsdeSolution,
                  adjoints: AdjointBundle, n_se=3.0) -> DualityReport:
    """Monte Carlo check of the Ito pairings of (p, k) with x^eps - x and of q with y^eps - y.

    E[p(1) dx(1) - p(0) dx(0)] = E int [p (A dx + B du) + k (C dx + D du)
                                        - dx (A p - a q + C k + theta l_x)] dt
    E[q(1) dy(1) - q(0) dy(0)] = -E int [q (a dx + b dy + c du) + dy (b q + theta l_y)] dt
    """
    if not sol_eps.ensemble.compatible(sol_other.ensemble):
        raise IncompatibleError("solutions live on different ensembles")
    grid = sol_eps.ensemble.grid
    A, B, C, D, a, b, c = _cell_coefficients(coeffs, grid)
    dt, th = grid.dt, adjoints.theta
    p, q, k = adjoints.p, adjoints.q, adjoints.k
    dx = sol_eps.x - sol_other.x
    dy = sol_eps.y - sol_other.y
    du = sol_eps.u - sol_other.u
    dxc, dyc, pc, qc = dx[:, :-1], dy[:, :-1], p[:, :-1], q[:, :-1]
    lx = _along(cost.l_x, sol_eps)
    ly = _along(cost.l_y, sol_eps)

    lhs1 = p[:, -1] * dx[:, -1] - p[:, 0] * dx[:, 0]
    rhs1 = np.sum(pc * (A * dxc + B * du) + k * (C * dxc + D * du)
                  - dxc * (A * pc - a * qc + C * k + th * lx), axis=1) * dt
    lhs2 = q[:, -1] * dy[:, -1] - q[:, 0] * dy[:, 0]
    rhs2 = -np.sum(qc * (a * dxc + b * dyc + c * du) + dyc * (b * qc + th * ly), axis=1) * dt
    return DualityReport(_identity(lhs1, rhs1, n_se), _identity(lhs2, rhs2, n_se))


# -- diagnostics -------------------------------------------------------------


def first_order_moment(b: AdjointBundle, dt):
    """E[sup|q|^2 + sup|p|^2 + int |k|^2 dt]."""
    return float(np.mean(np.max(b.q ** 2, axis=1) + np.max(b.p ** 2, axis=1) + np.sum(b.k ** 2, axis=1) * dt))


def second_order_moment(b: AdjointBundle, dt):
    """E[sup|P1|^2 + int |Q1|^2 dt]."""
    return float(np.mean(np.max(b.P1 ** 2, axis=1) + np.sum(b.Q1 ** 2, axis=1) * dt))


def pk_difference(b1: AdjointBundle, b2: AdjointBundle, dt, power):
    """E int (|p - p'|^power + |k - k'|^power) dt."""
    dp = np.abs(b1.p[:, :-1] - b2.p[:, :-1]) ** power
    dk = np.abs(b1.k - b2.k) ** power
    return float(np.mean(np.sum(dp + dk, axis=1)) * dt)


ADJOINT_COLUMNS = ("path", "t", "p", "q", "k", "P1", "P2", "P3", "Q1", "Q2", "Q3")


def write_adjoints_csv(b: AdjointBundle, times, path, max_paths=None):
    """Same layout as solutions: one row per (path, node); k and Q are blank at t=1."""
    N = len(times) - 1
    n = b.p.shape[0] if max_paths is None else min(max_paths, b.p.shape[0])
    node = (b.p, b.q)
    cell = (b.k,)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ADJOINT_COLUMNS)
        for j in range(n):
            for i in range(N + 1):
                row = [j, repr(float(times[i]))]
                row += [repr(float(arr[j, i])) for arr in node]
                row += ["" if i == N else repr(float(arr[j, i])) for arr in cell]
                row += [repr(float(arr[j, i])) for arr in (b.P1, b.P2, b.P3)]
                row += ["" if i == N else repr(float(arr[j, i])) for arr in (b.Q1, b.Q2, b.Q3)]
                w.writerow(row)
