"""Problem data: coefficients of the linear FBSDE, costs, controls, multipliers.

The state system on [0, 1] is

    dx = (A x + B u) dt + (C x + D u) dW,          x(0) = x0
    dy = -(a x + b y + c u) dt + z dW,             y(1) = M x(1)

and the cost is J(u) = E[ int_0^1 l(t, x, y, u) dt + phi(x(1)) + gamma(y(0)) ].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, IncompatibleError, InvalidModelError

COEFFICIENT_NAMES = ("A", "B", "C", "D", "a", "b", "c")


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function on [0, 1].

    ``breakpoints[0]`` must be 0; piece ``j`` holds on ``[breakpoints[j], breakpoints[j+1])``
    and the last piece is closed at t = 1.
    """

    breakpoints: tuple
    values: tuple

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        vals = tuple(float(v) for v in self.values)
        if len(bp) != len(vals) or not bp:
            raise ValueError("breakpoints and values must be non-empty and of equal length")
        if bp[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])) or bp[-1] > 1.0:
            raise ValueError("breakpoints must be strictly increasing within [0, 1]")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, value):
        return cls((0.0,), (value,))

    @property
    def is_constant(self):
        return len(set(self.values)) <= 1

    def __call__(self, t):
        idx = np.searchsorted(self.breakpoints, t, side="right") - 1
        out = np.asarray(self.values)[np.clip(idx, 0, len(self.values) - 1)]
        return out if np.ndim(t) else float(out)

    def sup(self):
        return max(abs(v) for v in self.values)


def _as_piecewise(v):
    if isinstance(v, PiecewiseConstant):
        return v
    return PiecewiseConstant.constant(v)


class CoefficientValues(NamedTuple):
    A: float
    B: float
    C: float
    D: float
    a: float
    b: float
    c: float


@dataclass(frozen=True)
class ModelCoefficients:
    A: PiecewiseConstant = 0.0
    B: PiecewiseConstant = 0.0
    C: PiecewiseConstant = 0.0
    D: PiecewiseConstant = 0.0
    a: PiecewiseConstant = 0.0
    b: PiecewiseConstant = 0.0
    c: PiecewiseConstant = 0.0
    M: float = 0.0
    x0: float = 0.0

    def __post_init__(self):
        for name in COEFFICIENT_NAMES:
            object.__setattr__(self, name, _as_piecewise(getattr(self, name)))
        object.__setattr__(self, "M", float(self.M))
        object.__setattr__(self, "x0", float(self.x0))

    def on_grid(self, times):
        """Coefficient arrays sampled at ``times`` (right-continuous lookup)."""
        times = np.asarray(times, dtype=float)
        return CoefficientValues(*(getattr(self, n)(times) for n in COEFFICIENT_NAMES))


def eval_coefficients(coeffs: ModelCoefficients, t: float) -> CoefficientValues:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t={t} outside [0, 1]")
    return CoefficientValues(*(getattr(coeffs, n)(float(t)) for n in COEFFICIENT_NAMES))


@dataclass(frozen=True)
class ControlSet:
    lower: float
    upper: float
    convex_flag: bool = True

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"empty control set [{self.lower}, {self.upper}]")

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)

    def contains(self, u, tol=0.0):
        u = np.asarray(u)
        return bool(np.all((u >= self.lower - tol) & (u <= self.upper + tol)))

    def grid(self, size):
        return np.linspace(self.lower, self.upper, size)


# -- costs -----------------------------------------------------------------

CostFn = Callable[..., np.ndarray]


@dataclass(frozen=True)
class CostSpec:
    """Running cost l(t,x,y,u), terminal cost phi(x), initial-value cost gamma(y).

    All callables must accept numpy arrays and broadcast. ``source`` keeps the
    polynomial description when the spec came from :func:`polynomial_cost`, so
    it can be written back to a model file.
    """

    l: CostFn
    l_x: CostFn
    l_y: CostFn
    l_u: CostFn
    l_xx: CostFn
    l_xy: CostFn
    l_yy: CostFn
    phi: CostFn
    phi_x: CostFn
    phi_xx: CostFn
    gamma: CostFn
    gamma_y: CostFn
    gamma_yy: CostFn
    source: dict | None = field(default=None, compare=False)

    def is_quadratic_in_state(self, uset: ControlSet, n_probe=32, seed=0):
        """Probe whether l, phi, gamma are at most quadratic in (x, y).

        True when the second derivatives do not move with (x, y) at fixed (t, u).
        """
        if self.source is not None:
            s = self.source
            return (all(px + py <= 2 for _, px, py, _ in s["running"])
                    and len(s["terminal"]) <= 3 and len(s["initial"]) <= 3)
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 1, n_probe)
        u = rng.uniform(uset.lower, uset.upper, n_probe)
        x1, y1, x2, y2 = rng.uniform(-10, 10, (4, n_probe))
        for f in (self.l_xx, self.l_xy, self.l_yy):
            if not np.allclose(f(t, x1, y1, u), f(t, x2, y2, u), rtol=1e-9, atol=1e-12):
                return False
        return (np.allclose(self.phi_xx(x1), self.phi_xx(x2), rtol=1e-9, atol=1e-12)
                and np.allclose(self.gamma_yy(y1), self.gamma_yy(y2), rtol=1e-9, atol=1e-12))


def _poly1d(coeffs):
    c = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float) if len(coeffs) else [0.0])
    d1 = c.deriv(1)
    d2 = c.deriv(2)
    return (lambda v: c(np.asarray(v, dtype=float)),
            lambda v: d1(np.asarray(v, dtype=float)),
            lambda v: d2(np.asarray(v, dtype=float)))


def _monomial_sum(terms, dx=0, dy=0, du=0):
    """Derivative of sum coef * x^px y^py u^pu of the given orders."""
    def falling(p, k):
        out = 1
        for j in range(k):
            out *= p - j
        return out

    active = []
    for coef, px, py, pu in terms:
        k = coef * falling(px, dx) * falling(py, dy) * falling(pu, du)
        if k != 0:
            active.append((k, px - dx, py - dy, pu - du))

    def f(t, x, y, u):
        args = tuple(np.asarray(v, dtype=float) for v in (x, y, u))
        shape = np.broadcast_shapes(np.shape(t), *(a.shape for a in args))
        out = 0.0
        for k, *powers in active:
            term = k
            for a, pw in zip(args, powers):
                if pw == 1:
                    term = term * a
                elif pw:
                    term = term * a ** pw
            out = out + term
        return np.broadcast_to(out, shape) if np.shape(out) != shape else out

    return f


def polynomial_cost(running=(), terminal=(), initial=()) -> CostSpec:
    """Cost from polynomial data.

    running: iterable of ``(coef, px, py, pu)`` meaning ``coef * x**px * y**py * u**pu``.
    terminal, initial: ascending coefficients of phi(x) and gamma(y).
    """
    running = tuple((float(c), int(px), int(py), int(pu)) for c, px, py, pu in running)
    for _, px, py, pu in running:
        if min(px, py, pu) < 0:
            raise ValueError("monomial powers must be non-negative")
    terminal = tuple(float(v) for v in terminal)
    initial = tuple(float(v) for v in initial)
    phi, phi_x, phi_xx = _poly1d(terminal)
    gam, gam_y, gam_yy = _poly1d(initial)
    return CostSpec(
        l=_monomial_sum(running),
        l_x=_monomial_sum(running, dx=1),
        l_y=_monomial_sum(running, dy=1),
        l_u=_monomial_sum(running, du=1),
        l_xx=_monomial_sum(running, dx=2),
        l_xy=_monomial_sum(running, dx=1, dy=1),
        l_yy=_monomial_sum(running, dy=2),
        phi=phi, phi_x=phi_x, phi_xx=phi_xx,
        gamma=gam, gamma_y=gam_y, gamma_yy=gam_yy,
        source={"running": running, "terminal": terminal, "initial": initial},
    )


# -- controls --------------------------------------------------------------

CONTROL_KINDS = ("grid", "feedback", "path")


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """An admissible control.

    kind="grid": deterministic, ``values`` is a per-cell array or a vectorised
        function of time evaluated at the left node of each cell.
    kind="feedback": ``values(t, x)`` evaluated on the current state.
    kind="path": ``values`` is an (n_paths, n_steps) array; build it with
        :meth:`adapted` to guarantee non-anticipation.
    """

    kind: str
    values: object
    clamp: bool = False
    uset: ControlSet | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in CONTROL_KINDS:
            raise ValueError(f"unknown control kind {self.kind!r}")
        if self.clamp and self.uset is None:
            raise ValueError("clamp requires a control set")
        if self.kind in ("grid", "path") and not callable(self.values):
            object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @classmethod
    def constant(cls, value, uset=None, clamp=False):
        v = float(value)
        return cls("grid", lambda t: np.full(np.shape(t), v), clamp=clamp, uset=uset,
                   label=f"const:{v!r}")

    @classmethod
    def deterministic(cls, fn, uset=None, clamp=False, label=""):
        return cls("grid", fn, clamp=clamp, uset=uset, label=label)

    @classmethod
    def feedback(cls, fn, uset=None, clamp=False, label=""):
        return cls("feedback", fn, clamp=clamp, uset=uset, label=label)

    @classmethod
    def adapted(cls, rule, ensemble, uset=None, clamp=False, label=""):
        """Path-indexed control with ``u_i = rule(i, t_i, W[:, :i+1])``.

        W[:, :i+1] only contains W(t_0..t_i), i.e. increments with index < i.
        """
        W = ensemble.W
        n = ensemble.grid.n_steps
        vals = np.empty((ensemble.n_paths, n))
        for i in range(n):
            vals[:, i] = rule(i, ensemble.grid.times[i], W[:, : i + 1])
        return cls("path", vals, clamp=clamp, uset=uset, label=label)

    @property
    def is_deterministic(self):
        return self.kind == "grid"

    def _finish(self, u):
        u = np.asarray(u, dtype=float)
        return self.uset.clip(u) if self.clamp else u

    def grid_values(self, grid):
        if self.kind != "grid":
            raise IncompatibleError("only grid controls have deterministic per-cell values")
        if callable(self.values):
            vals = np.broadcast_to(np.asarray(self.values(grid.times[:-1]), dtype=float),
                                   (grid.n_steps,))
        else:
            vals = self.values
            if vals.shape != (grid.n_steps,):
                raise IncompatibleError(
                    f"grid control has {vals.shape} values, grid has {grid.n_steps} cells")
        return self._finish(vals)

    def step(self, i, t, x_i, n_paths):
        """Control value on cell i given the state x_i (per path)."""
        if self.kind == "grid":
            raise RuntimeError("use grid_values for grid controls")
        if self.kind == "feedback":
            return self._finish(np.broadcast_to(self.values(t, x_i), (n_paths,)))
        if self.values.shape[0] != n_paths:
            raise IncompatibleError("path-indexed control does not match the ensemble")
        return self._finish(self.values[:, i])

    def realize(self, ensemble, x=None):
        """(n_paths, n_steps) array of control values on ``ensemble``.

        Feedback controls need the forward state ``x`` of shape (n_paths, n_steps + 1).
        """
        grid = ensemble.grid
        if self.kind == "grid":
            return np.broadcast_to(self.grid_values(grid), (ensemble.n_paths, grid.n_steps)).copy()
        if self.kind == "path":
            if self.values.shape != (ensemble.n_paths, grid.n_steps):
                raise IncompatibleError(
                    f"path control shape {self.values.shape} does not match ensemble")
            return self._finish(self.values)
        if x is None:
            raise ValueError("feedback control needs the forward state to be realised")
        out = np.empty((ensemble.n_paths, grid.n_steps))
        for i in range(grid.n_steps):
            out[:, i] = self.step(i, grid.times[i], x[:, i], ensemble.n_paths)
        return out


# -- multipliers -----------------------------------------------------------


@dataclass(frozen=True)
class MultiplierPair:
    """(theta0, theta1) with theta1 = theta1_const + theta1_slope * x(1)."""

    theta0: float
    theta1_const: float = 0.0
    theta1_slope: float = 0.0

    def __post_init__(self):
        if not self.theta0 >= 0:
            raise ValueError("theta0 must be non-negative")

    def theta1(self, x1):
        return self.theta1_const + self.theta1_slope * np.asarray(x1, dtype=float)

    def normalization(self, x1):
        """|theta0|^2 + E|theta1|^2, estimated on terminal states x1."""
        return self.theta0 ** 2 + float(np.mean(self.theta1(x1) ** 2))

    def scaled(self, lam):
        return MultiplierPair(lam * self.theta0, lam * self.theta1_const, lam * self.theta1_slope)


class Problem(NamedTuple):
    coeffs: ModelCoefficients
    cost: CostSpec
    uset: ControlSet
    multipliers: MultiplierPair


# -- assumption probes -----------------------------------------------------


@dataclass
class Check:
    name: str
    assumption: str
    passed: bool
    constant: float
    witness: dict
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failed(self):
        return [c for c in self.checks if not c.passed]

    def get(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"passed": self.passed,
                "checks": [{"name": c.name, "assumption": c.assumption, "passed": c.passed,
                            "constant": c.constant, "witness": c.witness, "detail": c.detail}
                           for c in self.checks]}


def _fd(f, v, h):
    return (f(v + h) - f(v - h)) / (2 * h)


def _derivative_checks(cost, pts, tol):
    t, x, y, u = pts
    hx = 1e-4 * (1 + np.abs(x))
    hy = 1e-4 * (1 + np.abs(y))
    hu = 1e-4 * (1 + np.abs(u))
    pairs = {
        "l_x": (cost.l_x(t, x, y, u), _fd(lambda v: cost.l(t, v, y, u), x, hx)),
        "l_y": (cost.l_y(t, x, y, u), _fd(lambda v: cost.l(t, x, v, u), y, hy)),
        "l_u": (cost.l_u(t, x, y, u), _fd(lambda v: cost.l(t, x, y, v), u, hu)),
        "l_xx": (cost.l_xx(t, x, y, u), _fd(lambda v: cost.l_x(t, v, y, u), x, hx)),
        "l_xy": (cost.l_xy(t, x, y, u), _fd(lambda v: cost.l_x(t, x, v, u), y, hy)),
        "l_yy": (cost.l_yy(t, x, y, u), _fd(lambda v: cost.l_y(t, x, v, u), y, hy)),
        "phi_x": (cost.phi_x(x), _fd(cost.phi, x, hx)),
        "phi_xx": (cost.phi_xx(x), _fd(cost.phi_x, x, hx)),
        "gamma_y": (cost.gamma_y(y), _fd(cost.gamma, y, hy)),
        "gamma_yy": (cost.gamma_yy(y), _fd(cost.gamma_y, y, hy)),
    }
    checks = []
    for name, (given, approx) in pairs.items():
        given = np.broadcast_to(given, x.shape)
        err = np.abs(given - approx) / (1 + np.abs(given))
        j = int(np.argmax(err))
        checks.append(Check(
            f"derivative:{name}", "consistency", bool(err[j] <= tol), float(err[j]),
            {"t": float(t[j]), "x": float(x[j]), "y": float(y[j]), "u": float(u[j])},
            f"max |d - FD|/(1+|d|) = {err[j]:.3g}"))
    return checks


def _growth_check(name, assumption, stat, factor):
    """``stat(scale)`` returns (values, witnesses) on the box scaled by ``scale``."""
    full, wit = stat(1.0)
    half, _ = stat(0.5)
    j = int(np.argmax(full))
    s_full, s_half = float(full[j]), float(np.max(half))
    ok = bool(np.isfinite(s_full) and s_full <= factor * s_half + 1e-12 * (1 + s_half))
    return Check(name, assumption, ok, s_full, wit(j),
                 f"sup over box {s_full:.6g}, over half box {s_half:.6g}")


def validate_model(coeffs: ModelCoefficients, cost: CostSpec, uset: ControlSet,
                   grid_density: int = 64, box: float = 10.0, growth_factor: float = 1.5,
                   n_probe: int = 100, seed: int = 0, fd_tol: float = 1e-5) -> ValidationReport:
    """Sampled probes of boundedness, growth and Lipschitz assumptions.

    Bounded / Lipschitz / linear-growth claims are tested by comparing the
    sampled supremum on the box [-box, box] with the one on the half box: a
    global bound cannot grow when the box doubles.
    """
    if grid_density < 16:
        raise ValueError("grid_density must be at least 16")
    times = np.linspace(0.0, 1.0, grid_density + 1)
    checks = []
    sups = {}
    for name in COEFFICIENT_NAMES:
        vals = getattr(coeffs, name)(times)
        bad = ~np.isfinite(vals)
        if bad.any():
            j = int(np.argmax(bad))
            raise InvalidModelError(name, float(times[j]), float(vals[j]))
        sups[name] = float(np.max(np.abs(vals)))
    for name, v in (("M", coeffs.M), ("x0", coeffs.x0)):
        if not np.isfinite(v):
            raise InvalidModelError(name, 0.0, v)
    checks.append(Check("coefficients:bounded", "standing", True, max(sups.values()),
                        {"sup": sups}, "finite sup on evaluation grid"))

    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, n_probe)
    u = rng.uniform(uset.lower, uset.upper, n_probe)
    x, y = rng.uniform(-box, box, (2, n_probe))
    checks += _derivative_checks(cost, (t, x, y, u), fd_tol)

    # unit samples, rescaled for full and half box
    ux, uy, vx, vy = rng.uniform(-1, 1, (4, n_probe))

    def point_stat(fn, kind):
        def stat(scale):
            X, Y = box * scale * ux, box * scale * uy
            if kind == "l":
                vals = np.abs(fn(t, X, Y, u))
            elif kind == "lgrowth":
                vals = np.abs(fn(t, X, Y, u)) / (1 + np.abs(X) + np.abs(Y) + np.abs(u))
            elif kind == "x":
                vals = np.abs(fn(X))
            elif kind == "y":
                vals = np.abs(fn(Y))
            elif kind == "xgrowth":
                vals = np.abs(fn(X)) / (1 + np.abs(X))
            else:
                vals = np.abs(fn(Y)) / (1 + np.abs(Y))
            vals = np.broadcast_to(vals, X.shape)
            return vals, lambda j: {"t": float(t[j]), "x": float(X[j]), "y": float(Y[j]),
                                    "u": float(u[j])}
        return stat

    for name, fn, kind in (("l_xx", cost.l_xx, "l"), ("l_xy", cost.l_xy, "l"),
                           ("l_yy", cost.l_yy, "l"), ("phi_xx", cost.phi_xx, "x"),
                           ("gamma_yy", cost.gamma_yy, "y")):
        checks.append(_growth_check(f"H1:bounded:{name}", "H1", point_stat(fn, kind), growth_factor))
    for name, fn, kind in (("l_x", cost.l_x, "lgrowth"), ("l_y", cost.l_y, "lgrowth"),
                           ("phi_x", cost.phi_x, "xgrowth"), ("gamma_y", cost.gamma_y, "ygrowth")):
        checks.append(_growth_check(f"H1:linear_growth:{name}", "H1",
                                    point_stat(fn, kind), growth_factor))

    def lip_1d(fn, which):
        def stat(scale):
            a, b = box * scale * (ux if which == "x" else uy), box * scale * (vx if which == "x" else vy)
            d = np.abs(a - b)
            ok = d > 0
            vals = np.zeros_like(d)
            vals[ok] = np.abs(fn(a) - fn(b))[ok] / d[ok]
            return vals, lambda j: {which: float(a[j]), f"{which}'": float(b[j])}
        return stat

    def lip_l(scale):
        X1, Y1 = box * scale * ux, box * scale * uy
        X2, Y2 = box * scale * vx, box * scale * vy
        d = np.abs(X1 - X2) + np.abs(Y1 - Y2)
        num = (np.abs(cost.l_x(t, X1, Y1, u) - cost.l_x(t, X2, Y2, u))
               + np.abs(cost.l_y(t, X1, Y1, u) - cost.l_y(t, X2, Y2, u)))
        vals = np.where(d > 0, num / np.where(d > 0, d, 1.0), 0.0)
        return vals, lambda j: {"t": float(t[j]), "u": float(u[j]), "x": float(X1[j]),
                                "y": float(Y1[j]), "x'": float(X2[j]), "y'": float(Y2[j])}

    checks.append(_growth_check("H2:lipschitz:phi_x", "H2", lip_1d(cost.phi_x, "x"), growth_factor))
    checks.append(_growth_check("H2:lipschitz:gamma_y", "H2", lip_1d(cost.gamma_y, "y"), growth_factor))
    checks.append(_growth_check("H2:lipschitz:l_x,l_y", "H2", lip_l, growth_factor))
    return ValidationReport(checks)


def lipschitz_in_u(cost: CostSpec, uset: ControlSet, box: float = 10.0, n_probe: int = 200, seed: int = 1):
    """Sampled constant for |l(u)-l(u')| + |l_u(u)-l_u(u')| <= C|u-u'| (H3 ii)."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, 1, n_probe)
    x, y = rng.uniform(-box, box, (2, n_probe))
    u1, u2 = rng.uniform(uset.lower, uset.upper, (2, n_probe))
    d = np.abs(u1 - u2)
    ok = d > 0
    num = np.abs(cost.l(t, x, y, u1) - cost.l(t, x, y, u2)) + np.abs(cost.l_u(t, x, y, u1) - cost.l_u(t, x, y, u2))
    return float(np.max(num[ok] / d[ok])) if ok.any() else 0.0

