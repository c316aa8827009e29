"""Time grids, Brownian ensembles, control metrics and spike variations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError, IncompatibleError
from .model import ControlProcess

BLOCK_SIZE = 1024


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self):
        return 1.0 / self.n_steps

    @cached_property
    def times(self):
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    @property
    def midpoints(self):
        return (np.arange(self.n_steps) + 0.5) / self.n_steps


def _block_normals(seed, block, n_steps):
    """Standard normals for one block of paths.

    Counter-based: Philox keyed by SeedSequence(seed, spawn_key=(block,)), so a
    path's draws depend only on (seed, path index, n_steps).
    """
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    gen = np.random.Generator(np.random.Philox(ss))
    return gen.standard_normal((BLOCK_SIZE, n_steps))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    n_paths: int
    increments: np.ndarray
    seed: int

    @cached_property
    def W(self):
        W = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def compatible(self, other):
        return self.grid == other.grid and self.n_paths == other.n_paths


def sample_brownian(grid: TimeGrid, n_paths: int, seed: int = 0) -> PathEnsemble:
    if int(n_paths) < 1:
        raise ValueError("n_paths must be at least 1")
    n_paths = int(n_paths)
    n_blocks = -(-n_paths // BLOCK_SIZE)
    z = np.concatenate([_block_normals(seed, b, grid.n_steps) for b in range(n_blocks)])
    dW = z[:n_paths] * np.sqrt(grid.dt)
    dW.setflags(write=False)
    return PathEnsemble(grid, n_paths, dW, int(seed))


def _as_values(u, ensemble, x=None):
    if isinstance(u, ControlProcess):
        return u.realize(ensemble, x)
    arr = np.asarray(u, dtype=float)
    shape = (ensemble.n_paths, ensemble.grid.n_steps)
    if arr.shape == (ensemble.grid.n_steps,):
        arr = np.broadcast_to(arr, shape)
    if arr.shape != shape:
        raise IncompatibleError(f"control values of shape {arr.shape} do not match grid {shape}")
    return arr


def ekeland_distance(u, v, ensemble: PathEnsemble, tol=None, x_u=None, x_v=None) -> float:
    """Discretised dt x P measure of {u != v}.

    ``u``, ``v`` are ControlProcess objects or realised (n_paths, n_steps) arrays.
    Feedback controls need their forward states ``x_u`` / ``x_v``.
    """
    if tol is None:
        feedback = any(isinstance(w, ControlProcess) and w.kind == "feedback" for w in (u, v))
        tol = 1e-12 if feedback else 0.0
    uu = _as_values(u, ensemble, x_u)
    vv = _as_values(v, ensemble, x_v)
    return float(np.count_nonzero(np.abs(uu - vv) > tol)) / uu.size


@dataclass(frozen=True, eq=False)
class WeightProcess:
    values: np.ndarray  # (n_paths, n_steps)


def weighted_distance(u, v, w: WeightProcess, ensemble: PathEnsemble, x_u=None, x_v=None) -> float:
    """Monte Carlo estimate of E int_0^1 w(t) |u(t) - v(t)| dt (left-point rule)."""
    uu = _as_values(u, ensemble, x_u)
    vv = _as_values(v, ensemble, x_v)
    wv = np.asarray(w.values if isinstance(w, WeightProcess) else w)
    if wv.shape != uu.shape:
        raise IncompatibleError(f"weight shape {wv.shape} does not match controls {uu.shape}")
    return float(np.mean(np.sum(wv * np.abs(uu - vv), axis=1)) * ensemble.grid.dt)


def build_weight(adjoints, solution) -> WeightProcess:
    """v = 1 + |p| + |q| + |k| + |P1| + |P1||x| on cells (left node values)."""
    n = solution.x.shape[1] - 1
    if adjoints.p.shape != solution.x.shape:
        raise IncompatibleError("adjoints and solution live on different ensembles")
    p, q, P1, x = (arr[:, :n] for arr in (adjoints.p, adjoints.q, adjoints.P1, solution.x))
    v = 1 + np.abs(p) + np.abs(q) + np.abs(adjoints.k) + np.abs(P1) + np.abs(P1) * np.abs(x)
    return WeightProcess(v)


@dataclass(frozen=True)
class SpikeSpec:
    tau: float
    alpha: float
    patch_value: float

    def __post_init__(self):
        if not (0.0 <= self.tau < 1.0 and 0.0 < self.alpha <= 1.0 - self.tau + 1e-12):
            raise DomainError(f"spike [{self.tau}, {self.tau + self.alpha}] not inside [0, 1]")

    def mask(self, grid: TimeGrid):
        """Cells whose midpoint lies in [tau, tau + alpha]."""
        mid = grid.midpoints
        eps = 1e-12
        return (mid >= self.tau - eps) & (mid <= self.tau + self.alpha + eps)


def spike_variation(u: ControlProcess, spec: SpikeSpec, grid: TimeGrid | None = None) -> ControlProcess:
    """Control equal to ``spec.patch_value`` on [tau, tau+alpha] and to ``u`` elsewhere.

    Grid cells are assigned by midpoint. Deterministic controls with a callable
    time profile and feedback controls need ``grid`` to locate cells.
    """
    if u.uset is not None and not u.uset.contains(spec.patch_value):
        raise DomainError(f"patch value {spec.patch_value} outside the control set")
    label = f"spike({u.label},tau={spec.tau},alpha={spec.alpha},v={spec.patch_value})"
    if u.kind == "grid":
        if grid is None:
            if callable(u.values):
                raise ValueError("grid is required to spike a time-function control")
            grid = TimeGrid(len(u.values))
        vals = np.array(u.grid_values(grid))
        vals[spec.mask(grid)] = spec.patch_value
        return ControlProcess("grid", vals, clamp=u.clamp, uset=u.uset, label=label)
    if u.kind == "path":
        vals = np.array(u.values)
        vals[:, spec.mask(TimeGrid(vals.shape[1]))] = spec.patch_value
        return ControlProcess("path", vals, clamp=u.clamp, uset=u.uset, label=label)
    if grid is None:
        raise ValueError("grid is required to spike a feedback control")
    mask = spec.mask(grid)
    times = grid.times

    def patched(t, x):
        i = min(int(np.searchsorted(times, t + 0.5 * grid.dt)) - 1, grid.n_steps - 1)
        if mask[i]:
            return np.full(np.shape(x), spec.patch_value)
        return u.values(t, x)

    return ControlProcess("feedback", patched, clamp=u.clamp, uset=u.uset, label=label)
