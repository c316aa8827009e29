"""Least-squares Monte Carlo backward induction for scalar linear BSDEs.

Solves  -dY = (g_y Y + g_z Z + h) dt - Z dW,  Y(1) = terminal
on a path ensemble, with conditional expectations given by regression on
monomials of (x_i, W_i).
"""
from __future__ import annotations

import numpy as np

from .errors import IllConditionedBasisError

RCOND = 1e-10


def n_basis(degree):
    return (degree + 1) * (degree + 2) // 2


def basis(x_i, W_i, degree):
    """Intercept plus standardised monomials of (x_i, W_i) up to ``degree``.

    Variables with zero spread across paths (e.g. at t=0) are dropped.
    """
    n = x_i.shape[0]
    base = []
    for v in (x_i, W_i):
        mu, sd = v.mean(), v.std()
        if sd > 1e-12 * (1 + abs(mu)):
            base.append((v - mu) / sd)
    cols = [np.ones(n)]
    for d in range(1, degree + 1):
        if len(base) == 1:
            cols.append(base[0] ** d)
        elif len(base) == 2:
            for j in range(d + 1):
                cols.append(base[0] ** (d - j) * base[1] ** j)
    return np.column_stack(cols)


def _per_step(arr, i):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim == 1:
        return arr[i]
    return arr[:, i]


def solve_linear_bsde(terminal, g_y, g_z, h, x, ensemble, degree=3):
    """Backward induction with a joint regression on [phi, phi * dW/sqrt(dt)].

    The two coefficient blocks estimate E_i[Y_{i+1}] and E_i[Y_{i+1} dW_i]/dt.
    ``g_y``, ``g_z`` are scalars, (n_steps,) or (n_paths, n_steps) arrays;
    ``h`` is (n_paths, n_steps) or broadcastable. Returns (Y, Z) with shapes
    (n_paths, n_steps + 1) and (n_paths, n_steps).
    """
    n, N = ensemble.n_paths, ensemble.grid.n_steps
    nb = n_basis(degree)
    if n < 100 * nb:
        raise ValueError(f"lsmc needs at least {100 * nb} paths for degree {degree}, got {n}")
    dt = ensemble.grid.dt
    sq = np.sqrt(dt)
    W, dW = ensemble.W, ensemble.increments
    h = np.broadcast_to(np.asarray(h, dtype=float), (n, N))
    Y = np.empty((n, N + 1))
    Z = np.empty((n, N))
    Y[:, N] = np.broadcast_to(terminal, (n,))
    for i in range(N - 1, -1, -1):
        if not (np.all(np.isfinite(x[:, i])) and np.all(np.isfinite(Y[:, i + 1]))):
            raise IllConditionedBasisError(i, "non-finite state or regressand")
        phi = basis(x[:, i], W[:, i], degree)
        G = np.hstack([phi, phi * (dW[:, i] / sq)[:, None]])
        if not np.all(np.isfinite(G)):
            raise IllConditionedBasisError(i, "non-finite regressors")
        coef, _, rank, _ = np.linalg.lstsq(G, Y[:, i + 1], rcond=RCOND)
        if rank == 0:
            raise IllConditionedBasisError(i, "zero effective rank")
        k = phi.shape[1]
        ey = phi @ coef[:k]
        Z[:, i] = phi @ coef[k:] / sq
        Y[:, i] = ey + (_per_step(g_y, i) * ey + _per_step(g_z, i) * Z[:, i] + h[:, i]) * dt
    return Y, Z
