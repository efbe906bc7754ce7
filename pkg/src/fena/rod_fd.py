"""Explicit finite-difference integrator for the axial rod (independent oracle).

Second-order central differences in space and time on a uniform node grid with
lumped (half) masses at the end nodes.  Boundary springs and point forces enter
through those end nodes.  Accepts arbitrary initial displacement and velocity,
so it also checks closed-form solutions and energy behaviour.
"""

from __future__ import annotations

import math

import numpy as np

from .rod import FieldHistory, FixedFree, HarmonicLoad, RodSpec


def _interp_rows(xf: np.ndarray, rows: np.ndarray, x_out: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(x_out, xf, r) for r in rows])


def simulate_rod_fd(rod: RodSpec, load: HarmonicLoad | None, x_out, t_out, n_nodes: int = 2001,
                    cfl: float = 0.98, u0=None, v0=None, energy: bool = False):
    """Integrate the rod on ``n_nodes`` nodes and sample at ``x_out`` x ``t_out``.

    ``t_out`` must be uniform and start at 0.  ``u0``/``v0`` are callables of x
    (default zero).  With ``energy=True`` also returns the discrete energy at
    every output time.
    """
    x_out = np.asarray(x_out, dtype=float)
    t_out = np.asarray(t_out, dtype=float)
    dt_out = t_out[1] - t_out[0] if t_out.size > 1 else 1.0
    if t_out[0] != 0.0 or (t_out.size > 2 and not np.allclose(np.diff(t_out), dt_out)):
        raise ValueError("t_out must be uniform and start at 0")
    n = n_nodes
    h = rod.L / (n - 1)
    xf = np.linspace(0.0, rod.L, n)
    sub = max(1, math.ceil(dt_out * rod.c / (cfl * h)))
    dt = dt_out / sub
    EA, rhoA = rod.EA, rod.rho * rod.A
    mass = np.full(n, rhoA * h)
    mass[[0, -1]] *= 0.5
    fixed_left = isinstance(rod.bc, FixedFree)
    k1 = 0.0 if fixed_left else rod.bc.k1
    k2 = 0.0 if fixed_left else rod.bc.k2

    def internal(u):
        # -K u for the chain of axial springs EA/h plus boundary springs
        f = np.zeros_like(u)
        d = (EA / h) * np.diff(u)
        f[:-1] += d
        f[1:] -= d
        f[0] -= k1 * u[0]
        f[-1] -= k2 * u[-1]
        return f

    def external(t):
        f = np.zeros(n)
        if load is None:
            return f
        val = load.value(t)
        if load.kind == "boundary":
            f[-1] = val
        else:
            f[:] = val * h
            f[[0, -1]] *= 0.5
        return f

    def accel(u, t):
        a = (internal(u) + external(t)) / mass
        if fixed_left:
            a[0] = 0.0
        return a

    def energy_of(u, v):
        strain = 0.5 * (EA / h) * np.sum(np.diff(u) ** 2)
        return 0.5 * np.sum(mass * v * v) + strain + 0.5 * k1 * u[0] ** 2 + 0.5 * k2 * u[-1] ** 2

    u = np.zeros(n) if u0 is None else np.asarray(u0(xf), dtype=float).copy()
    v = np.zeros(n) if v0 is None else np.asarray(v0(xf), dtype=float).copy()
    if fixed_left:
        u[0] = v[0] = 0.0
    a = accel(u, 0.0)
    u_prev = u - dt * v + 0.5 * dt * dt * a
    n_out = t_out.size
    U = np.empty((n_out, n))
    V = np.empty((n_out, n))
    En = np.empty(n_out)
    U[0], V[0], En[0] = u, v, energy_of(u, v)
    step = 0
    for k in range(1, n_out):
        for _ in range(sub):
            t = step * dt
            u_next = 2.0 * u - u_prev + dt * dt * accel(u, t)
            u_prev, u = u, u_next
            step += 1
        # centred velocity needs one step ahead
        u_ahead = 2.0 * u - u_prev + dt * dt * accel(u, step * dt)
        v = (u_ahead - u_prev) / (2.0 * dt)
        U[k], V[k], En[k] = u, v, energy_of(u, v)
    hist = FieldHistory(x_out, t_out, _interp_rows(xf, U, x_out), _interp_rows(xf, V, x_out))
    return (hist, En) if energy else hist


def fd_rod_frequencies(rod: RodSpec, count: int, n_nodes: int = 2001) -> np.ndarray:
    """Lowest ``count`` natural frequencies of the lumped-mass FD rod (eigenvalue oracle)."""
    from scipy.linalg import eigh_tridiagonal

    n = n_nodes
    h = rod.L / (n - 1)
    k = rod.EA / h
    diag = np.full(n, 2 * k)
    diag[[0, -1]] = k
    off = np.full(n - 1, -k)
    mass = np.full(n, rod.rho * rod.A * h)
    mass[[0, -1]] *= 0.5
    if isinstance(rod.bc, FixedFree):
        diag, off, mass = diag[1:], off[1:], mass[1:]
    else:
        diag[0] += rod.bc.k1
        diag[-1] += rod.bc.k2
    s = 1.0 / np.sqrt(mass)
    lam = eigh_tridiagonal(diag * s * s, off * s[:-1] * s[1:], eigvals_only=True,
                           select="i", select_range=(0, count + 1))
    w = np.sqrt(np.clip(lam, 0.0, None))
    return w[w > 1e-6 * w.max()][:count]
