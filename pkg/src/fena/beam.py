"""Transient Euler-Bernoulli beam with spatially varying stiffness and section.

Two-node Hermite-cubic elements (deflection and rotation per node), element
integrals by 3-point Gauss quadrature, pinned-pinned supports, Rayleigh damping
``C = alpha M + beta K`` and average-acceleration Newmark time stepping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.interpolate import CubicSpline

from .errors import NumericError
from .rod import FieldHistory, HarmonicLoad

GAUSS_XI = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 9.0

L_BEAM = 0.5
RHO_BEAM = 2000.0
NU_BEAM = 0.3
R0 = 0.01
E0 = 1e7
ALPHA_D = 1.13
BETA_D = 1.31e-5
OMEGA0_RANGE = (6.28, 622.04)
SPATIAL_RANGE = (math.pi / L_BEAM, 10 * math.pi / L_BEAM)


class InstabilityError(NumericError):
    pass


def _as_field(f) -> Callable:
    if callable(f):
        return f
    val = float(f)
    return lambda x: np.full_like(np.asarray(x, dtype=float), val)


@dataclass
class BeamSpec:
    E_field: Callable | float = E0
    R_field: Callable | float = R0
    L: float = L_BEAM
    rho: float = RHO_BEAM
    nu: float = NU_BEAM            # recorded only; bending theory ignores it
    damping: tuple = (ALPHA_D, BETA_D)
    n_elem: int = 100

    def __post_init__(self):
        if self.n_elem < 4:
            raise ValueError("n_elem must be >= 4")
        if self.L <= 0 or self.rho <= 0:
            raise ValueError("L and rho must be positive")
        self.E_field = _as_field(self.E_field)
        self.R_field = _as_field(self.R_field)

    def area(self, x):
        return np.pi * self.R_field(x) ** 2

    def inertia(self, x):
        return np.pi * self.R_field(x) ** 4 / 4

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n_elem + 1)


@dataclass
class NewmarkConfig:
    dt_internal: float = 1e-4
    beta: float = 0.25
    gamma: float = 0.5
    output_stride: int = 10

    @property
    def dt_output(self) -> float:
        return self.dt_internal * self.output_stride


@dataclass
class BeamSystem:
    """Matrices restricted to the free DOFs (end deflections removed)."""
    M: np.ndarray
    K: np.ndarray
    load: np.ndarray          # consistent nodal loads for a unit uniform line load
    free: np.ndarray          # indices of free DOFs in the full 2(n+1) numbering
    spec: BeamSpec = field(repr=False)
    M_full: np.ndarray | None = field(default=None, repr=False)
    K_full: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_full(self) -> int:
        return 2 * (self.spec.n_elem + 1)


def hermite_shapes(xi, h):
    """Shape functions and their second x-derivatives at local coordinates ``xi``."""
    xi = np.asarray(xi, dtype=float)
    N = np.stack([(1 - xi) ** 2 * (2 + xi) / 4,
                  h / 8 * (1 - xi) ** 2 * (1 + xi),
                  (1 + xi) ** 2 * (2 - xi) / 4,
                  h / 8 * (1 + xi) ** 2 * (xi - 1)], axis=-1)
    d2 = np.stack([1.5 * xi, h * (3 * xi - 1) / 4, -1.5 * xi, h * (3 * xi + 1) / 4], axis=-1)
    return N, d2 * (4.0 / h ** 2)


def assemble(spec: BeamSpec) -> BeamSystem:
    n = spec.n_elem
    nodes = spec.nodes
    h = spec.L / n
    N, B = hermite_shapes(GAUSS_XI, h)                                 # (3, 4)
    xg = (nodes[:-1, None] + nodes[1:, None]) / 2 + GAUSS_XI[None, :] * h / 2   # (n, 3)
    EI = spec.E_field(xg) * spec.inertia(xg)
    rhoA = spec.rho * spec.area(xg)
    for name, vals in (("E*I", EI), ("rho*A", rhoA)):
        bad = ~(vals > 0) | ~np.isfinite(vals)
        if bad.any():
            e, g = np.argwhere(bad)[0]
            raise ValueError(f"non-positive {name} = {vals[e, g]!r} at x = {xg[e, g]:.6g}")
    jac = h / 2
    Ke = np.einsum("eg,g,gi,gj->eij", EI, GAUSS_W * jac, B, B)
    Me = np.einsum("eg,g,gi,gj->eij", rhoA, GAUSS_W * jac, N, N)
    Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))     # exact symmetry despite summation order
    Me = 0.5 * (Me + Me.transpose(0, 2, 1))
    fe = (GAUSS_W * jac) @ N                                           # (4,)
    nf = 2 * (n + 1)
    K = np.zeros((nf, nf))
    M = np.zeros((nf, nf))
    F = np.zeros(nf)
    for e in range(n):
        s = slice(2 * e, 2 * e + 4)
        K[s, s] += Ke[e]
        M[s, s] += Me[e]
        F[s] += fe
    free = np.setdiff1d(np.arange(nf), [0, 2 * n])
    return BeamSystem(M[np.ix_(free, free)], K[np.ix_(free, free)], F[free], free, spec, M, K)


def damping_matrix(system: BeamSystem) -> np.ndarray:
    a, b = system.spec.damping
    return a * system.M + b * system.K


def interpolation_matrix(spec: BeamSpec, x_out) -> np.ndarray:
    """Maps full DOF vectors to Hermite-interpolated deflections at ``x_out``."""
    x = np.asarray(x_out, dtype=float)
    h = spec.L / spec.n_elem
    e = np.clip((x / h).astype(int), 0, spec.n_elem - 1)
    xi = np.clip(2 * (x - e * h) / h - 1, -1.0, 1.0)
    # snap points that sit on nodes so supports interpolate to exact zeros
    xi = np.where(np.abs(xi - 1) < 1e-9, 1.0, np.where(np.abs(xi + 1) < 1e-9, -1.0, xi))
    N, _ = hermite_shapes(xi, h)
    H = np.zeros((x.size, 2 * (spec.n_elem + 1)))
    rows = np.arange(x.size)
    for k in range(4):
        H[rows, 2 * e + k] = N[:, k]
    return H


def fit_nodal_dofs(spec: BeamSpec, x_grid, values) -> np.ndarray:
    """Full DOF vector (deflections and rotations) from values sampled on ``x_grid``.

    A natural cubic spline through the samples supplies nodal values and slopes;
    its zero end curvature matches the moment-free pinned supports.
    """
    values = np.asarray(values, dtype=float)
    if not values.any():
        return np.zeros(2 * (spec.n_elem + 1))
    sp = CubicSpline(np.asarray(x_grid, dtype=float), values, bc_type="natural")
    nodes = spec.nodes
    out = np.empty(2 * nodes.size)
    out[0::2] = sp(nodes)
    out[1::2] = sp(nodes, 1)
    return out


def _energy(M, K, d, v):
    return 0.5 * (v @ M @ v + d @ K @ d)


def newmark_transient(spec: BeamSpec, cfg: NewmarkConfig, load: HarmonicLoad | None, t_grid,
                      v0=None, v_dot0=None, x_out=None, system: BeamSystem | None = None,
                      energy: bool = False):
    """March the beam from (v0, v_dot0) given on ``x_out`` and sample at ``t_grid``.

    ``t_grid`` must be uniform with spacing ``dt_internal * output_stride`` and
    start at 0.  Returns a :class:`FieldHistory` of deflection and velocity on
    ``x_out`` (default 101 evenly spaced points), plus the energy trace when
    ``energy`` is true.
    """
    t = np.asarray(t_grid, dtype=float)
    x_out = np.linspace(0.0, spec.L, 101) if x_out is None else np.asarray(x_out, dtype=float)
    if t[0] != 0.0 or (t.size > 1 and not np.allclose(np.diff(t), cfg.dt_output, rtol=1e-9, atol=0)):
        raise ValueError(f"t_grid must start at 0 with spacing {cfg.dt_output:g} s")
    sys_ = system or assemble(spec)
    M, K, free = sys_.M, sys_.K, sys_.free
    C = damping_matrix(sys_)
    dt, beta, gamma = cfg.dt_internal, cfg.beta, cfg.gamma
    H = interpolation_matrix(spec, x_out)[:, free]

    zeros = np.zeros(x_out.size)
    d = fit_nodal_dofs(spec, x_out, zeros if v0 is None else v0)[free]
    v = fit_nodal_dofs(spec, x_out, zeros if v_dot0 is None else v_dot0)[free]
    amp = (lambda tt: 0.0) if load is None else load.value
    Fu = sys_.load
    try:
        cM = linalg.cho_factor(M)
        a = linalg.cho_solve(cM, amp(0.0) * Fu - C @ v - K @ d)
        S = linalg.cho_factor(M + gamma * dt * C + beta * dt * dt * K)
        e_static = 0.5 * Fu @ linalg.cho_solve(linalg.cho_factor(K), Fu)
    except linalg.LinAlgError as exc:
        raise NumericError(f"beam matrix factorization failed: {exc}") from exc
    S_inv = linalg.cho_solve(S, np.eye(M.shape[0]))

    n_out = t.size
    U = np.empty((n_out, x_out.size))
    V = np.empty((n_out, x_out.size))
    En = np.empty(n_out)
    U[0], V[0], En[0] = H @ d, H @ v, _energy(M, K, d, v)
    # growth is judged against the initial energy or the static strain energy of
    # the largest load seen so far, whichever is larger; a forced start from rest
    # legitimately gains many orders of magnitude over its first-step energy
    amp_max = abs(amp(0.0))
    step = 0
    for k in range(1, n_out):
        for _ in range(cfg.output_stride):
            step += 1
            d_p = d + dt * v + dt * dt * (0.5 - beta) * a
            v_p = v + dt * (1.0 - gamma) * a
            f = amp(step * dt)
            amp_max = max(amp_max, abs(f))
            a = S_inv @ (f * Fu - C @ v_p - K @ d_p)
            d = d_p + beta * dt * dt * a
            v = v_p + gamma * dt * a
        U[k], V[k] = H @ d, H @ v
        En[k] = _energy(M, K, d, v)
        e_ref = max(En[0], e_static * amp_max * amp_max)
        if not np.isfinite(En[k]) or (e_ref > 0 and En[k] > 1e6 * e_ref):
            raise InstabilityError(f"energy grew from {e_ref:.3e} to {En[k]:.3e} by t = {t[k]:.4g} s")
    hist = FieldHistory(x_out, t, U, V)
    return (hist, En) if energy else hist


def beam_sample_fields(omega_r: float, omega_E: float, n_x: int = 101, L: float = L_BEAM,
                       R_0: float = R0, E_0: float = E0):
    """E(x) = E0 (1 + 0.3 cos^4(omega_E x)) and R(x) = R0 (1 + sin^4(omega_r x)).

    Returns ``(E_grid, R_grid, E_fn, R_fn)`` with the grids on ``n_x`` evenly
    spaced points.
    """
    def E_fn(x):
        return E_0 * (1.0 + 0.3 * np.cos(omega_E * np.asarray(x, dtype=float)) ** 4)

    def R_fn(x):
        return R_0 * (1.0 + np.sin(omega_r * np.asarray(x, dtype=float)) ** 4)

    x = np.linspace(0.0, L, n_x)
    return E_fn(x), R_fn(x), E_fn, R_fn


def natural_frequencies(system: BeamSystem, count: int) -> np.ndarray:
    lam = linalg.eigh(system.K, system.M, eigvals_only=True, subset_by_index=[0, count - 1])
    return np.sqrt(lam)


def dump_triplets(matrix: np.ndarray, path) -> None:
    """Write nonzero entries as ``row col value`` lines (debug aid)."""
    r, c = np.nonzero(matrix)
    with open(path, "w") as fh:
        for i, j in zip(r, c):
            fh.write(f"{i} {j} {float(matrix[i, j])!r}\n")
