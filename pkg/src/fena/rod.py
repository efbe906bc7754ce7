"""Closed-form modal-superposition solutions for axial rod vibration.

Two configurations are covered, both driven by a harmonic load ``f0 sin(w0 t)``
and starting from rest:

* fixed at x=0, free at x=L, point force at x=L;
* elastic springs k1 (x=0) and k2 (x=L), uniformly distributed load.

Fields are returned as :class:`FieldHistory` whose first time row is t=0.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import NumericError, ResonanceError

RESONANCE_EPS = 1e-6


@dataclass(frozen=True)
class FixedFree:
    pass


@dataclass(frozen=True)
class SpringSpring:
    k1: float
    k2: float

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("spring stiffnesses must be non-negative")


@dataclass(frozen=True)
class RodSpec:
    L: float = 1.0
    A: float = 1e-4
    E: float = 1e7
    rho: float = 9000.0
    bc: FixedFree | SpringSpring = field(default_factory=FixedFree)
    r_max: int = 200

    def __post_init__(self):
        if min(self.L, self.A, self.E, self.rho) <= 0:
            raise ValueError("rod properties must be positive")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")

    @property
    def c(self) -> float:
        return float(np.sqrt(self.E / self.rho))

    @property
    def EA(self) -> float:
        return self.E * self.A

    @classmethod
    def reference(cls, bc=None, r_max: int = 200) -> "RodSpec":
        """Rod used throughout the rod examples: L=1 m, A=1e-4 m^2, rho=9000, E=1e7."""
        return cls(bc=bc or FixedFree(), r_max=r_max)

    @classmethod
    def reference_springs(cls, r_max: int = 200) -> "RodSpec":
        """Spring-supported variant with k1 = EA/2L and k2 = 2EA/L."""
        base = cls()
        return cls(bc=SpringSpring(base.EA / (2 * base.L), 2 * base.EA / base.L), r_max=r_max)


@dataclass(frozen=True)
class HarmonicLoad:
    """``amplitude * sin(omega * t)``; a point force (N) or a line load (N/m)."""
    amplitude: float
    omega: float
    kind: str = "boundary"  # or "distributed"

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.kind not in ("boundary", "distributed"):
            raise ValueError(f"unknown load kind {self.kind!r}")

    def value(self, t):
        return self.amplitude * np.sin(self.omega * np.asarray(t, dtype=float))

    def rate(self, t):
        return self.amplitude * self.omega * np.cos(self.omega * np.asarray(t, dtype=float))


@dataclass
class FieldHistory:
    x: np.ndarray        # (n_x,)
    t: np.ndarray        # (n_t,), t[0] is the initial instant
    u: np.ndarray        # (n_t, n_x)
    u_dot: np.ndarray    # (n_t, n_x)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if np.any(np.diff(self.x) <= 0) or np.any(np.diff(self.t) <= 0):
            raise ValueError("grids must be strictly increasing")
        shape = (self.t.size, self.x.size)
        if self.u.shape != shape or self.u_dot.shape != shape:
            raise ValueError(f"field arrays must be {shape}, got {self.u.shape} and {self.u_dot.shape}")


def _check_resonance(omega0: float, omegas: np.ndarray) -> None:
    gap = np.abs(omega0 - omegas) / omegas
    i = int(np.argmin(gap))
    if gap[i] < RESONANCE_EPS:
        raise ResonanceError(
            f"excitation {omega0:.9g} rad/s within {RESONANCE_EPS:g} of natural frequency "
            f"#{i + 1} = {omegas[i]:.9g} rad/s")


def fixed_free_frequencies(rod: RodSpec, count: int | None = None) -> np.ndarray:
    r = np.arange(1, (count or rod.r_max) + 1)
    return (2 * r - 1) * np.pi * rod.c / (2 * rod.L)


def _odd_cos3(theta):
    """sum_n (-1)^n cos((2n+1) theta) / (2n+1)^3, a periodic piecewise quadratic."""
    th = np.abs(np.mod(np.abs(theta) + np.pi, 2 * np.pi) - np.pi)
    near = th <= np.pi / 2
    th = np.where(near, th, np.pi - th)
    val = np.pi * (np.pi ** 2 - 4 * th ** 2) / 32
    return np.where(near, val, -val)


def _odd_sin2(theta):
    """sum_n (-1)^n sin((2n+1) theta) / (2n+1)^2, a periodic piecewise linear wave."""
    th = np.mod(np.abs(theta) + np.pi, 2 * np.pi) - np.pi
    sgn = np.sign(th) * np.sign(theta)
    a = np.abs(th)
    a = np.where(a <= np.pi / 2, a, np.pi - a)
    return sgn * np.pi * a / 4


def _impose_rest(h: FieldHistory) -> FieldHistory:
    # the truncated velocity tail is ~1e-7 of range at t=0; the prescribed state is exact
    at0 = h.t == 0.0
    h.u[at0] = 0.0
    h.u_dot[at0] = 0.0
    return h


def rod_case1_response(rod: RodSpec, load: HarmonicLoad, x_grid, t_grid,
                       series: str = "accelerated") -> FieldHistory:
    """Fixed-free rod, harmonic end force at x=L, zero initial state.

    Mass-normalised modes ``U_r = sqrt(2/(rho A L)) sin(w_r x / c)`` with
    ``w_r = (2r-1) pi c / 2L`` and modal coordinates
    ``eta_r = U_r(L) f0 / w_r * (w0 sin w_r t - w_r sin w0 t) / (w0^2 - w_r^2)``.

    ``series`` selects how the sum over r <= r_max is evaluated:

    * ``"plain"``: the truncated modal sum as written; error O(1/r_max).
    * ``"static"``: the quasi-static part ``f(t) x / EA`` is summed exactly.
    * ``"accelerated"``: additionally the next two large-r asymptotic parts of
      every modal term are summed exactly (they are Fourier series of periodic
      piecewise polynomials), so the truncated remainder decays like 1/w_r^5.

    All three converge to the same infinite series.
    """
    if not isinstance(rod.bc, FixedFree):
        raise ValueError("rod_case1_response needs a fixed-free rod")
    if series not in ("plain", "static", "accelerated"):
        raise ValueError(f"unknown series mode {series!r}")
    x = np.asarray(x_grid, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    w0, f0 = load.omega, load.amplitude
    w = fixed_free_frequencies(rod)
    _check_resonance(w0, w)
    rhoA, EA, L, c = rod.rho * rod.A, rod.EA, rod.L, rod.c
    sign = np.where(np.arange(1, w.size + 1) % 2 == 1, 1.0, -1.0)    # sin(w_r L / c)
    shapes = np.sin(np.outer(x, w) / c) * (2.0 / (rhoA * L) * sign)   # U_r(x) U_r(L), (n_x, r)
    denom = w0 ** 2 - w ** 2
    swt, cwt = np.sin(np.outer(t, w)), np.cos(np.outer(t, w))        # (n_t, r)
    s0, c0 = np.sin(w0 * t)[:, None], np.cos(w0 * t)[:, None]
    if series == "plain":
        coef = f0 / (w * denom)
        eta = coef * (w0 * swt - w * s0)
        eta_dot = coef * w0 * w * (cwt - c0)
        return FieldHistory(x, t, eta @ shapes.T, eta_dot @ shapes.T)
    u = np.outer(load.value(t), x) / EA
    u_dot = np.outer(load.rate(t), x) / EA
    if series == "static":
        coef = f0 / (w ** 2 * denom)
        eta = coef * (w0 * w * swt - w0 ** 2 * s0)
        eta_dot = coef * (w0 * w ** 2 * cwt - w0 ** 3 * c0)
        return _impose_rest(FieldHistory(x, t, u + eta @ shapes.T, u_dot + eta_dot @ shapes.T))
    # remainder after removing -f0 w0 sin(w t)/w^3 and f0 w0^2 sin(w0 t)/w^4
    coef = f0 * w0 ** 2 / (w ** 4 * denom)
    eta = coef * (w0 * w * swt - w0 ** 2 * s0)
    eta_dot = coef * (w0 * w ** 2 * cwt - w0 ** 3 * c0)
    # sum_r U_r(x)U_r(L) sin(w_r t)/w_r^3 and its time derivative, via travelling-wave phases
    k = np.pi / (2 * L)
    th_m = k * (x[None, :] - c * t[:, None])
    th_p = k * (x[None, :] + c * t[:, None])
    A = (_odd_cos3(th_m) - _odd_cos3(th_p)) / (rhoA * L * c ** 3 * k ** 3)
    A_dot = (_odd_sin2(th_p) + _odd_sin2(th_m)) / (rhoA * L * c ** 2 * k ** 2)
    # sum_r U_r(x)U_r(L)/w_r^4 = int G(x,s) rho A G(s,L) ds with G = min(x,s)/EA
    B = rhoA / EA ** 2 * (x ** 3 / 3 + x * (L ** 2 - x ** 2) / 2)
    u += eta @ shapes.T - f0 * w0 * A + f0 * w0 ** 2 * s0 * B
    u_dot += eta_dot @ shapes.T - f0 * w0 * A_dot + f0 * w0 ** 3 * c0 * B
    return _impose_rest(FieldHistory(x, t, u, u_dot))


def spring_characteristic(s, K1: float, K2: float):
    """Frequency equation in ``s = w L / c`` with ``K = k L / EA``; roots are the spectrum."""
    return (K1 * K2 - s * s) * np.sin(s) + s * (K1 + K2) * np.cos(s)


def rod_spring_frequencies(rod: RodSpec, count: int) -> np.ndarray:
    """First ``count`` positive natural frequencies of the spring-supported rod.

    Mode shape ``U = cos(w x/c) + (k1 c / (EA w)) sin(w x/c)`` satisfies
    ``EA U'(0) = k1 U(0)``; imposing the restoring spring ``EA U'(L) = -k2 U(L)``
    gives :func:`spring_characteristic`.
    """
    if not isinstance(rod.bc, SpringSpring):
        raise ValueError("rod_spring_frequencies needs spring boundary conditions")
    if count < 1:
        raise ValueError("count must be >= 1")
    K1 = rod.bc.k1 * rod.L / rod.EA
    K2 = rod.bc.k2 * rod.L / rod.EA
    # Irrational offset keeps grid points off the exact n*pi roots of the free-free limit.
    n_grid = 64 * (count + 2)
    s = (np.arange(n_grid) + 0.5 / np.sqrt(2.0)) * (np.pi / 64)
    g = spring_characteristic(s, K1, K2)
    roots = []
    for a, b, ga, gb in zip(s[:-1], s[1:], g[:-1], g[1:]):
        if ga == 0.0:
            roots.append(a)
        elif ga * gb < 0:
            roots.append(optimize.brentq(spring_characteristic, a, b, args=(K1, K2),
                                         xtol=1e-15, rtol=1e-14, maxiter=200))
        if len(roots) == count:
            break
    if len(roots) < count:
        raise NumericError(
            f"bracketed only {len(roots)} of {count} roots scanning s in (0, {s[-1]:.3f}] "
            f"with {n_grid} points (K1={K1:.4g}, K2={K2:.4g})")
    return np.asarray(roots) * rod.c / rod.L


def spring_mode_shape(rod: RodSpec, omega: float, x):
    s = omega / rod.c
    return np.cos(s * np.asarray(x)) + rod.bc.k1 / (rod.EA * s) * np.sin(s * np.asarray(x))


def spring_mode_integrals(rod: RodSpec, omegas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(int U dx, int U^2 dx) over [0, L] for each mode, by adaptive quadrature."""
    I1 = np.empty(omegas.size)
    I2 = np.empty(omegas.size)
    for i, w in enumerate(omegas):
        # break points every half wavelength keep each panel non-oscillatory
        n_half = int(np.ceil(w * rod.L / (np.pi * rod.c))) + 1
        tol = dict(epsabs=1e-14 * rod.L, epsrel=1e-10, limit=4 * n_half + 50,
                   points=np.linspace(0.0, rod.L, n_half + 1)[1:-1])
        I1[i] = integrate.quad(lambda x: spring_mode_shape(rod, w, x), 0.0, rod.L, **tol)[0]
        I2[i] = integrate.quad(lambda x: spring_mode_shape(rod, w, x) ** 2, 0.0, rod.L, **tol)[0]
    return I1, I2


@functools.lru_cache(maxsize=16)
def _spring_modes(rod: RodSpec):
    w = rod_spring_frequencies(rod, rod.r_max)
    I1, I2 = spring_mode_integrals(rod, w)
    return w, I1, I2


def rod_spring_distributed_response(rod: RodSpec, load: HarmonicLoad, x_grid, t_grid) -> FieldHistory:
    """Spring-supported rod under a uniform harmonic line load, zero initial state.

    ``u = sum q0 B_r Ut_r(x) / (rho A w_r) * (w0 sin w_r t - w_r sin w0 t) / (w0^2 - w_r^2)``
    where ``Ut_r = U_r / ||U_r||`` is L2-normalised on [0, L] and ``B_r = int Ut_r dx``.
    """
    x = np.asarray(x_grid, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    w, I1, I2 = _spring_modes(rod)
    w0, q0 = load.omega, load.amplitude
    _check_resonance(w0, w)
    B = I1 / np.sqrt(I2)
    shapes = np.stack([spring_mode_shape(rod, wi, x) for wi in w], axis=1) / np.sqrt(I2)  # (n_x, r)
    denom = w0 ** 2 - w ** 2
    amp = q0 * B / (rod.rho * rod.A * w * denom)
    swt, cwt = np.sin(np.outer(t, w)), np.cos(np.outer(t, w))
    s0, c0 = np.sin(w0 * t)[:, None], np.cos(w0 * t)[:, None]
    eta = amp * (w0 * swt - w * s0)
    eta_dot = amp * w0 * w * (cwt - c0)
    return FieldHistory(x, t, eta @ shapes.T, eta_dot @ shapes.T)


def rod_response(rod: RodSpec, load: HarmonicLoad, x_grid, t_grid) -> FieldHistory:
    """Dispatch on boundary condition."""
    if isinstance(rod.bc, FixedFree):
        return rod_case1_response(rod, load, x_grid, t_grid)
    return rod_spring_distributed_response(rod, load, x_grid, t_grid)


def window_sample(full: FieldHistory, load: HarmonicLoad, t_s: int, w: int):
    """Cut a training window starting from the state at row ``t_s`` of ``full``.

    The static input is ``[u(., t_s); u_dot(., t_s)]`` and the window covers the
    ``w`` steps after it.  The load is evaluated at absolute times so its phase
    carries over; the window's own clock starts at zero.
    """
    from .sample import Sample

    n_steps = full.t.size - 1
    if t_s < 0 or w < 1 or t_s + w > n_steps:
        raise ValueError(f"window [{t_s}, {t_s + w}] overruns source history of {n_steps} steps")
    rows = slice(t_s + 1, t_s + w + 1)
    t_abs = full.t[rows]
    return Sample(
        in_static=np.stack([full.u[t_s], full.u_dot[t_s]]),
        in_dyn=load.value(t_abs)[:, None],
        out=np.concatenate([full.u[rows], full.u_dot[rows]], axis=1),
        meta={"t_s": int(t_s), "omega0": load.omega, "t": t_abs - full.t[t_s]},
    )
