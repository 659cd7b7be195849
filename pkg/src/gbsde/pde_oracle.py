"""Explicit finite differences for the fully nonlinear parabolic system

    d_t u^l + F^l(D^2 u^l, D u^l, u, x, t) = 0,   u^l(T, .) = phi^l,

    F^l(A, p, r, x, t) = G(sigma^T A sigma + 2[<p, h_ij>] + 2[g^l_ij(t, x, r, sigma^T p)])
                         + <b, p> + f^l(t, x, r, sigma^T p).

Used as an independent reference for the probabilistic solver, plus a local
consistency probe that integrates the frozen-coefficient ODE a smooth test
function induces at one point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import CFLError, InvalidInputError, NumericalDomainError
from .exprdsl import evaluate_array
from .forward import SdeCoefficients, coordinate_env
from .gcore import GFunction
from .grid import GridSpec, ValueField, gradient, interpolate
from .picard import SystemSpec

CFL_LIMIT = 0.5


@dataclass(frozen=True, eq=False)
class PdeSystem:
    """The operators ``F^l`` assembled from G, the dynamics and the drivers."""

    gf: GFunction
    dyn: SdeCoefficients
    spec: SystemSpec

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def k(self) -> int:
        return self.dyn.k

    @property
    def d(self) -> int:
        return self.dyn.d

    def _env(self, l, t, X, r, sigma, p):
        """Driver environment with ``y = r`` and ``z = sigma^T p``."""
        env = coordinate_env(t, X)
        for j in range(self.n):
            env[f"y{j + 1}"] = r[j]
        z = np.einsum("pkd,pk->pd", sigma, p)
        for i in range(self.d):
            env[f"z{i + 1}"] = z[:, i]
        return env

    def F_nodes(self, l: int, t: float, X: np.ndarray, A: np.ndarray, p: np.ndarray, r: np.ndarray,
                coef=None) -> np.ndarray:
        """``F^l`` at ``P`` points: ``A (P, k, k)``, ``p (P, k)``, ``r (n, P)``."""
        P = len(X)
        b, h, sigma = coef if coef is not None else (self.dyn.drift(t, X), self.dyn.hterm(t, X),
                                                      self.dyn.diffusion(t, X))
        M = np.einsum("pki,pkj,pjl->pil", sigma, A, sigma)
        if self.dyn.has_h:
            M = M + 2.0 * np.einsum("ijpk,pk->pij", h, p)
        env = self._env(l, t, X, r, sigma, p)
        gm = self.spec.g[l]
        if gm is not None:
            for i in range(self.d):
                for j in range(self.d):
                    M[:, i, j] += 2.0 * evaluate_array(gm[i][j], env, (P,))
        out = self.gf.batch(M) + np.einsum("pk,pk->p", b, p)
        return out + evaluate_array(self.spec.f[l], env, (P,))

    def F(self, l: int, A, p, r, x, t: float) -> float:
        """``F^l`` at a single point."""
        k = self.k
        shapes = {"A": (k, k), "p": (k,), "r": (self.n,), "x": (k,)}
        arrays = {}
        for name, value in (("A", A), ("p", p), ("r", r), ("x", x)):
            arr = np.asarray(value, dtype=float)
            if arr.shape != shapes[name]:
                raise InvalidInputError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            arrays[name] = arr
        if not np.allclose(arrays["A"], arrays["A"].T):
            raise InvalidInputError("A must be symmetric")
        A = arrays["A"].reshape(1, k, k)
        p = arrays["p"].reshape(1, k)
        r = arrays["r"].reshape(self.n, 1)
        X = arrays["x"].reshape(1, k)
        return float(self.F_nodes(l, t, X, A, p, r)[0])


def assemble_F(gf: GFunction, dyn: SdeCoefficients, spec: SystemSpec) -> PdeSystem:
    if gf.gamma.dim != dyn.d or spec.d != dyn.d or spec.k != dyn.k:
        raise InvalidInputError(
            f"dimension mismatch: G has d={gf.gamma.dim}, dynamics (k={dyn.k}, d={dyn.d}), "
            f"system (k={spec.k}, d={spec.d})"
        )
    return PdeSystem(gf, dyn, spec)


@dataclass
class FdScheme:
    """Central differences on ``grid``; ``substeps`` explicit steps per output step.

    ``substeps=None`` picks the smallest count that satisfies the CFL bound.
    """

    grid: GridSpec
    substeps: int | None = None
    cfl_ratio: float | None = field(default=None, init=False)


def _coef_sup(sys: PdeSystem, grid: GridSpec) -> tuple[float, float]:
    """``sup ||sigma||_F^2`` and ``sup ||b||`` over the grid nodes and time nodes."""
    times = [grid.t_start] if sys.dyn.time_homogeneous else grid.times
    s2 = bn = 0.0
    for t in times:
        sig = sys.dyn.diffusion(t, grid.points)
        s2 = max(s2, float(np.max(np.sum(sig**2, axis=(1, 2)))))
        bn = max(bn, float(np.max(np.linalg.norm(sys.dyn.drift(t, grid.points), axis=1))))
    return s2, bn


def cfl_bound(scheme: FdScheme, sys: PdeSystem) -> float:
    """``dx^2 / (2 sigma_bar^2 sup||sigma||^2 + dx sup||b|| k)``."""
    dx = min(scheme.grid.dx)
    s2, bn = _coef_sup(sys, scheme.grid)
    denom = 2.0 * sys.gf.gamma.ceiling * s2 + dx * bn * scheme.grid.k
    return math.inf if denom == 0 else dx * dx / denom


def _padded(u: np.ndarray, lead: int) -> np.ndarray:
    """Pad every spatial axis by one ghost node continuing the boundary slope."""
    for ax in range(lead, u.ndim):
        first = 2 * np.take(u, [0], axis=ax) - np.take(u, [1], axis=ax)
        last = 2 * np.take(u, [-1], axis=ax) - np.take(u, [-2], axis=ax)
        u = np.concatenate([first, u, last], axis=ax)
    return u


def derivatives(grid: GridSpec, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central first and second differences of ``u (*shape)``: ``p (P, k)``, ``A (P, k, k)``."""
    k, dx = grid.k, grid.dx
    up = _padded(u, 0)
    inner = tuple(slice(1, -1) for _ in range(k))

    def shifted(offsets):
        return up[tuple(slice(1 + o, up.shape[i] - 1 + o) for i, o in enumerate(offsets))]

    P = grid.size
    p = np.empty((P, k))
    A = np.empty((P, k, k))
    centre = up[inner]
    for i in range(k):
        e = [0] * k
        e[i] = 1
        plus, minus = shifted(e), shifted([-v for v in e])
        p[:, i] = ((plus - minus) / (2 * dx[i])).ravel()
        A[:, i, i] = ((plus - 2 * centre + minus) / dx[i] ** 2).ravel()
        for j in range(i + 1, k):
            def off(si, sj):
                o = [0] * k
                o[i], o[j] = si, sj
                return shifted(o)

            cross = (off(1, 1) - off(1, -1) - off(-1, 1) + off(-1, -1)) / (4 * dx[i] * dx[j])
            A[:, i, j] = A[:, j, i] = cross.ravel()
    return p, A


def fd_solve(sys: PdeSystem, scheme: FdScheme, T: float | None = None) -> ValueField:
    """Backward explicit sweep; output slices sit on ``scheme.grid.times``.

    ``u(t_m) = u(t_{m+1}) + dt F(D^2 u(t_{m+1}), D u(t_{m+1}), u(t_{m+1}), x, t_{m+1})``
    applied over ``substeps`` sub-intervals per output step.
    """
    grid = scheme.grid
    if T is not None and abs(T - grid.t_end) > 1e-12:
        grid = grid.with_times(grid.t_start, T, grid.n_t)
        scheme.grid = grid
    if sys.k != grid.k:
        raise InvalidInputError("grid dimension does not match the system")
    dt_max = cfl_bound(scheme, sys)
    s2, _ = _coef_sup(sys, grid)
    substeps = scheme.substeps or max(1, math.ceil(grid.dt / dt_max * (1 + 1e-12)))
    dt = grid.dt / substeps
    scheme.cfl_ratio = dt * sys.gf.gamma.ceiling * s2 / min(grid.dx) ** 2
    if dt > dt_max * (1 + 1e-12) or scheme.cfl_ratio > CFL_LIMIT + 1e-12:
        raise CFLError(f"time step {dt:.4g} exceeds the stable bound {dt_max:.4g}", dt_max)
    n, N, X = sys.n, grid.n_t, grid.points
    values = np.empty((N + 1, n, *grid.shape))
    values[N] = sys.spec.terminal_field(grid)
    u = values[N].copy()
    coef = None
    if sys.dyn.time_homogeneous:
        coef = (sys.dyn.drift(0.0, X), sys.dyn.hterm(0.0, X), sys.dyn.diffusion(0.0, X))
    for m in range(N - 1, -1, -1):
        for s in range(substeps):
            t = grid.times[m + 1] - s * dt
            r = u.reshape(n, -1)
            new = np.empty_like(u)
            for l in range(n):
                p, A = derivatives(grid, u[l])
                new[l] = u[l] + dt * sys.F_nodes(l, t, X, A, p, r, coef).reshape(grid.shape)
            if not np.all(np.isfinite(new)):
                raise NumericalDomainError(f"non-finite values in the difference sweep near t={t:.6g}")
            u = new
        values[m] = u
    Z = np.empty((N + 1, n, *grid.shape, sys.d))
    for m in range(N + 1):
        sig = coef[2] if coef is not None else sys.dyn.diffusion(grid.times[m], X)
        for l in range(n):
            g = gradient(grid, values[m, l]).reshape(grid.size, grid.k)
            Z[m, l] = np.einsum("pkd,pk->pd", sig, g).reshape(*grid.shape, sys.d)
    meta = {"substeps": substeps, "cfl_ratio": scheme.cfl_ratio, "dt_max": dt_max}
    return ValueField(grid, values, Z, None, meta)


# ------------------------------------------------------------ monotonicity


@dataclass
class MonotonicityReport:
    samples: int
    violations: int
    min_margin: float


def sample_monotonicity(sys: PdeSystem, grid: GridSpec, samples: int = 500, seed: int = 0,
                        box: float = 5.0) -> MonotonicityReport:
    """Check ``F(A) - F(A') >= 1/2 sigma_min^2 tr(sigma^T (A - A') sigma)`` for ``A >= A'``."""
    rng = np.random.default_rng(seed)
    k, n = sys.k, sys.n
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    X = lo + (hi - lo) * rng.uniform(size=(samples, k))
    t = float(rng.uniform(grid.t_start, grid.t_end))
    B = rng.normal(size=(samples, k, k)) * box / 2
    Ap = 0.5 * (B + np.swapaxes(B, 1, 2))
    C = rng.normal(size=(samples, k, k))
    A = Ap + np.einsum("pij,pkj->pik", C, C)
    p = rng.uniform(-box, box, (samples, k))
    r = rng.uniform(-box, box, (n, samples))
    sigma = sys.dyn.diffusion(t, X)
    floor = sys.gf.gamma.floor
    need = 0.5 * floor * np.einsum("pki,pkj,pji->p", sigma, A - Ap, sigma)
    worst, bad = math.inf, 0
    for l in range(n):
        gap = sys.F_nodes(l, t, X, A, p, r) - sys.F_nodes(l, t, X, Ap, p, r)
        margin = gap - need
        bad += int(np.sum(margin < -1e-9 * (1 + np.abs(need))))
        worst = min(worst, float(margin.min()))
    return MonotonicityReport(samples * n, bad, worst)


# ---------------------------------------------------------- consistency probe


@dataclass(frozen=True)
class QuadraticProbe:
    """``psi(t, x) = c + a_t (t - t0) + <p, x - x0> + 1/2 (x - x0)^T A (x - x0)``."""

    t0: float
    x0: tuple[float, ...]
    c: float = 0.0
    a_t: float = 0.0
    p: tuple[float, ...] = ()
    A: tuple[tuple[float, ...], ...] = ()

    def arrays(self, k: int):
        x0 = np.asarray(self.x0, dtype=float).reshape(k)
        p = np.asarray(self.p, dtype=float).reshape(k) if self.p else np.zeros(k)
        A = np.asarray(self.A, dtype=float).reshape(k, k) if self.A else np.zeros((k, k))
        return x0, p, A

    def value(self, t: float, x) -> float:
        x = np.asarray(x, dtype=float)
        x0, p, A = self.arrays(len(x))
        dx = x - x0
        return float(self.c + self.a_t * (t - self.t0) + p @ dx + 0.5 * dx @ A @ dx)


@dataclass
class ConsistencyReport:
    windows: list[float]
    values: list[float]
    instantaneous: float

    @property
    def gaps(self) -> list[float]:
        return [abs(v - self.instantaneous) for v in self.values]

    @property
    def limit(self) -> float:
        """Richardson extrapolation of the last two windows."""
        if len(self.values) < 2:
            return self.values[-1]
        return 2 * self.values[-1] - self.values[-2]


def _field_at(u: ValueField, s: float, x: np.ndarray) -> np.ndarray:
    """Components of ``u`` at ``(s, x)``, linear in time between slices."""
    times = u.times
    j = int(np.clip(np.searchsorted(times, s) - 1, 0, len(times) - 2))
    w = (s - times[j]) / (times[j + 1] - times[j])
    a = interpolate(u.grid, u.values[j], x[None, :])[:, 0]
    b = interpolate(u.grid, u.values[j + 1], x[None, :])[:, 0]
    return (1 - w) * a + w * b


def generator_consistency(
    sys: PdeSystem,
    u: ValueField | None,
    probe: QuadraticProbe,
    l: int = 0,
    h: float = 0.1,
    levels: int = 3,
) -> ConsistencyReport:
    """Integrate ``Y' = -[e(s, x, Y, 0) + 2 G(k(s, x, Y, 0))]`` backward from ``Y(t') = 0``.

    Windows are ``t' - t`` in ``h, h/2, h/4, ...``; each entry of ``values``
    is ``Y(t) / (t' - t)``, to be compared with the instantaneous value
    ``e(t, x, 0, 0) + 2 G(k(t, x, 0, 0))``.  Off-components are read from ``u``.
    """
    k, d, n = sys.k, sys.d, sys.n
    x0, p, A = probe.arrays(k)
    t = probe.t0
    X = x0[None, :]
    if n > 1 and u is None:
        raise InvalidInputError("off-component values are needed when n > 1")

    def rate(s: float, y: float) -> float:
        b, h_, sigma = sys.dyn.drift(s, X), sys.dyn.hterm(s, X), sys.dyn.diffusion(s, X)
        dpsi = p  # the probe is evaluated at x0
        psi = probe.c + probe.a_t * (s - t)
        r = _field_at(u, s, x0) if u is not None else np.zeros(n)
        r = np.array(r, dtype=float)
        r[l] = y + psi
        env = coordinate_env(s, X)
        for j in range(n):
            env[f"y{j + 1}"] = np.array([r[j]])
        z = sigma[0].T @ dpsi
        for i in range(d):
            env[f"z{i + 1}"] = np.array([z[i]])
        e = float(evaluate_array(sys.spec.f[l], env, (1,))[0]) + probe.a_t + float(b[0] @ dpsi)
        kmat = 0.5 * sigma[0].T @ A @ sigma[0]
        if sys.dyn.has_h:
            kmat = kmat + np.einsum("ijk,k->ij", h_[:, :, 0, :], dpsi)
        gm = sys.spec.g[l]
        if gm is not None:
            kmat = kmat + np.array([[float(evaluate_array(gm[i][j], env, (1,))[0]) for j in range(d)]
                                    for i in range(d)])
        out = e + 2.0 * sys.gf(0.5 * (kmat + kmat.T))
        if not math.isfinite(out):
            raise NumericalDomainError(f"non-finite probe rate at s={s:.6g}")
        return out

    windows = [h / 2**i for i in range(levels)]
    values = []
    for w in windows:
        sol = solve_ivp(lambda s, y: [-rate(s, y[0])], (t + w, t), [0.0], rtol=1e-11, atol=1e-13)
        if not sol.success or not np.all(np.isfinite(sol.y)):
            raise NumericalDomainError(f"probe ODE failed on window {w:g}: {sol.message}")
        values.append(float(sol.y[0, -1]) / w)
    return ConsistencyReport(windows, values, float(rate(t, 0.0)))


def comparison_ordered(upper: ValueField, lower: ValueField, tol: float = 0.0) -> bool:
    """True when ``upper >= lower - tol`` everywhere."""
    return bool(np.min(upper.values - lower.values) >= -tol)


def closed_form_error(u: ValueField, exact, times: Sequence[int] | None = None, interior: float = 0.5) -> float:
    """Sup-node error of component 0 against ``exact(t, X)`` on the interior."""
    grid = u.grid
    mask = grid.interior_mask(interior).ravel()
    idx = range(len(u.times)) if times is None else times
    worst = 0.0
    for m in idx:
        ref = exact(u.times[m], grid.points)
        worst = max(worst, float(np.max(np.abs(u.values[m, 0].ravel() - ref)[mask])))
    return worst
