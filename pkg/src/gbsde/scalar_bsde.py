"""Backward dynamic programming for scalar G-BSDEs in the Markovian setting.

One step from ``t_{m+1}`` to ``t_m`` at a node ``x``::

    Z(t_m, x) = sigma(t_m, x)^T D_x Y(t_{m+1}, .)(x)
    Y(t_m, x) = max_gamma { E_gamma[Y(t_{m+1}, x + b dt + h_ij gamma_ij dt + sigma dB)]
                            + f(t_m, x, Y*, Z) dt + g_ij(t_m, x, Y*, Z) gamma_ij dt }

where ``dB ~ N(0, gamma dt)`` is integrated by Gauss-Hermite quadrature and the
value between nodes is read by multilinear interpolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InvalidInputError, NumericalDomainError
from .exprdsl import Expr, evaluate_array, is_zero, to_source
from .forward import PathBundle, SdeCoefficients, coordinate_env
from .gcore import QuadratureRule
from .grid import GridSpec, ValueField, gradient, interpolate, interpolation_matrix, same_space

logger = logging.getLogger(__name__)

IMPLICIT_MAX_ITER = 5
IMPLICIT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ScalarGenerator:
    """Drivers ``f`` and ``g_ij`` of one scalar equation.

    The live unknown is the slot ``y{own+1}``.  When ``n > 1`` the other
    slots are read from ``frozen`` (shape ``(n_t + 1, n, *grid.shape)``) at
    the later time ``t_{m+1}`` of each step, interpolated in space.
    """

    f: Expr
    g: tuple[tuple[Expr, ...], ...] | None = None
    own: int = 0
    n: int = 1
    frozen: np.ndarray | None = None
    frozen_grid: GridSpec | None = None
    L_declared: float = 1.0

    def __post_init__(self):
        if self.g is not None:
            d = len(self.g)
            for i in range(d):
                for j in range(d):
                    if self.g[i][j] != self.g[j][i]:
                        raise ConfigError("g_ij must equal g_ji")
            if all(is_zero(e) for row in self.g for e in row):
                object.__setattr__(self, "g", None)

    def frozen_values(self, next_index: int, points: np.ndarray, at_nodes: bool) -> np.ndarray | None:
        if self.n == 1:
            return None
        if self.frozen is None:
            raise InvalidInputError("generator has frozen slots but no frozen field")
        if next_index >= len(self.frozen):
            raise InvalidInputError(f"frozen field is missing time slice {next_index}")
        sl = self.frozen[next_index]
        if at_nodes:
            return sl.reshape(self.n, -1)
        return interpolate(self.frozen_grid, sl, points)

    def env(self, t, X, y, z, frozen_vals) -> dict:
        env = coordinate_env(t, X)
        if frozen_vals is not None:
            for j in range(self.n):
                if j != self.own:
                    env[f"y{j + 1}"] = frozen_vals[j]
        env[f"y{self.own + 1}"] = y
        for i in range(z.shape[1]):
            env[f"z{i + 1}"] = z[:, i]
        return env

    def f_values(self, env, P: int) -> np.ndarray:
        return evaluate_array(self.f, env, (P,))

    def g_contraction(self, env, P: int, gamma: np.ndarray) -> np.ndarray:
        """``sum_ij g_ij gamma_ij`` over ``P`` points for one covariance ``gamma``."""
        if self.g is None:
            return np.zeros(P)
        out = np.zeros(P)
        for i, row in enumerate(self.g):
            for j, e in enumerate(row):
                if gamma[i, j] != 0.0 and not is_zero(e):
                    out = out + gamma[i, j] * evaluate_array(e, env, (P,))
        return out

    def g_matrix(self, env, P: int, d: int) -> np.ndarray:
        out = np.zeros((P, d, d))
        if self.g is not None:
            for i, row in enumerate(self.g):
                for j, e in enumerate(row):
                    out[:, i, j] = evaluate_array(e, env, (P,))
        return out


class OneStepOperators:
    """Cache of the sparse linear maps ``next -> E_gamma[next(X')]`` per covariance.

    Entries are keyed by ``(t, dt)``; for time-homogeneous dynamics the time
    key is dropped so one set of operators serves the whole sweep.
    """

    def __init__(self, dyn: SdeCoefficients, grid: GridSpec, gammas: np.ndarray, rule: QuadratureRule):
        if dyn.k != grid.k:
            raise ConfigError(f"dynamics have k={dyn.k} but the grid has {grid.k} dimensions")
        if rule.dim != dyn.d:
            raise ConfigError("quadrature dimension must equal the Brownian dimension")
        self.dyn, self.grid, self.rule = dyn, grid, rule
        self.gammas = np.asarray(gammas, dtype=float).reshape(-1, dyn.d, dyn.d)
        self._cache: dict = {}

    def coefficients(self, t: float):
        key = ("coef", None if self.dyn.time_homogeneous else t)
        if key not in self._cache:
            X = self.grid.points
            self._cache[key] = (self.dyn.drift(t, X), self.dyn.hterm(t, X), self.dyn.diffusion(t, X))
        return self._cache[key]

    def operators(self, t: float, dt: float) -> list[sp.csr_matrix]:
        key = ("ops", None if self.dyn.time_homogeneous else t, round(dt, 15))
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache = {k: v for k, v in self._cache.items() if k[0] == "coef"}
            self._cache[key] = self._build(t, dt)
        return self._cache[key]

    def _build(self, t: float, dt: float) -> list[sp.csr_matrix]:
        X = self.grid.points
        P, Q = len(X), len(self.rule)
        b, h, sigma = self.coefficients(t)
        avg = sp.kron(sp.identity(P, format="csr"), sp.csr_matrix(self.rule.weights[None, :]), format="csr")
        ops = []
        for gamma in self.gammas:
            centre = X + b * dt
            if self.dyn.has_h:
                centre = centre + np.einsum("ijpk,ij->pk", h, gamma) * dt
            chol = np.linalg.cholesky(gamma * dt)
            shocks = self.rule.points @ chol.T  # (Q, d)
            pts = centre[:, None, :] + np.einsum("pkd,qd->pqk", sigma, shocks)
            ops.append((avg @ interpolation_matrix(self.grid, pts.reshape(P * Q, -1))).tocsr())
        return ops


@dataclass
class StepResult:
    Y: np.ndarray
    Z: np.ndarray
    argmax: np.ndarray


def _locate_bad_node(gen: ScalarGenerator, t, X, y, z, frozen_vals) -> int:
    for i in range(len(X)):
        fv = None if frozen_vals is None else frozen_vals[:, i : i + 1]
        try:
            env = gen.env(t, X[i : i + 1], y[i : i + 1], z[i : i + 1], fv)
            gen.f_values(env, 1)
            gen.g_matrix(env, 1, z.shape[1])
        except NumericalDomainError:
            return i
    return -1


def step_backward(
    next_slice: np.ndarray,
    gen: ScalarGenerator,
    dyn: SdeCoefficients,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    m: int,
    implicit: bool = False,
    ops: OneStepOperators | None = None,
) -> StepResult:
    """Advance one step backward from ``t_{m+1}`` to ``t_m`` on ``grid``.

    ``implicit=True`` resolves the own-slot argument of the drivers by a
    short fixed-point loop instead of using the conditional expectation.
    """
    next_slice = np.asarray(next_slice, dtype=float)
    if next_slice.shape != grid.shape:
        raise InvalidInputError(f"slice shape {next_slice.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(next_slice)):
        raise NumericalDomainError(f"non-finite values in the slice at t={grid.times[m + 1]:.6g}")
    ops = ops or OneStepOperators(dyn, grid, gammas, rule)
    t = float(grid.times[m])
    dt = float(grid.times[m + 1] - grid.times[m])
    X = grid.points
    P = len(X)
    _, _, sigma = ops.coefficients(t)
    grad = gradient(grid, next_slice).reshape(P, grid.k)
    Z = np.einsum("pkd,pk->pd", sigma, grad)
    frozen_vals = gen.frozen_values(m + 1, X, at_nodes=same_space(gen.frozen_grid, grid))
    flat = next_slice.ravel()

    cands = np.empty((len(ops.gammas), P))
    for gi, (gamma, op) in enumerate(zip(ops.gammas, ops.operators(t, dt))):
        expect = op @ flat
        ystar = expect
        try:
            for _ in range(IMPLICIT_MAX_ITER if implicit else 1):
                env = gen.env(t, X, ystar, Z, frozen_vals)
                cand = expect + dt * (gen.f_values(env, P) + gen.g_contraction(env, P, gamma))
                if not implicit or np.max(np.abs(cand - ystar)) < IMPLICIT_TOL:
                    break
                ystar = cand
        except NumericalDomainError as exc:
            node = _locate_bad_node(gen, t, X, ystar, Z, frozen_vals)
            where = X[node].tolist() if node >= 0 else "?"
            raise NumericalDomainError(f"{exc} at node {where}, t={t:.6g}, gamma index {gi}") from exc
        cands[gi] = cand
    best = np.argmax(cands, axis=0)
    Y = cands[best, np.arange(P)]
    if not np.all(np.isfinite(Y)):
        raise NumericalDomainError(f"non-finite values produced at t={t:.6g}")
    return StepResult(Y.reshape(grid.shape), Z.reshape(*grid.shape, -1), best.reshape(grid.shape))


def terminal_values(terminal, grid: GridSpec) -> np.ndarray:
    if isinstance(terminal, Expr):
        env = coordinate_env(grid.t_end, grid.points)
        return evaluate_array(terminal, env, (grid.size,)).reshape(grid.shape).copy()
    arr = np.asarray(terminal, dtype=float)
    if arr.shape != grid.shape:
        raise InvalidInputError(f"terminal field shape {arr.shape} does not match grid {grid.shape}")
    return arr.copy()


@dataclass
class KPaths:
    dK: np.ndarray  # (M, N)
    K: np.ndarray  # (M, N + 1), K[:, 0] = 0
    escaped: np.ndarray  # (M,) paths that left the grid box

    @property
    def terminal(self) -> np.ndarray:
        return self.K[:, -1]


@dataclass
class ScalarSolution:
    grid: GridSpec
    Y: np.ndarray  # (n_t + 1, *shape)
    Z: np.ndarray  # (n_t + 1, *shape, d)
    argmax: np.ndarray  # (n_t + 1, *shape); -1 at the terminal time
    K_paths: KPaths | None = None
    meta: dict = field(default_factory=dict)

    @property
    def field(self) -> ValueField:
        return ValueField(self.grid, self.Y[:, None], self.Z[:, None], self.argmax[:, None])


def check_explicit_step(grid: GridSpec, L: float, implicit: bool) -> None:
    if not implicit and grid.dt * L >= 1.0:
        raise ConfigError(f"explicit scheme needs dt * L < 1 (dt={grid.dt:.4g}, L={L})")


def solve_scalar(
    gen: ScalarGenerator,
    dyn: SdeCoefficients,
    terminal,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    implicit: bool = False,
    ops: OneStepOperators | None = None,
) -> ScalarSolution:
    """Full backward sweep from ``grid.t_end`` to ``grid.t_start``.

    ``terminal`` is an expression of ``x`` or an array on the grid nodes.
    """
    check_explicit_step(grid, gen.L_declared, implicit)
    ops = ops or OneStepOperators(dyn, grid, gammas, rule)
    N = grid.n_t
    Y = np.empty((N + 1, *grid.shape))
    Z = np.empty((N + 1, *grid.shape, dyn.d))
    arg = np.full((N + 1, *grid.shape), -1, dtype=np.int64)
    Y[N] = terminal_values(terminal, grid)
    _, _, sigma = ops.coefficients(grid.t_end)
    Z[N] = np.einsum("pkd,pk->pd", sigma, gradient(grid, Y[N]).reshape(grid.size, grid.k)).reshape(
        *grid.shape, dyn.d
    )
    for m in range(N - 1, -1, -1):
        res = step_backward(Y[m + 1], gen, dyn, grid, gammas, rule, m, implicit, ops)
        Y[m], Z[m], arg[m] = res.Y, res.Z, res.argmax
    return ScalarSolution(grid, Y, Z, arg)


def extract_K_along_paths(
    sol: ScalarSolution | ValueField,
    bundle: PathBundle,
    gen: ScalarGenerator,
    dyn: SdeCoefficients,
    gammas: np.ndarray,
    component: int = 0,
) -> KPaths:
    """Path-wise increments of the non-increasing process K.

    ``dK_m = Y(t_{m+1}, X_{m+1}) - Y(t_m, X_m) + f dt + g_ij gamma_ij dt - <Z(t_m, X_m), dB_m>``
    with ``K_0 = 0``.
    """
    if isinstance(sol, ScalarSolution):
        grid, Yf, Zf = sol.grid, sol.Y, sol.Z
    else:
        grid, Yf, Zf = sol.grid, sol.values[:, component], sol.Z[:, component]
    if len(bundle.times) != grid.n_t + 1 or not np.allclose(bundle.times, grid.times, atol=1e-12):
        raise InvalidInputError("path bundle time grid does not match the solution grid")
    gammas = np.asarray(gammas, dtype=float).reshape(-1, dyn.d, dyn.d)
    M, N = bundle.gamma_choices.shape
    dK = np.empty((M, N))
    Ynow = interpolate(grid, Yf[0], bundle.paths[:, 0])
    for m in range(N):
        t, dt = grid.times[m], grid.times[m + 1] - grid.times[m]
        X, Xn = bundle.paths[:, m], bundle.paths[:, m + 1]
        Ynext = interpolate(grid, Yf[m + 1], Xn)
        Zm = interpolate(grid, np.moveaxis(Zf[m], -1, 0), X).T  # (M, d)
        frozen_vals = gen.frozen_values(m + 1, X, at_nodes=False)
        env = gen.env(t, X, Ynow, Zm, frozen_vals)
        gam = gammas[bundle.gamma_choices[:, m]]
        gterm = np.einsum("mij,mij->m", gen.g_matrix(env, M, dyn.d), gam)
        dK[:, m] = Ynext - Ynow + (gen.f_values(env, M) + gterm) * dt - np.einsum(
            "md,md->m", Zm, bundle.increments[:, m]
        )
        Ynow = Ynext
    K = np.concatenate([np.zeros((M, 1)), np.cumsum(dK, axis=1)], axis=1)
    escaped = ~np.all(grid.contains(bundle.paths.reshape(-1, grid.k)).reshape(M, N + 1), axis=1)
    return KPaths(dK, K, escaped)


# ---------------------------------------------------------------- stability


@dataclass(frozen=True, eq=False)
class ScalarProblem:
    gen: ScalarGenerator
    dyn: SdeCoefficients
    terminal: Expr
    grid: GridSpec
    gammas: np.ndarray
    rule: QuadratureRule

    def solve(self) -> ScalarSolution:
        return solve_scalar(self.gen, self.dyn, self.terminal, self.grid, self.gammas, self.rule)


@dataclass(frozen=True)
class StabilityReport:
    y_distance: float
    terminal_distance: float
    driver_distance: float
    ratio: float


def driver_gap(gen1: ScalarGenerator, gen2: ScalarGenerator, sol2: ScalarSolution, dyn: SdeCoefficients) -> float:
    """``sup |f1 - f2| + sum_ij |g1_ij - g2_ij|`` along the second solution."""
    grid = sol2.grid
    X = grid.points
    P = len(X)
    gap = 0.0
    for m in range(grid.n_t):
        y = sol2.Y[m].ravel()
        z = sol2.Z[m].reshape(P, -1)
        e1 = gen1.env(grid.times[m], X, y, z, gen1.frozen_values(m + 1, X, same_space(gen1.frozen_grid, grid)))
        e2 = gen2.env(grid.times[m], X, y, z, gen2.frozen_values(m + 1, X, same_space(gen2.frozen_grid, grid)))
        h = np.abs(gen1.f_values(e1, P) - gen2.f_values(e2, P))
        h = h + np.abs(gen1.g_matrix(e1, P, dyn.d) - gen2.g_matrix(e2, P, dyn.d)).sum(axis=(1, 2))
        gap = max(gap, float(h.max()))
    return gap


def scalar_stability_check(first: ScalarProblem, second: ScalarProblem, interior: float = 0.5) -> StabilityReport:
    """Distance of the two solutions at ``t_start`` against the data distance.

    Distances are measured on the central ``interior`` fraction of the box,
    away from the artificial boundary.
    """
    if first.grid != second.grid or first.dyn is not second.dyn and first.dyn != second.dyn:
        raise InvalidInputError("stability check needs shared dynamics and grid")
    grid = first.grid
    s1, s2 = first.solve(), second.solve()
    mask = grid.interior_mask(interior)
    y_dist = float(np.max(np.abs(s1.Y[0] - s2.Y[0])[mask]))
    term = float(np.max(np.abs(s1.Y[-1] - s2.Y[-1])))
    drv = driver_gap(first.gen, second.gen, s2, first.dyn)
    bound = term + (grid.t_end - grid.t_start) * drv
    ratio = y_dist / bound if bound > 0 else 0.0
    return StabilityReport(y_dist, term, drv, ratio)


def ratio_variation(ratios: Sequence[float]) -> float:
    """Relative spread ``(max - min) / max`` of a ratio sequence."""
    r = np.asarray(ratios, dtype=float)
    top = r.max()
    return float((top - r.min()) / top) if top > 0 else 0.0


def describe_generator(gen: ScalarGenerator) -> str:
    g = "" if gen.g is None else "; g=" + str([[to_source(e) for e in row] for row in gen.g])
    return f"f={to_source(gen.f)}{g}"
