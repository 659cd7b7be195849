"""Multi-dimensional G-BSDEs with diagonal z-dependence.

Component ``l`` of the system is driven by ``f^l(t, x, y_1..y_n, z^l)`` and
``g^l_ij`` of the same arguments.  Solutions are built by Picard iteration:
all off-components are frozen at the previous iterate, the ``n`` scalar
equations are solved independently, and the sweep repeats until the
sup-norm change falls below ``tol``.  Long horizons are covered by stitching
short intervals whose length is halved whenever the iteration stops
contracting.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractionError, InvalidInputError, StitchError
from .exprdsl import Dims, Expr, add, evaluate_array, is_zero, parse, scale, to_source
from .forward import SdeCoefficients, coordinate_env
from .gcore import QuadratureRule
from .grid import GridSpec, ValueField, gradient, interpolate
from .scalar_bsde import (
    OneStepOperators,
    ScalarGenerator,
    check_explicit_step,
    extract_K_along_paths,
    ratio_variation,
    solve_scalar,
    step_backward,
    terminal_values,
)

logger = logging.getLogger(__name__)

STALL_RATIO = 0.95
HEURISTIC_HL = 0.25

GMatrix = tuple[tuple[Expr, ...], ...]


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """An ``n``-component G-BSDE over Markovian forward dynamics ``dyn``."""

    f: tuple[Expr, ...]
    terminal: tuple[Expr, ...]
    dyn: SdeCoefficients
    g: tuple[GMatrix | None, ...] = ()
    L_declared: float = 1.0
    beta_declared: float = 2.0

    def __post_init__(self):
        n = len(self.f)
        if n < 1 or len(self.terminal) != n:
            raise ConfigError("need one driver and one terminal expression per component")
        if not self.g:
            object.__setattr__(self, "g", (None,) * n)
        if len(self.g) != n:
            raise ConfigError("g needs one (possibly empty) matrix per component")
        if self.beta_declared <= 1:
            raise ConfigError(f"beta must exceed 1, got {self.beta_declared}")
        if self.L_declared <= 0:
            raise ConfigError("L must be positive")
        for l, gm in enumerate(self.g):
            if gm is None:
                continue
            if len(gm) != self.d or any(len(row) != self.d for row in gm):
                raise ConfigError(f"g of component {l + 1} must be {self.d}x{self.d}")
            for i in range(self.d):
                for j in range(self.d):
                    if gm[i][j] != gm[j][i]:
                        raise ConfigError(f"g^{l + 1}_ij must equal g^{l + 1}_ji")
        for e in self.terminal:
            if any(v[0] in "yz" or v == "t" for v in e.variables):
                raise ConfigError(f"terminal '{to_source(e)}' may depend on x only")

    @property
    def n(self) -> int:
        return len(self.f)

    @property
    def k(self) -> int:
        return self.dyn.k

    @property
    def d(self) -> int:
        return self.dyn.d

    @classmethod
    def from_strings(
        cls,
        f: Sequence[str],
        terminal: Sequence[str],
        dyn: SdeCoefficients,
        g: Sequence[Mapping[str, str] | None] | None = None,
        L: float = 1.0,
        beta: float = 2.0,
    ) -> "SystemSpec":
        """Parse drivers with the diagonal-in-z rule enforced per component.

        ``g[l]`` maps ``"i,j"`` (1-based, ``i <= j``) to an expression; the
        mirror entry is filled in and missing entries are zero.
        """
        n, k, d = len(f), dyn.k, dyn.d
        fs, gs = [], []
        for l in range(n):
            dims = Dims(k=k, n=n, d=d, own=l + 1)
            fs.append(parse(f[l], dims))
            entries = (g[l] if g is not None and l < len(g) else None) or {}
            if not entries:
                gs.append(None)
                continue
            zero = parse("0")
            gm = [[zero] * d for _ in range(d)]
            for key, src in entries.items():
                i, j = (int(s) - 1 for s in key.split(","))
                if i > j or not (0 <= i < d and 0 <= j < d):
                    raise ConfigError(f"bad g index {key!r} for d={d} (use i <= j)")
                gm[i][j] = gm[j][i] = parse(src, dims)
            gs.append(tuple(tuple(row) for row in gm))
        tdims = Dims(k=k, allow=frozenset({"x"}))
        return cls(
            f=tuple(fs),
            terminal=tuple(parse(s, tdims) for s in terminal),
            dyn=dyn,
            g=tuple(gs),
            L_declared=float(L),
            beta_declared=float(beta),
        )

    def to_dict(self) -> dict:
        g = []
        for gm in self.g:
            entries = {}
            if gm is not None:
                for i in range(self.d):
                    for j in range(i, self.d):
                        if not is_zero(gm[i][j]):
                            entries[f"{i + 1},{j + 1}"] = to_source(gm[i][j])
            g.append(entries)
        return {
            "f": [to_source(e) for e in self.f],
            "g": g,
            "terminal": [to_source(e) for e in self.terminal],
            "L": self.L_declared,
            "beta": self.beta_declared,
            **self.dyn.to_dict(),
        }

    def terminal_field(self, grid: GridSpec) -> np.ndarray:
        return np.stack([terminal_values(e, grid) for e in self.terminal])


# ------------------------------------------------------------ perturbations


def perturb_terminal(spec: SystemSpec, eps: float) -> SystemSpec:
    return replace(spec, terminal=tuple(add(e, eps) for e in spec.terminal))


def perturb_driver(spec: SystemSpec, eps: float) -> SystemSpec:
    return replace(spec, f=tuple(add(e, eps) for e in spec.f))


def scale_terminal(spec: SystemSpec, lam: float) -> SystemSpec:
    return replace(spec, terminal=tuple(scale(e, lam) for e in spec.terminal))


# ----------------------------------------------------------------- freezing


def frozen_generator(spec: SystemSpec, l: int, U: ValueField | None) -> ScalarGenerator:
    """Scalar generator of component ``l`` with every other y-slot read from ``U``."""
    if not 0 <= l < spec.n:
        raise InvalidInputError(f"component {l} out of range for n={spec.n}")
    if spec.n == 1:
        return ScalarGenerator(spec.f[0], spec.g[0], 0, 1, L_declared=spec.L_declared)
    if U is None:
        raise InvalidInputError("a frozen field is required when n > 1")
    if U.n != spec.n:
        raise InvalidInputError(f"frozen field has {U.n} components, system has {spec.n}")
    return ScalarGenerator(
        spec.f[l], spec.g[l], l, spec.n, frozen=U.values, frozen_grid=U.grid, L_declared=spec.L_declared
    )


# ------------------------------------------------------------------- Picard


@dataclass
class PicardState:
    """Iterate history of one local Picard run."""

    iterate: int = 0
    current: ValueField | None = None
    residuals: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    mbeta: list[float] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    converged: bool = False

    def log(self, interval: int) -> list[dict]:
        out = []
        for i, r in enumerate(self.residuals):
            ratio = self.ratios[i - 1] if i >= 1 else None
            out.append({"interval": interval, "iterate": i + 1, "residual": r, "ratio": ratio})
        return out


@dataclass
class LocalSolution:
    field: ValueField
    state: PicardState


def _mbeta_proxy(diff: np.ndarray, dt: float, beta: float) -> float:
    """``(sum_m dt * max_x |diff_m|^beta)^(1/beta)``, a discrete M^beta stand-in."""
    per_time = np.abs(diff).reshape(len(diff), -1).max(axis=1)
    return float((dt * np.sum(per_time[:-1] ** beta)) ** (1.0 / beta))


def _solve_components(spec, U, terminal, grid, gammas, rule, implicit, ops, threads):
    fieldU = ValueField(grid, U)

    def one(l):
        gen = frozen_generator(spec, l, fieldU)
        return solve_scalar(gen, spec.dyn, terminal[l], grid, gammas, rule, implicit, ops)

    if threads > 1 and spec.n > 1:
        with ThreadPoolExecutor(max_workers=min(threads, spec.n)) as pool:
            return list(pool.map(one, range(spec.n)))
    return [one(l) for l in range(spec.n)]


def picard_solve_local(
    spec: SystemSpec,
    terminal: np.ndarray,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    tol: float = 1e-8,
    max_iter: int = 50,
    implicit: bool = False,
    warm_start: np.ndarray | None = None,
    ops: OneStepOperators | None = None,
    threads: int = 1,
) -> LocalSolution:
    """Picard iteration on ``[grid.t_start, grid.t_end]`` from ``U^(0) = 0``.

    ``terminal`` has shape ``(n, *grid.shape)``.  The residual of iterate
    ``i`` is the sup over all times and nodes of ``|U^(i) - U^(i-1)|``.
    Raises ``ContractionError`` when the residual ratio stays at or above
    0.95 for two consecutive iterates, or when ``max_iter`` is exhausted.
    """
    if tol <= 0 or max_iter < 2:
        raise ConfigError("need tol > 0 and max_iter >= 2")
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (spec.n, *grid.shape):
        raise InvalidInputError(f"terminal field shape {terminal.shape} != {(spec.n, *grid.shape)}")
    check_explicit_step(grid, spec.L_declared, implicit)
    ops = ops or OneStepOperators(spec.dyn, grid, gammas, rule)
    shape = (grid.n_t + 1, spec.n, *grid.shape)
    U = np.zeros(shape) if warm_start is None else np.array(warm_start, dtype=float).reshape(shape)
    Z = np.zeros((*shape, spec.d))
    arg = np.full(shape, -1, dtype=np.int64)
    state = PicardState()
    stalled = 0
    for i in range(1, max_iter + 1):
        sols = _solve_components(spec, U, terminal, grid, gammas, rule, implicit, ops, threads)
        new = np.stack([s.Y for s in sols], axis=1)
        diff = new - U
        r = float(np.max(np.abs(diff)))
        state.residuals.append(r)
        state.mbeta.append(_mbeta_proxy(diff, grid.dt, spec.beta_declared))
        if len(state.residuals) >= 2:
            prev = state.residuals[-2]
            ratio = r / prev if prev > 0 else 0.0
            state.ratios.append(ratio)
            stalled = stalled + 1 if ratio >= STALL_RATIO else 0
        state.diagnostics.append(
            {"iterate": i, "max_abs": [float(np.max(np.abs(s.Y))) for s in sols]}
        )
        U = new
        Z = np.stack([s.Z for s in sols], axis=1)
        arg = np.stack([s.argmax for s in sols], axis=1)
        state.iterate = i
        logger.debug("picard iterate %d residual %.3e", i, r)
        if r < tol:
            state.converged = True
            break
        if stalled >= 2:
            raise ContractionError(
                f"Picard ratios {state.ratios[-2]:.3g}, {state.ratios[-1]:.3g} on "
                f"[{grid.t_start:.6g}, {grid.t_end:.6g}]: interval too long",
                list(state.residuals),
            )
    if not state.converged:
        raise ContractionError(
            f"no convergence to tol={tol:g} in {max_iter} iterates on [{grid.t_start:.6g}, {grid.t_end:.6g}]",
            list(state.residuals),
        )
    state.current = ValueField(grid, U, Z, arg, {"iterates": state.iterate})
    return LocalSolution(state.current, state)


# ---------------------------------------------------------------- stitching


@dataclass
class StitchPlan:
    """Time partition actually used by a stitched solve."""

    breakpoints: list[float]
    halvings: list[dict] = field(default_factory=list)
    picard_log: list[dict] = field(default_factory=list)
    initial_m: int = 1

    @property
    def m(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def h(self) -> list[float]:
        b = self.breakpoints
        return [b[i + 1] - b[i] for i in range(len(b) - 1)]

    @property
    def final_h(self) -> float:
        return max(self.h)

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "initial_m": self.initial_m,
            "breakpoints": self.breakpoints,
            "h": self.h,
            "halvings": self.halvings,
        }


def heuristic_intervals(T: float, L: float) -> int:
    """Smallest ``m`` with ``(T / m) * L <= 0.25``."""
    return max(1, math.ceil(T * L / HEURISTIC_HL - 1e-12))


def stitch_solve_global(
    spec: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    initial_m: int | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    implicit: bool = False,
    warm_start: bool = False,
    threads: int = 1,
) -> tuple[ValueField, StitchPlan]:
    """Solve on ``[grid.t_start, grid.t_end]`` interval by interval, backward.

    Breakpoints sit on time nodes of ``grid``.  An interval whose Picard run
    stops contracting is split in half and retried; an interval of a single
    time step that still fails raises ``StitchError``.
    """
    T = grid.t_end - grid.t_start
    if initial_m is None:
        initial_m = heuristic_intervals(T, spec.L_declared)
    if initial_m < 1:
        raise ConfigError("initial_m must be >= 1")
    N = grid.n_t
    m0 = min(initial_m, N)
    cuts = sorted(set(int(round(v)) for v in np.linspace(0, N, m0 + 1)))
    pending = [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]
    ops = OneStepOperators(spec.dyn, grid, gammas, rule)
    shape = (N + 1, spec.n, *grid.shape)
    Y = np.empty(shape)
    Z = np.empty((*shape, spec.d))
    arg = np.full(shape, -1, dtype=np.int64)
    Y[N] = spec.terminal_field(grid)
    done: list[tuple[int, int]] = []
    plan = StitchPlan([], initial_m=initial_m)
    times = grid.times
    while pending:
        a, b = pending.pop()
        local = grid.with_times(times[a], times[b], b - a)
        start = None
        if warm_start and done:
            start = np.broadcast_to(Y[b], (b - a + 1, *Y[b].shape))
        try:
            sol = picard_solve_local(
                spec, Y[b], local, gammas, rule, tol, max_iter, implicit, start, ops, threads
            )
        except ContractionError as exc:
            if b - a < 2:
                raise StitchError(
                    f"interval [{times[a]:.6g}, {times[b]:.6g}] is a single step and still fails: {exc}"
                ) from exc
            mid = (a + b) // 2
            plan.halvings.append(
                {"interval": [float(times[a]), float(times[b])], "split_at": float(times[mid]),
                 "residuals": exc.history}
            )
            logger.info("halving [%g, %g] at %g", times[a], times[b], times[mid])
            pending.extend([(a, mid), (mid, b)])
            continue
        Y[a : b + 1] = sol.field.values
        Z[a : b + 1] = sol.field.Z
        arg[a:b] = sol.field.argmax[:-1]
        plan.picard_log.extend(sol.state.log(len(done)))
        done.append((a, b))
    plan.breakpoints = sorted({float(times[a]) for a, _ in done} | {float(times[N])})
    out = ValueField(grid, Y, Z, arg, {"plan": plan.to_dict()})
    return out, plan


# ---------------------------------------------------------- direct sweep


def direct_coupled_solve(
    spec: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    implicit: bool = False,
) -> ValueField:
    """One backward sweep advancing all components together.

    Off-component y-slots are read from the already computed slice at
    ``t_{m+1}``, which makes this the fixed point of the Picard map.
    """
    check_explicit_step(grid, spec.L_declared, implicit)
    ops = OneStepOperators(spec.dyn, grid, gammas, rule)
    N = grid.n_t
    shape = (N + 1, spec.n, *grid.shape)
    Y = np.empty(shape)
    Z = np.empty((*shape, spec.d))
    arg = np.full(shape, -1, dtype=np.int64)
    Y[N] = spec.terminal_field(grid)
    live = ValueField(grid, Y)
    gens = [frozen_generator(spec, l, live) for l in range(spec.n)]
    _, _, sigma = ops.coefficients(grid.t_end)
    for l in range(spec.n):
        g = gradient(grid, Y[N, l]).reshape(grid.size, grid.k)
        Z[N, l] = np.einsum("pkd,pk->pd", sigma, g).reshape(*grid.shape, spec.d)
    for m in range(N - 1, -1, -1):
        for l in range(spec.n):
            res = step_backward(Y[m + 1, l], gens[l], spec.dyn, grid, gammas, rule, m, implicit, ops)
            Y[m, l], Z[m, l], arg[m, l] = res.Y, res.Z, res.argmax
    return ValueField(grid, Y, Z, arg)


# --------------------------------------------------------------- comparison


@dataclass
class HypothesisReport:
    samples: int
    driver_violations: int
    g_violations: int
    terminal_violations: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.driver_violations == 0 and self.g_violations == 0 and self.terminal_violations == 0


@dataclass
class ComparisonReport:
    hypotheses: HypothesisReport
    checked: bool
    min_difference: float | None = None
    slack: float | None = None
    difference_at_start: list[float] | None = None

    @property
    def passed(self) -> bool:
        return self.checked and self.min_difference is not None and self.min_difference >= -self.slack

    def to_dict(self) -> dict:
        h = self.hypotheses
        return {
            "hypotheses": {
                "samples": h.samples,
                "driver_violations": h.driver_violations,
                "g_violations": h.g_violations,
                "terminal_violations": h.terminal_violations,
                "passed": h.passed,
            },
            "checked": self.checked,
            "min_difference": self.min_difference,
            "slack": self.slack,
            "passed": self.passed,
        }


def _check_shared(a: SystemSpec, b: SystemSpec) -> None:
    if a.n != b.n or a.k != b.k or a.d != b.d:
        raise InvalidInputError("systems must share n, k and d")
    if a.dyn is not b.dyn and a.dyn != b.dyn:
        raise InvalidInputError("systems must share the forward dynamics")


def sample_quasi_monotone(
    upper: SystemSpec,
    lower: SystemSpec,
    grid: GridSpec,
    samples: int = 1000,
    y_box: float = 10.0,
    z_box: float = 10.0,
    seed: int = 0,
) -> HypothesisReport:
    """Sample the ordering hypotheses of the comparison principle.

    For each component ``l``: with ``y^j >= ybar^j`` off the diagonal and
    ``y^l = ybar^l``, require ``f^l(y) >= fbar^l(ybar)`` and
    ``g^l(y) - gbar^l(ybar)`` positive semidefinite.  Terminal data are
    compared on the grid nodes.
    """
    _check_shared(upper, lower)
    rng = np.random.default_rng(seed)
    n, k, d = upper.n, upper.k, upper.d
    t = rng.uniform(grid.t_start, grid.t_end, samples)
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    X = lo + (hi - lo) * rng.uniform(size=(samples, k))
    drv = gv = 0
    worst = 0.0
    for l in range(n):
        ybar = rng.uniform(-y_box, y_box, (samples, n))
        y = ybar + rng.exponential(1.0, (samples, n)) * (rng.uniform(size=(samples, n)) < 0.8)
        y[:, l] = ybar[:, l]
        z = rng.uniform(-z_box, z_box, (samples, d))
        env_u, env_l = coordinate_env(0.0, X), coordinate_env(0.0, X)
        env_u["t"] = env_l["t"] = t
        for j in range(n):
            env_u[f"y{j + 1}"], env_l[f"y{j + 1}"] = y[:, j], ybar[:, j]
        for i in range(d):
            env_u[f"z{i + 1}"] = env_l[f"z{i + 1}"] = z[:, i]
        gap = evaluate_array(upper.f[l], env_u, (samples,)) - evaluate_array(lower.f[l], env_l, (samples,))
        drv += int(np.sum(gap < -1e-12))
        worst = min(worst, float(gap.min()))
        if upper.g[l] is not None or lower.g[l] is not None:
            def gmat(spec, env):
                out = np.zeros((samples, d, d))
                if spec.g[l] is not None:
                    for i in range(d):
                        for j in range(d):
                            out[:, i, j] = evaluate_array(spec.g[l][i][j], env, (samples,))
                return out

            eig = np.linalg.eigvalsh(gmat(upper, env_u) - gmat(lower, env_l)).min(axis=1)
            gv += int(np.sum(eig < -1e-12))
            worst = min(worst, float(eig.min()))
    tgap = upper.terminal_field(grid) - lower.terminal_field(grid)
    tv = int(np.sum(tgap < -1e-12))
    worst = min(worst, float(tgap.min()))
    return HypothesisReport(samples * n, drv, gv, tv, worst)


def comparison_check(
    upper: SystemSpec,
    lower: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    c_cmp: float = 10.0,
    samples: int = 1000,
    seed: int = 0,
    solver_opts: Mapping | None = None,
) -> ComparisonReport:
    """Sample the hypotheses, then solve both systems and bound ``min(Y - Ybar)``.

    The solve is skipped (``checked=False``) when any hypothesis fails.
    """
    hyp = sample_quasi_monotone(upper, lower, grid, samples, seed=seed)
    if not hyp.passed:
        logger.warning("comparison hypotheses violated; solve skipped")
        return ComparisonReport(hyp, checked=False)
    opts = dict(solver_opts or {})
    Yu, _ = stitch_solve_global(upper, grid, gammas, rule, **opts)
    Yl, _ = stitch_solve_global(lower, grid, gammas, rule, **opts)
    diff = Yu.values - Yl.values
    slack = c_cmp * (grid.dt + max(grid.dx))
    centre = tuple(s // 2 for s in grid.shape)
    at0 = [float(diff[(0, l, *centre)]) for l in range(upper.n)]
    return ComparisonReport(hyp, True, float(diff.min()), slack, at0)


# ---------------------------------------------------------------- stability


@dataclass
class SystemStabilityReport:
    distance: float
    terminal_distance: float
    driver_distance: float

    @property
    def ratio(self) -> float:
        bound = self.terminal_distance + self.driver_distance
        return self.distance / bound if bound > 0 else 0.0


def _driver_distance(a: SystemSpec, b: SystemSpec, field_b: ValueField) -> float:
    """``sup |f_a - f_b| + sum_ij |g_a - g_b|`` along ``field_b``, times ``T``."""
    grid = field_b.grid
    X, P = grid.points, grid.size
    worst = 0.0
    for m in range(grid.n_t):
        env = coordinate_env(grid.times[m], X)
        for j in range(a.n):
            env[f"y{j + 1}"] = field_b.values[m, j].ravel()
        for l in range(a.n):
            envl = dict(env)
            zl = field_b.Z[m, l].reshape(P, -1)
            for i in range(a.d):
                envl[f"z{i + 1}"] = zl[:, i]
            gap = np.abs(evaluate_array(a.f[l], envl, (P,)) - evaluate_array(b.f[l], envl, (P,)))
            for ga, gb in ((a.g[l], b.g[l]),):
                if ga is None and gb is None:
                    continue
                for i in range(a.d):
                    for j in range(a.d):
                        va = evaluate_array(ga[i][j], envl, (P,)) if ga is not None else 0.0
                        vb = evaluate_array(gb[i][j], envl, (P,)) if gb is not None else 0.0
                        gap = gap + np.abs(va - vb)
            worst = max(worst, float(gap.max()))
    return worst * (grid.t_end - grid.t_start)


def system_stability_check(
    first: SystemSpec,
    second: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    interior: float = 0.5,
    solver_opts: Mapping | None = None,
) -> SystemStabilityReport:
    """Sup-node distance at ``t_start`` against terminal and driver distances."""
    _check_shared(first, second)
    opts = dict(solver_opts or {})
    a, _ = stitch_solve_global(first, grid, gammas, rule, **opts)
    b, _ = stitch_solve_global(second, grid, gammas, rule, **opts)
    mask = grid.interior_mask(interior)
    dist = float(np.max(np.abs(a.values[0] - b.values[0])[:, mask]))
    term = float(np.max(np.abs(a.values[-1] - b.values[-1])))
    drv = _driver_distance(first, second, b)
    return SystemStabilityReport(dist, term, drv)


@dataclass
class PerturbationSequence:
    kind: str
    eps: list[float]
    distances: list[float]
    ratios: list[float]
    bound: float

    @property
    def variation(self) -> float:
        return ratio_variation(self.ratios)

    @property
    def bounded(self) -> bool:
        return max(self.ratios) <= self.bound

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eps": self.eps,
            "distances": self.distances,
            "ratios": self.ratios,
            "bound": self.bound,
            "variation": self.variation,
            "bounded": self.bounded,
        }


def perturbation_sequence(
    spec: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    kind: str = "terminal",
    eps: Sequence[float] = (1.0, 0.1, 0.01),
    slack: float = 0.1,
    interior: float = 0.5,
    solver_opts: Mapping | None = None,
) -> PerturbationSequence:
    """Distance ratios under shrinking terminal or driver shifts.

    Terminal ratios are ``distance / eps``, driver ratios ``distance / (eps T)``;
    both are compared with ``exp(L n T) * (1 + slack)``.
    """
    if kind not in ("terminal", "driver"):
        raise ConfigError(f"unknown perturbation kind {kind!r}")
    opts = dict(solver_opts or {})
    T = grid.t_end - grid.t_start
    base, _ = stitch_solve_global(spec, grid, gammas, rule, **opts)
    mask = grid.interior_mask(interior)
    dists, ratios = [], []
    for e in eps:
        other = perturb_terminal(spec, e) if kind == "terminal" else perturb_driver(spec, e)
        sol, _ = stitch_solve_global(other, grid, gammas, rule, **opts)
        dist = float(np.max(np.abs(sol.values[0] - base.values[0])[:, mask]))
        dists.append(dist)
        ratios.append(dist / (e if kind == "terminal" else e * T))
    bound = math.exp(spec.L_declared * spec.n * T) * (1 + slack)
    return PerturbationSequence(kind, [float(e) for e in eps], dists, ratios, bound)


@dataclass
class GrowthReport:
    scales: list[float]
    sup_values: list[float]
    ratios: list[float]

    @property
    def at_most_linear(self) -> bool:
        return all(r <= s * (1 + 1e-6) + 1e-9 for r, s in zip(self.ratios, self.scales))


def growth_check(
    spec: SystemSpec,
    grid: GridSpec,
    gammas: np.ndarray,
    rule: QuadratureRule,
    scales: Sequence[float] = (1.0, 2.0, 4.0),
    interior: float = 0.5,
    solver_opts: Mapping | None = None,
) -> GrowthReport:
    """Scale the terminal data by ``lam`` and compare ``sup|Y|`` with ``lam * sup|Y_1|``."""
    opts = dict(solver_opts or {})
    mask = grid.interior_mask(interior)
    sups = []
    for lam in scales:
        sol, _ = stitch_solve_global(scale_terminal(spec, lam), grid, gammas, rule, **opts)
        sups.append(float(np.max(np.abs(sol.values[0])[:, mask])))
    ref = sups[0] if sups[0] > 0 else 1.0
    ratios = [s / ref for s in sups]
    rel = [float(s / scales[0]) for s in scales]
    return GrowthReport(rel, sups, ratios)


# ------------------------------------------------------------ K per component


def extract_K_system(field_: ValueField, bundle, spec: SystemSpec, gammas: np.ndarray) -> list:
    """Per-component K paths, each using its own ``Z^l``."""
    return [
        extract_K_along_paths(field_, bundle, frozen_generator(spec, l, field_), spec.dyn, gammas, l)
        for l in range(spec.n)
    ]


def value_at(field_: ValueField, t: float, x) -> np.ndarray:
    """Component values ``(n,)`` at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1)
    return interpolate(field_.grid, field_.values[field_.time_index(t)], x)[:, 0]
