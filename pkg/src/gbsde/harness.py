"""Cross-checks on the value function ``u(t, x) = Y_t^{t,x}``.

* ``cross_validate``: probabilistic solver against the difference scheme over
  a sequence of refinements.
* ``regularity_report``: spatial Lipschitz ratios and a temporal exponent fit.
* ``markov_consistency``: restarting the solver at ``(s, X_s)`` reproduces the
  field value read along simulated paths.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import GBSDEError, InvalidInputError
from .forward import PathBundle, ScenarioPolicy, simulate_paths
from .gcore import GammaSet, GFunction, QuadratureRule, discretize_gamma
from .grid import GridSpec, ValueField, interpolate
from .pde_oracle import FdScheme, assemble_F, fd_solve
from .picard import SystemSpec, extract_K_system, stitch_solve_global

logger = logging.getLogger(__name__)


@dataclass
class CrossValReport:
    problem: str
    levels: list[dict]
    distances: list[float]
    order: float | None
    monotone: bool
    threshold: float | None = None
    min_order: float | None = None

    @property
    def passed(self) -> bool:
        ok = self.monotone
        if self.threshold is not None:
            ok = ok and self.distances[-1] < self.threshold
        if self.min_order is not None:
            ok = ok and self.order is not None and self.order >= self.min_order
        return ok

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def table(self) -> list[dict]:
        """Rows ``level, dx, dt, sup_distance, fitted_order``."""
        return [
            {"level": i, "dx": lv["dx"], "dt": lv["dt"], "sup_distance": d, "fitted_order": self.order}
            for i, (lv, d) in enumerate(zip(self.levels, self.distances))
        ]


def fitted_order(steps: Sequence[float], errors: Sequence[float]) -> float | None:
    """Slope of ``log(error)`` against ``log(step)``."""
    s, e = np.asarray(steps, dtype=float), np.asarray(errors, dtype=float)
    if len(s) < 2 or np.any(e <= 0):
        return None
    return float(np.polyfit(np.log(s), np.log(e), 1)[0])


def refinement_levels(base: GridSpec, count: int = 3, space: int = 4, time: int = 2) -> list[GridSpec]:
    """``count`` grids ending at ``base``; each level divides ``dx`` by ``space`` and ``dt`` by ``time``.

    The default ``space=4, time=2`` shrinks ``dx^2 / dt`` eightfold per level,
    which dominates the level-to-level jitter of the interpolation bias.
    """
    levels = [base]
    for _ in range(count - 1):
        g = levels[0]
        if any((n - 1) % space for n in g.nodes) or g.n_t % time:
            raise InvalidInputError(f"cannot coarsen {g.nodes} / n_t={g.n_t} by ({space}, {time})")
        levels.insert(0, GridSpec(g.lower, g.upper, tuple((n - 1) // space + 1 for n in g.nodes),
                                  g.n_t // time, g.t_start, g.t_end))
    return levels


def cross_validate(
    spec: SystemSpec,
    gamma: GammaSet,
    levels: Sequence[GridSpec],
    T: float | None = None,
    name: str = "",
    q: int = 7,
    gamma_m: int = 9,
    threshold: float | None = None,
    min_order: float | None = 0.5,
    solver_opts: dict | None = None,
) -> CrossValReport:
    """Sup distance between the two solvers on the interior half of the coarsest box.

    The distance is the maximum over all time slices; the order is the
    log-log slope of the distances against ``dt``.
    """
    if len(levels) < 2:
        raise InvalidInputError("cross-validation needs at least two levels")
    levels = list(levels)
    if T is not None:
        levels = [g.with_times(g.t_end - T, g.t_end, g.n_t) for g in levels]
    for a, b in zip(levels, levels[1:]):
        if not (min(b.dx) < min(a.dx) and b.dt <= a.dt):
            raise InvalidInputError("levels must strictly refine")
    gammas = discretize_gamma(gamma, gamma_m)
    rule = QuadratureRule(q, spec.d)
    sys = assemble_F(GFunction(gamma), spec.dyn, spec)
    coarse = levels[0]
    dists, info = [], []
    for i, grid in enumerate(levels):
        try:
            prob, _ = stitch_solve_global(spec, grid, gammas, rule, **(solver_opts or {}))
            fd = fd_solve(sys, FdScheme(grid))
        except GBSDEError as exc:
            raise type(exc)(f"level {i} ({grid.nodes}, n_t={grid.n_t}): {exc}") from exc
        mask = grid.interior_mask(0.5, reference=coarse)
        gap = np.abs(prob.values - fd.values)[:, :, mask]
        dists.append(float(gap.max()))
        info.append({"nodes": list(grid.nodes), "n_t": grid.n_t, "dx": max(grid.dx), "dt": grid.dt,
                     "fd_substeps": fd.meta["substeps"]})
        logger.info("level %d distance %.4e", i, dists[-1])
    order = fitted_order([lv["dt"] for lv in info], dists)
    monotone = all(b < a for a, b in zip(dists, dists[1:]))
    return CrossValReport(name, info, dists, order, monotone, threshold, min_order)


# --------------------------------------------------------------- regularity


@dataclass
class RegularityReport:
    lipschitz: list[float]
    lipschitz_variation: float | None
    taus: list[float]
    increments: list[float]
    exponent: float | None
    constant_field: bool = False
    flags: list[str] = field(default_factory=list)

    @property
    def lipschitz_stable(self) -> bool:
        return self.lipschitz_variation is None or self.lipschitz_variation <= 0.2

    def to_dict(self) -> dict:
        return {**asdict(self), "lipschitz_stable": self.lipschitz_stable}


def interior_lipschitz(u: ValueField, t_index: int = 0, component: int = 0, interior: float = 0.5,
                       reference: GridSpec | None = None) -> float:
    """Largest ``|u(x') - u(x)| / |x' - x|`` over adjacent nodes inside the interior window."""
    grid = u.grid
    vals = u.values[t_index, component]
    mask = grid.interior_mask(interior, reference)
    best = 0.0
    for ax, h in enumerate(grid.dx):
        diff = np.abs(np.diff(vals, axis=ax)) / h
        both = np.take(mask, range(grid.shape[ax] - 1), axis=ax) & np.take(mask, range(1, grid.shape[ax]), axis=ax)
        if np.any(both):
            best = max(best, float(diff[both].max()))
    return best


def temporal_increments(u: ValueField, component: int = 0, interior: float = 0.5, count: int = 5):
    """``max_x |u(T - tau, x) - u(T, x)| / (1 + |x|)`` for ``tau = T/2, T/4, ...``."""
    grid = u.grid
    N = grid.n_t
    mask = grid.interior_mask(interior).ravel()
    norm = 1.0 + np.linalg.norm(grid.points, axis=1)
    last = u.values[N, component].ravel()
    taus, incs = [], []
    for j in range(1, count + 1):
        steps = int(round(N / 2**j))
        if steps < 1:
            break
        cur = u.values[N - steps, component].ravel()
        taus.append(float(grid.times[N] - grid.times[N - steps]))
        incs.append(float(np.max((np.abs(cur - last) / norm)[mask])))
    return taus, incs


def regularity_report(fields: ValueField | Sequence[ValueField], component: int = 0,
                      interior: float = 0.5) -> RegularityReport:
    """Spatial Lipschitz ratios at ``t_start`` per field and a temporal fit on the first field.

    Pass several fields (successive refinements) to measure the Lipschitz
    variation ``(max - min) / max`` across them.
    """
    fields = [fields] if isinstance(fields, ValueField) else list(fields)
    u = fields[0]
    if len(u.times) < 3:
        raise InvalidInputError("regularity needs at least three time slices")
    ref = fields[0].grid
    lips = [interior_lipschitz(f, 0, component, interior, ref) for f in fields]
    var = None
    if len(lips) > 1 and max(lips) > 0:
        var = (max(lips) - min(lips)) / max(lips)
    taus, incs = temporal_increments(u, component, interior)
    flags = []
    vals = u.values[:, component]
    # quadrature weights sum to one only up to rounding
    constant = float(np.ptp(vals)) <= 1e-12 * max(1.0, float(np.max(np.abs(vals))))
    exponent = None
    if constant:
        flags.append("constant field")
    else:
        exponent = fitted_order(taus, incs)
        if exponent is None:
            flags.append("zero temporal increments")
    return RegularityReport(lips, var, taus, incs, exponent, constant, flags)


# --------------------------------------------------------------- Markov flow


@dataclass
class MarkovReport:
    samples: list[dict]
    escaped: int
    total: int
    max_discrepancy: float
    tolerance: float

    @property
    def escape_fraction(self) -> float:
        return self.escaped / self.total if self.total else 0.0

    @property
    def domain_too_small(self) -> bool:
        return self.escape_fraction > 0.05

    @property
    def passed(self) -> bool:
        return not self.domain_too_small and self.max_discrepancy < 2 * self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "escape_fraction": self.escape_fraction,
                "domain_too_small": self.domain_too_small, "passed": self.passed}


def markov_consistency(
    spec: SystemSpec,
    gamma: GammaSet,
    grid: GridSpec,
    bundle: PathBundle,
    s_indices: Sequence[int],
    per_time: int = 5,
    q: int = 7,
    gamma_m: int = 9,
    field_: ValueField | None = None,
    c_tol: float = 1.0,
    solver_opts: dict | None = None,
) -> MarkovReport:
    """Compare ``u(s, X_s)`` from the field with a fresh solve centred at ``X_s``.

    ``s_indices`` are time-node indices shared by ``grid`` and the bundle.
    The restarted grid keeps the spacing of ``grid`` and covers ``[s, T]``.
    The tolerance is ``c_tol * (dt + dx^2)`` scaled by ``max(1, sup|u|)`` at
    the sampled points.
    """
    if len(bundle.times) != grid.n_t + 1 or not np.allclose(bundle.times, grid.times):
        raise InvalidInputError("bundle and grid must share the time nodes")
    gammas = discretize_gamma(gamma, gamma_m)
    rule = QuadratureRule(q, spec.d)
    opts = solver_opts or {}
    if field_ is None:
        field_, _ = stitch_solve_global(spec, grid, gammas, rule, **opts)
    escaped = ~np.all(grid.contains(bundle.paths.reshape(-1, grid.k)).reshape(bundle.M, -1), axis=1)
    inside = np.flatnonzero(~escaped)
    samples, worst, scale = [], 0.0, 1.0
    for s_idx in s_indices:
        for path in inside[:per_time]:
            x = bundle.paths[path, s_idx]
            from_field = interpolate(grid, field_.values[s_idx], x[None, :])[:, 0]
            steps = grid.n_t - s_idx
            local = grid.centered_at(x)
            centre = tuple(n // 2 for n in local.shape)
            if steps == 0:
                restart = spec.terminal_field(local)[(slice(None), *centre)]
            else:
                local = local.with_times(grid.times[s_idx], grid.t_end, steps)
                sol, _ = stitch_solve_global(spec, local, gammas, rule, **opts)
                restart = sol.values[(0, slice(None), *centre)]
            gap = float(np.max(np.abs(restart - from_field)))
            worst = max(worst, gap)
            scale = max(scale, float(np.max(np.abs(restart))))
            samples.append({"s": float(grid.times[s_idx]), "path": int(path), "x": x.tolist(),
                            "field": from_field.tolist(), "restart": np.asarray(restart).tolist(),
                            "discrepancy": gap})
    tol = c_tol * (grid.dt + max(grid.dx) ** 2) * scale
    return MarkovReport(samples, int(escaped.sum()), bundle.M, worst, tol)


def abs_profile_errors(u: ValueField, exact, t_values: Sequence[float], component: int = 0) -> list[float]:
    """Relative errors of ``u(t, 0)`` against ``exact(T - t)``."""
    out = []
    zero = np.zeros((1, u.grid.k))
    for t in t_values:
        v = interpolate(u.grid, u.values[u.time_index(t), component], zero)[0]
        ref = exact(u.grid.t_end - t)
        out.append(float(abs(v - ref) / ref) if ref else math.inf)
    return out


# -------------------------------------------------------------- K monotone


@dataclass
class KPolicyStats:
    policy: str
    gamma: float | list
    exceedances: int
    max_increment: float
    mean_terminal: float
    std_terminal: float
    escaped: int


@dataclass
class KReport:
    threshold: float
    policies: list[KPolicyStats]

    @property
    def passed(self) -> bool:
        return all(p.exceedances == 0 for p in self.policies)

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "passed": self.passed, "policies": [asdict(p) for p in self.policies]}


def k_monotonicity(
    spec: SystemSpec,
    gammas: np.ndarray,
    field_: ValueField,
    x0,
    M: int = 1000,
    seed: int = 0,
    c_K: float = 10.0,
    increment_law: str = "quadrature",
    rule: QuadratureRule | None = None,
    indices: Sequence[int] | None = None,
) -> KReport:
    """Simulate paths under each fixed covariance and count K-increments above ``c_K (dt + dx)``.

    ``mean_terminal`` is the path average of ``K_T`` (the expectation under
    that scenario); component 0 is used for ``n = 1`` and every component
    otherwise.
    """
    grid = field_.grid
    thr = c_K * (grid.dt + max(grid.dx))
    rule = rule or QuadratureRule(7, spec.d)
    out = []
    for i in indices if indices is not None else range(len(gammas)):
        bundle = simulate_paths(spec.dyn, grid.times, x0, gammas, ScenarioPolicy.fixed(i), M, seed,
                                increment_law, rule)
        for kp in extract_K_system(field_, bundle, spec, gammas):
            g = gammas[i]
            out.append(KPolicyStats(
                f"fixed:{i}",
                float(g[0, 0]) if g.shape == (1, 1) else g.tolist(),
                int(np.sum(kp.dK > thr)),
                float(kp.dK.max()),
                float(kp.terminal.mean()),
                float(kp.terminal.std()),
                int(kp.escaped.sum()),
            ))
    return KReport(thr, out)
