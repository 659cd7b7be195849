"""Euler-Maruyama simulation of the forward G-SDE under volatility scenarios.

    dX = b(t, X) dt + h_ij(t, X) d<B^i, B^j> + sigma(t, X) dB

Under a scenario that picks the covariance ``gamma`` on a step, the quadratic
covariation increment is ``gamma_ij * dt`` and ``dB ~ N(0, gamma * dt)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, NumericalDomainError
from .exprdsl import Dims, Expr, evaluate_array, is_zero, parse
from .gcore import QuadratureRule

BLOCK = 256


def coordinate_env(t: float, X: np.ndarray) -> dict[str, float | np.ndarray]:
    env: dict[str, float | np.ndarray] = {"t": t}
    for i in range(X.shape[1]):
        env[f"x{i + 1}"] = X[:, i]
    return env


@dataclass(frozen=True)
class SdeCoefficients:
    """Forward coefficients ``b`` (k), ``h_ij`` (d x d x k) and ``sigma`` (k x d)."""

    k: int
    d: int
    b: tuple[Expr, ...]
    h: tuple[tuple[tuple[Expr, ...], ...], ...]
    sigma: tuple[tuple[Expr, ...], ...]
    L_declared: float = 1.0

    def __post_init__(self):
        if len(self.b) != self.k or len(self.sigma) != self.k:
            raise ConfigError("b and sigma need one entry per state dimension")
        if any(len(row) != self.d for row in self.sigma):
            raise ConfigError("sigma rows need one entry per Brownian dimension")
        for i in range(self.d):
            for j in range(self.d):
                if self.h[i][j] != self.h[j][i]:
                    raise ConfigError("h_ij must equal h_ji")
        for e in self.all_exprs():
            if any(v[0] in "yz" for v in e.variables):
                raise ConfigError(f"forward coefficient '{e}' may depend on t and x only")

    @classmethod
    def from_strings(
        cls,
        b: Sequence[str],
        sigma: Sequence[Sequence[str]],
        h: Mapping[str, Sequence[str]] | None = None,
        L: float = 1.0,
    ) -> "SdeCoefficients":
        """Build from expression strings.

        ``h`` maps ``"i,j"`` (1-based, ``i <= j``) to ``k`` expressions; the
        mirror ``h_ji`` is filled in and missing entries are zero.
        """
        k, d = len(b), len(sigma[0])
        dims = Dims(k=k, allow=frozenset({"t", "x"}))
        zero = parse("0")
        hm = [[tuple([zero] * k) for _ in range(d)] for _ in range(d)]
        for key, exprs in (h or {}).items():
            i, j = (int(s) - 1 for s in key.split(","))
            if i > j:
                raise ConfigError(f"give h entries with i <= j only, got {key!r}")
            if not (0 <= i < d and 0 <= j < d) or len(exprs) != k:
                raise ConfigError(f"h[{key}] needs {k} expressions within d={d}")
            parsed = tuple(parse(s, dims) for s in exprs)
            hm[i][j] = hm[j][i] = parsed
        return cls(
            k=k,
            d=d,
            b=tuple(parse(s, dims) for s in b),
            h=tuple(tuple(row) for row in hm),
            sigma=tuple(tuple(parse(s, dims) for s in row) for row in sigma),
            L_declared=float(L),
        )

    def all_exprs(self) -> list[Expr]:
        out = list(self.b)
        out += [e for row in self.sigma for e in row]
        out += [e for row in self.h for cell in row for e in cell]
        return out

    @property
    def time_homogeneous(self) -> bool:
        return all("t" not in e.variables for e in self.all_exprs())

    @property
    def has_h(self) -> bool:
        return not all(is_zero(e) for row in self.h for cell in row for e in cell)

    def drift(self, t: float, X: np.ndarray) -> np.ndarray:
        env = coordinate_env(t, X)
        return np.stack([evaluate_array(e, env, (len(X),)) for e in self.b], axis=1)

    def hterm(self, t: float, X: np.ndarray) -> np.ndarray:
        """``h_ij(t, X)`` as an array ``(d, d, P, k)``."""
        env = coordinate_env(t, X)
        P = len(X)
        return np.array(
            [[[evaluate_array(e, env, (P,)) for e in cell] for cell in row] for row in self.h]
        ).transpose(0, 1, 3, 2)

    def diffusion(self, t: float, X: np.ndarray) -> np.ndarray:
        """``sigma(t, X)`` as an array ``(P, k, d)``."""
        env = coordinate_env(t, X)
        P = len(X)
        return np.array([[evaluate_array(e, env, (P,)) for e in row] for row in self.sigma]).transpose(
            2, 0, 1
        )

    def to_dict(self) -> dict:
        h = {}
        for i in range(self.d):
            for j in range(i, self.d):
                if not all(is_zero(e) for e in self.h[i][j]):
                    h[f"{i + 1},{j + 1}"] = [str(e) for e in self.h[i][j]]
        return {
            "b": [str(e) for e in self.b],
            "sigma": [[str(e) for e in row] for row in self.sigma],
            "h": h,
        }


@dataclass(frozen=True)
class ScenarioPolicy:
    """How a path picks its covariance index on each step.

    ``kind`` is ``"fixed"`` (always ``index``), ``"uniform"`` (uniform over
    the discretized set) or ``"callback"`` (``callback(t, X) -> indices``).
    """

    kind: str = "fixed"
    index: int = 0
    callback: Callable[[float, np.ndarray], np.ndarray] | None = None

    @classmethod
    def fixed(cls, index: int) -> "ScenarioPolicy":
        return cls("fixed", index=index)

    @classmethod
    def uniform(cls) -> "ScenarioPolicy":
        return cls("uniform")

    def choose(self, t: float, X: np.ndarray, u: np.ndarray, count: int) -> np.ndarray:
        if self.kind == "fixed":
            idx = np.full(len(X), self.index, dtype=np.int64)
        elif self.kind == "uniform":
            idx = np.minimum((u * count).astype(np.int64), count - 1)
        elif self.kind == "callback" and self.callback is not None:
            idx = np.asarray(self.callback(t, X), dtype=np.int64).reshape(len(X))
        else:
            raise ConfigError(f"unknown scenario policy {self.kind!r}")
        if np.any((idx < 0) | (idx >= count)):
            raise InvalidInputError(f"scenario index outside 0..{count - 1}")
        return idx

    def describe(self) -> str:
        return f"fixed:{self.index}" if self.kind == "fixed" else self.kind


@dataclass
class PathBundle:
    """Simulated paths with everything needed to replay them."""

    times: np.ndarray
    paths: np.ndarray  # (M, N + 1, k)
    increments: np.ndarray  # (M, N, d)
    gamma_choices: np.ndarray  # (M, N)
    seed: int
    policy: str = "fixed:0"
    increment_law: str = "gaussian"
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.paths.shape[0]


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, block], dtype=np.uint64)))


def _initial_states(eta, M: int, k: int, seed: int) -> np.ndarray:
    if callable(eta):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 2**63], dtype=np.uint64)))
        X0 = np.asarray(eta(M, rng), dtype=float)
    else:
        X0 = np.asarray(eta, dtype=float)
    return np.broadcast_to(X0.reshape(-1, k) if X0.ndim else X0.reshape(1, 1), (M, k)).copy()


def euler_step(
    coeffs: SdeCoefficients, t: float, dt: float, X: np.ndarray, gamma: np.ndarray, dB: np.ndarray
) -> np.ndarray:
    """One Euler step; ``gamma`` is ``(M, d, d)`` and ``dB`` is ``(M, d)``."""
    out = X + coeffs.drift(t, X) * dt
    if coeffs.has_h:
        out = out + np.einsum("ijmk,mij->mk", coeffs.hterm(t, X), gamma) * dt
    return out + np.einsum("mkd,md->mk", coeffs.diffusion(t, X), dB)


def simulate_paths(
    coeffs: SdeCoefficients,
    times: Sequence[float],
    eta,
    gammas: np.ndarray,
    policy: ScenarioPolicy,
    M: int,
    seed: int = 0,
    increment_law: str = "gaussian",
    rule: QuadratureRule | None = None,
) -> PathBundle:
    """Simulate ``M`` Euler-Maruyama paths starting at ``times[0]`` from ``eta``.

    ``increment_law="quadrature"`` draws each standardized increment from the
    nodes of ``rule`` with probabilities equal to its weights, i.e. the same
    one-step law the backward solver integrates against.  Random numbers come
    from a Philox stream keyed by ``(seed, block of 256 paths)``, so a bundle
    is reproducible regardless of how blocks are scheduled.
    """
    times = np.asarray(times, dtype=float)
    if M < 1:
        raise InvalidInputError("need at least one path")
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise InvalidInputError("time grid must be strictly increasing")
    gammas = np.asarray(gammas, dtype=float).reshape(-1, coeffs.d, coeffs.d)
    if increment_law not in ("gaussian", "quadrature"):
        raise ConfigError(f"unknown increment law {increment_law!r}")
    if increment_law == "quadrature":
        rule = rule or QuadratureRule(7, coeffs.d)
        cum = np.cumsum(rule.weights)
    N, k, d = len(times) - 1, coeffs.k, coeffs.d
    chols = np.array([np.linalg.cholesky(g) for g in gammas])

    xi = np.empty((M, N, d))
    u_gamma = np.empty((M, N))
    for start in range(0, M, BLOCK):
        stop = min(start + BLOCK, M)
        rng = _block_rng(seed, start // BLOCK)
        normals = rng.standard_normal((BLOCK, N, d))[: stop - start]
        ug = rng.random((BLOCK, N))[: stop - start]
        uq = rng.random((BLOCK, N))[: stop - start]
        if increment_law == "quadrature":
            nodes = np.minimum(np.searchsorted(cum, uq * cum[-1], side="right"), len(cum) - 1)
            xi[start:stop] = rule.points[nodes]
        else:
            xi[start:stop] = normals
        u_gamma[start:stop] = ug

    paths = np.empty((M, N + 1, k))
    paths[:, 0] = _initial_states(eta, M, k, seed)
    increments = np.empty((M, N, d))
    choices = np.empty((M, N), dtype=np.int64)
    for m in range(N):
        t, dt = times[m], times[m + 1] - times[m]
        X = paths[:, m]
        idx = policy.choose(t, X, u_gamma[:, m], len(gammas))
        choices[:, m] = idx
        dB = np.einsum("mij,mj->mi", chols[idx], xi[:, m]) * np.sqrt(dt)
        increments[:, m] = dB
        try:
            paths[:, m + 1] = euler_step(coeffs, t, dt, X, gammas[idx], dB)
        except NumericalDomainError as exc:
            bad = _first_bad_path(coeffs, t, dt, X, gammas[idx], dB)
            raise NumericalDomainError(f"path {bad} at t={t:.6g}: {exc}") from exc
        if not np.all(np.isfinite(paths[:, m + 1])):
            bad = int(np.argmax(~np.all(np.isfinite(paths[:, m + 1]), axis=1)))
            raise NumericalDomainError(f"path {bad} left the finite range at t={times[m + 1]:.6g}")
    return PathBundle(
        times=times,
        paths=paths,
        increments=increments,
        gamma_choices=choices,
        seed=seed,
        policy=policy.describe(),
        increment_law=increment_law,
    )


def _first_bad_path(coeffs, t, dt, X, gamma, dB) -> int:
    for i in range(len(X)):
        try:
            euler_step(coeffs, t, dt, X[i : i + 1], gamma[i : i + 1], dB[i : i + 1])
        except NumericalDomainError:
            return i
    return -1


def replay_recursion(bundle: PathBundle, coeffs: SdeCoefficients, gammas: np.ndarray) -> np.ndarray:
    """Recompute the paths from the stored increments and scenario choices."""
    gammas = np.asarray(gammas, dtype=float).reshape(-1, coeffs.d, coeffs.d)
    out = np.empty_like(bundle.paths)
    out[:, 0] = bundle.paths[:, 0]
    for m in range(len(bundle.times) - 1):
        t, dt = bundle.times[m], bundle.times[m + 1] - bundle.times[m]
        out[:, m + 1] = euler_step(
            coeffs, t, dt, out[:, m], gammas[bundle.gamma_choices[:, m]], bundle.increments[:, m]
        )
    return out


def write_paths_csv(bundle: PathBundle, path: str | Path) -> Path:
    """Columns: scenario_id, step, time, x_1..x_k, gamma_index."""
    path = Path(path)
    M, Np1, k = bundle.paths.shape
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "step", "time", *[f"x_{i + 1}" for i in range(k)], "gamma_index"])
        for s in range(M):
            for m in range(Np1):
                g = int(bundle.gamma_choices[s, m]) if m < Np1 - 1 else ""
                w.writerow([s, m, repr(float(bundle.times[m])), *[repr(float(v)) for v in bundle.paths[s, m]], g])
    return path


# ------------------------------------------------------------ moment checks


def _policies(count: int) -> list[ScenarioPolicy]:
    fixed = sorted({0, count - 1})
    return [ScenarioPolicy.fixed(i) for i in fixed] + [ScenarioPolicy.uniform()]


def _sup_moment(paths: np.ndarray, ref: np.ndarray, p: float) -> float:
    dev = np.linalg.norm(paths - ref, axis=-1)
    return float(np.mean(dev.max(axis=1) ** p))


@dataclass(frozen=True)
class LipschitzMoment:
    lhs: float
    ratio: float
    per_policy: dict


def moment_check_initial_lipschitz(
    coeffs: SdeCoefficients,
    times: Sequence[float],
    eta,
    eta_prime,
    p: float,
    gammas: np.ndarray,
    M: int = 2000,
    seed: int = 0,
) -> LipschitzMoment:
    """Worst-case over sampled policies of ``E[sup_s |X^eta - X^eta'|^p]``.

    Both bundles share the seed, hence the same increments and scenario
    choices.  ``ratio`` divides by ``|eta - eta'|^p``.
    """
    if p < 2:
        raise InvalidInputError("moment checks need p >= 2")
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    eta_prime = np.atleast_1d(np.asarray(eta_prime, dtype=float))
    per_policy = {}
    for policy in _policies(len(gammas)):
        a = simulate_paths(coeffs, times, eta, gammas, policy, M, seed)
        b = simulate_paths(coeffs, times, eta_prime, gammas, policy, M, seed)
        per_policy[policy.describe()] = _sup_moment(a.paths, b.paths, p)
    lhs = max(per_policy.values())
    return LipschitzMoment(lhs, lhs / float(np.linalg.norm(eta - eta_prime)) ** p, per_policy)


def lipschitz_moment_bound(coeffs: SdeCoefficients, times: Sequence[float], gammas: np.ndarray) -> float:
    """Gronwall and Doob constant for ``p = 2``: ``4 exp((2 L + gamma_max L^2) T)``.

    ``L`` is the declared Lipschitz constant of the coefficients and
    ``gamma_max`` the largest eigenvalue in the covariance set.
    """
    L = coeffs.L_declared
    gmax = float(max(np.linalg.eigvalsh(np.atleast_2d(g)).max() for g in gammas))
    T = float(times[-1] - times[0])
    return 4.0 * math.exp((2.0 * L + gmax * L * L) * T)


def initial_lipschitz_sequence(
    coeffs: SdeCoefficients,
    times: Sequence[float],
    eta,
    direction,
    p: float,
    gammas: np.ndarray,
    scales: Sequence[float] = (1.0, 0.1, 0.01),
    M: int = 2000,
    seed: int = 0,
) -> tuple[list[float], bool]:
    """Ratios along ``eta' = eta + scale * direction``.

    Bounded when every ratio stays under ``lipschitz_moment_bound`` (only
    defined for ``p = 2``; other exponents just require finite ratios).
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    ratios = [
        moment_check_initial_lipschitz(coeffs, times, eta, eta + s * direction, p, gammas, M, seed).ratio
        for s in scales
    ]
    bound = lipschitz_moment_bound(coeffs, times, gammas) if p == 2 else math.inf
    return ratios, bool(np.all(np.isfinite(ratios)) and max(ratios) <= bound)


def time_increment_moments(
    coeffs: SdeCoefficients,
    t: float,
    windows: Sequence[float],
    eta,
    p: float,
    gammas: np.ndarray,
    M: int = 4000,
    seed: int = 0,
    steps: int = 40,
) -> np.ndarray:
    """``max_policy E[sup_{t <= s <= t + w} |X_s - eta|^p]`` for each window ``w``."""
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    out = []
    for w in windows:
        times = np.linspace(t, t + w, steps + 1)
        vals = [
            _sup_moment(simulate_paths(coeffs, times, eta, gammas, pol, M, seed).paths, eta, p)
            for pol in _policies(len(gammas))
        ]
        out.append(max(vals))
    return np.array(out)


def moment_check_time_increment(
    coeffs: SdeCoefficients,
    t: float,
    windows: Sequence[float],
    eta,
    p: float,
    gammas: np.ndarray,
    M: int = 4000,
    seed: int = 0,
    steps: int = 40,
) -> float:
    """Fitted slope of log sup-moment against log window length.

    The Holder-type bound holds when the slope is at least ``p / 2 - 0.15``.
    """
    if len(windows) < 4:
        raise InvalidInputError("need at least 4 window lengths")
    if any(w <= 0 for w in windows):
        raise InvalidInputError("window lengths must be positive (t < t')")
    vals = time_increment_moments(coeffs, t, windows, eta, p, gammas, M, seed, steps)
    slope, _ = np.polyfit(np.log(windows), np.log(vals), 1)
    return float(slope)


def growth_profile(
    coeffs: SdeCoefficients,
    times: Sequence[float],
    etas: Sequence,
    p: float,
    gammas: np.ndarray,
    M: int = 2000,
    seed: int = 0,
) -> np.ndarray:
    """``max_policy E[sup_s |X_s|^p] / (1 + |eta|^p)`` for each starting point."""
    out = []
    for eta in etas:
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        vals = [
            _sup_moment(simulate_paths(coeffs, times, eta, gammas, pol, M, seed).paths, 0.0, p)
            for pol in _policies(len(gammas))
        ]
        out.append(max(vals) / (1.0 + float(np.linalg.norm(eta)) ** p))
    return np.array(out)
