"""Sublinear operator G, volatility uncertainty sets and one-step sup-expectations.

``G(A) = 1/2 * max_{gamma in Gamma} tr(gamma A)`` for a set ``Gamma`` of
covariance matrices bounded below by ``sigma_min^2 * I``.  The one-step
conditional G-expectation of ``v(dB)`` is approximated by the maximum over a
finite discretization of ``Gamma`` of Gauss-Hermite expectations under
``N(0, gamma * dt)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError, NumericalDomainError

MAX_DIM = 2


@dataclass(frozen=True)
class GammaSet:
    """Uncertainty set of covariance matrices.

    Either an interval ``[lower, upper]`` of variances (``d == 1``) or a finite
    list of symmetric positive semidefinite ``d x d`` matrices.
    """

    dim: int = 1
    kind: str = "interval"
    lower: float = 1.0
    upper: float = 1.0
    matrices: tuple[tuple[tuple[float, ...], ...], ...] = ()
    sigma_min2: float | None = None

    def __post_init__(self):
        if self.dim < 1 or self.dim > MAX_DIM:
            raise ConfigError(f"Brownian dimension d={self.dim} unsupported (1 <= d <= {MAX_DIM})")
        if self.kind == "interval":
            if self.dim != 1:
                raise ConfigError("interval uncertainty sets require d = 1")
            if not (0.0 < self.lower <= self.upper):
                raise ConfigError(f"need 0 < lower <= upper, got [{self.lower}, {self.upper}]")
        elif self.kind == "finite":
            if not self.matrices:
                raise ConfigError("finite uncertainty set is empty")
            mats = self.as_array()
            if mats.shape[1:] != (self.dim, self.dim):
                raise ConfigError(f"matrices must be {self.dim}x{self.dim}")
            if not np.allclose(mats, np.swapaxes(mats, 1, 2)):
                raise ConfigError("uncertainty matrices must be symmetric")
            floor = self.sigma_min2 if self.sigma_min2 is not None else self.min_eigenvalue
            if floor <= 0:
                raise ConfigError("uncertainty set is degenerate (sigma_min^2 must be > 0)")
            if self.min_eigenvalue < floor - 1e-12:
                raise ConfigError(f"a matrix violates gamma >= {floor} * I")
        else:
            raise ConfigError(f"unknown uncertainty set kind {self.kind!r}")

    @classmethod
    def interval(cls, lower: float, upper: float) -> "GammaSet":
        return cls(dim=1, kind="interval", lower=float(lower), upper=float(upper))

    @classmethod
    def finite(cls, matrices: Sequence, sigma_min2: float | None = None) -> "GammaSet":
        mats = np.asarray(matrices, dtype=float)
        if mats.ndim == 1:
            mats = mats[:, None, None]
        tup = tuple(tuple(tuple(float(v) for v in row) for row in m) for m in mats)
        return cls(dim=mats.shape[1], kind="finite", matrices=tup, sigma_min2=sigma_min2)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.matrices, dtype=float)

    @property
    def min_eigenvalue(self) -> float:
        if self.kind == "interval":
            return self.lower
        return float(min(np.linalg.eigvalsh(m).min() for m in self.as_array()))

    @property
    def floor(self) -> float:
        """The non-degeneracy constant sigma_min^2."""
        if self.kind == "interval":
            return self.lower
        return self.sigma_min2 if self.sigma_min2 is not None else self.min_eigenvalue

    @property
    def ceiling(self) -> float:
        """Largest variance in any direction (sigma_bar^2)."""
        if self.kind == "interval":
            return self.upper
        return float(max(np.linalg.eigvalsh(m).max() for m in self.as_array()))

    def to_dict(self) -> dict:
        if self.kind == "interval":
            return {"kind": "interval", "lower": self.lower, "upper": self.upper}
        out = {"kind": "finite", "matrices": [[list(r) for r in m] for m in self.matrices]}
        if self.sigma_min2 is not None:
            out["sigma_min2"] = self.sigma_min2
        return out


def discretize_gamma(gamma: GammaSet, m: int = 9) -> np.ndarray:
    """Finite family of covariance matrices, shape ``(count, d, d)``.

    Interval sets give ``m`` equally spaced variances including both ends;
    a degenerate interval collapses to a single matrix.  Finite sets pass
    through unchanged.
    """
    if gamma.kind == "finite":
        return gamma.as_array()
    if m < 2:
        raise ConfigError(f"interval discretization needs m >= 2, got {m}")
    if gamma.lower == gamma.upper:
        return np.array([[[gamma.lower]]])
    return np.linspace(gamma.lower, gamma.upper, m)[:, None, None]


@dataclass(frozen=True)
class GFunction:
    gamma: GammaSet

    def __call__(self, A) -> float:
        return eval_G(self, A)

    def batch(self, A: np.ndarray, gammas: np.ndarray | None = None) -> np.ndarray:
        """G applied to a stack of matrices ``(..., d, d)``."""
        A = np.asarray(A, dtype=float)
        if self.gamma.kind == "interval" and gammas is None:
            a = A[..., 0, 0]
            return 0.5 * (self.gamma.upper * np.maximum(a, 0.0) - self.gamma.lower * np.maximum(-a, 0.0))
        mats = self.gamma.as_array() if gammas is None else np.asarray(gammas)
        traces = np.einsum("gij,...ji->...g", mats, A)
        return 0.5 * traces.max(axis=-1)


def eval_G(gf: GFunction, A) -> float:
    """``G(A) = 1/2 max_gamma tr(gamma A)`` for a symmetric ``d x d`` matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = gf.gamma.dim
    if A.shape != (d, d):
        raise InvalidInputError(f"expected a {d}x{d} matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise InvalidInputError("G is defined on symmetric matrices only")
    if gf.gamma.kind == "interval":
        a = A[0, 0]
        return 0.5 * (gf.gamma.upper * max(a, 0.0) - gf.gamma.lower * max(-a, 0.0))
    mats = gf.gamma.as_array()
    if len(mats) == 0:
        raise ConfigError("empty uncertainty set")
    return float(0.5 * np.max(np.einsum("gij,ji->g", mats, A)))


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss-Hermite rule for the standard normal law on R^d."""

    nodes_per_dim: int = 7
    dim: int = 1
    points: np.ndarray = field(init=False, repr=False, compare=False)
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.nodes_per_dim < 2:
            raise ConfigError("quadrature needs at least 2 nodes per dimension")
        x, w = np.polynomial.hermite_e.hermegauss(self.nodes_per_dim)
        w = w / w.sum()
        grids = np.meshgrid(*[x] * self.dim, indexing="ij")
        wgrids = np.meshgrid(*[w] * self.dim, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class OneStepMeasure:
    """Increment law ``dB ~ N(0, gamma dt)`` realized on quadrature nodes."""

    gamma: np.ndarray
    dt: float
    rule: QuadratureRule

    @cached_property
    def increments(self) -> np.ndarray:
        chol = np.linalg.cholesky(np.atleast_2d(self.gamma) * self.dt)
        return self.rule.points @ chol.T

    def expectation(self, values: np.ndarray) -> float:
        return float(self.rule.weights @ values)

    def covariance(self) -> np.ndarray:
        inc = self.increments
        return np.einsum("q,qi,qj->ij", self.rule.weights, inc, inc)


def one_step_sup_expectation(
    v: Callable[[np.ndarray], np.ndarray],
    dt: float,
    rule: QuadratureRule,
    gammas: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Max over ``gammas`` of the quadrature expectation of ``v(dB)``.

    ``v`` receives the increments as an array ``(Q, d)`` and returns ``(Q,)``
    values.  Ties go to the smallest index.  Returns ``(value, argmax_gamma)``.
    """
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    gammas = np.asarray(gammas, dtype=float).reshape(-1, rule.dim, rule.dim)
    if len(gammas) == 0:
        raise ConfigError("empty uncertainty set")
    values = np.empty(len(gammas))
    for g, gamma in enumerate(gammas):
        measure = OneStepMeasure(gamma, dt, rule)
        vals = np.asarray(v(measure.increments), dtype=float).reshape(len(rule))
        bad = ~np.isfinite(vals)
        if bad.any():
            node = measure.increments[np.argmax(bad)]
            raise NumericalDomainError(f"non-finite integrand at increment {node.tolist()} (gamma index {g})")
        values[g] = measure.expectation(vals)
    best = int(np.argmax(values))
    return float(values[best]), gammas[best]
