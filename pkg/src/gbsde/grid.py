"""Uniform space-time grids, value fields and multilinear interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, InvalidInputError

MIN_NODES = 8


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid ``prod_i [lower_i, upper_i]`` with ``n_t`` uniform time steps.

    Interpolation is multilinear.  Outside the box, values continue linearly
    with the gradient of the boundary cell; that slope never exceeds the
    field's largest cell slope, so the continuation is Lipschitz-clamped.
    """

    lower: tuple[float, ...] = (-6.0,)
    upper: tuple[float, ...] = (6.0,)
    nodes: tuple[int, ...] = (401,)
    n_t: int = 200
    t_start: float = 0.0
    t_end: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "nodes", tuple(int(v) for v in self.nodes))
        if not (len(self.lower) == len(self.upper) == len(self.nodes)):
            raise ConfigError("grid bounds and node counts must have the same length")
        if any(n < MIN_NODES for n in self.nodes):
            raise ConfigError(f"need at least {MIN_NODES} nodes per dimension, got {self.nodes}")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigError("grid lower bounds must be below upper bounds")
        if self.n_t < 1 or not self.t_end > self.t_start:
            raise ConfigError("need n_t >= 1 and t_end > t_start")

    @property
    def k(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def dx(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_t

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(self.t_start, self.t_end, self.n_t + 1)

    @cached_property
    def points(self) -> np.ndarray:
        """All nodes as an array ``(size, k)`` in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def interior_mask(self, fraction: float = 0.5, reference: "GridSpec | None" = None) -> np.ndarray:
        """Nodes within the central ``fraction`` of ``reference``'s box (default: self)."""
        ref = reference or self
        mask = np.ones(self.size, dtype=bool)
        for i in range(self.k):
            mid = 0.5 * (ref.lower[i] + ref.upper[i])
            half = 0.5 * fraction * (ref.upper[i] - ref.lower[i])
            mask &= np.abs(self.points[:, i] - mid) <= half + 1e-12
        return mask.reshape(self.shape)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return np.all((x >= lo - 1e-12) & (x <= hi + 1e-12), axis=-1)

    def with_times(self, t_start: float, t_end: float, n_t: int) -> "GridSpec":
        return replace(self, t_start=float(t_start), t_end=float(t_end), n_t=int(n_t))

    def refined(self, factor: int = 2, time_factor: int | None = None) -> "GridSpec":
        """Halve ``dx`` (``factor=2``) and divide ``dt`` by ``time_factor``."""
        tf = factor if time_factor is None else time_factor
        nodes = tuple((n - 1) * factor + 1 for n in self.nodes)
        return replace(self, nodes=nodes, n_t=self.n_t * tf)

    def centered_at(self, x0) -> "GridSpec":
        """Same spacing and node count, shifted so that ``x0`` is the middle node."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        half = [0.5 * (hi - lo) for lo, hi in zip(self.lower, self.upper)]
        if any(n % 2 == 0 for n in self.nodes):
            raise ConfigError("centering requires an odd node count")
        return replace(
            self,
            lower=tuple(c - h for c, h in zip(x0, half)),
            upper=tuple(c + h for c, h in zip(x0, half)),
        )

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "nodes": list(self.nodes),
            "n_t": self.n_t,
            "t_start": self.t_start,
            "t_end": self.t_end,
        }


def same_space(a: GridSpec | None, b: GridSpec) -> bool:
    """True when ``a`` is unset or shares ``b``'s spatial nodes."""
    return a is None or (a.lower == b.lower and a.upper == b.upper and a.nodes == b.nodes)


def _cell_coords(grid: GridSpec, points: np.ndarray):
    """Lower cell index and (unclamped) local coordinate per axis."""
    points = np.asarray(points, dtype=float).reshape(-1, grid.k)
    idx = np.empty(points.shape, dtype=np.int64)
    loc = np.empty(points.shape)
    for i, (lo, h, n) in enumerate(zip(grid.lower, grid.dx, grid.nodes)):
        u = (points[:, i] - lo) / h
        j = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
        idx[:, i] = j
        loc[:, i] = u - j
    return idx, loc


def interpolation_matrix(grid: GridSpec, points: np.ndarray) -> sp.csr_matrix:
    """Sparse ``(P, size)`` matrix ``M`` with ``M @ values.ravel() = interp(points)``."""
    idx, loc = _cell_coords(grid, points)
    npts = len(idx)
    rows, cols, vals = [], [], []
    strides = np.array([int(np.prod(grid.nodes[i + 1 :])) for i in range(grid.k)], dtype=np.int64)
    for corner in range(2**grid.k):
        bits = [(corner >> i) & 1 for i in range(grid.k)]
        w = np.ones(npts)
        flat = np.zeros(npts, dtype=np.int64)
        for i, bit in enumerate(bits):
            w = w * (loc[:, i] if bit else 1.0 - loc[:, i])
            flat += (idx[:, i] + bit) * strides[i]
        rows.append(np.arange(npts))
        cols.append(flat)
        vals.append(w)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(npts, grid.size)
    )


def interpolate(grid: GridSpec, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``values`` (shape ``(..., *grid.shape)``) at ``points``.

    Returns an array ``(..., P)``.
    """
    values = np.asarray(values, dtype=float)
    lead = values.shape[: values.ndim - grid.k]
    if values.shape[len(lead) :] != grid.shape:
        raise InvalidInputError(f"field shape {values.shape} does not match grid {grid.shape}")
    flat = values.reshape(*lead, grid.size)
    idx, loc = _cell_coords(grid, points)
    strides = [int(np.prod(grid.nodes[i + 1 :])) for i in range(grid.k)]
    out = 0.0
    for corner in range(2**grid.k):
        w = 1.0
        pos = 0
        for i in range(grid.k):
            bit = (corner >> i) & 1
            w = w * (loc[:, i] if bit else 1.0 - loc[:, i])
            pos = pos + (idx[:, i] + bit) * strides[i]
        out = out + w * flat[..., pos]
    return out


def gradient(grid: GridSpec, values: np.ndarray) -> np.ndarray:
    """Central differences inside, one-sided at the boundary.

    ``values`` has shape ``(..., *grid.shape)``; the result appends an axis of
    length ``k`` holding the partial derivatives.
    """
    lead = values.ndim - grid.k
    parts = np.gradient(values, *grid.dx, axis=tuple(range(lead, values.ndim)))
    if grid.k == 1:
        parts = [parts]
    return np.stack(parts, axis=-1)


def lipschitz_estimate(grid: GridSpec, values: np.ndarray) -> float:
    """Largest absolute cell slope of a field on ``grid``."""
    best = 0.0
    for i, h in enumerate(grid.dx):
        diff = np.abs(np.diff(values, axis=values.ndim - grid.k + i)) / h
        if diff.size:
            best = max(best, float(diff.max()))
    return best


@dataclass
class ValueField:
    """Discrete solution on a space-time grid.

    ``values`` has shape ``(n_t + 1, n, *grid.shape)``; ``Z`` (optional)
    ``(n_t + 1, n, *grid.shape, d)``; ``argmax`` (optional) holds the index of
    the maximizing covariance per node and time.
    """

    grid: GridSpec
    values: np.ndarray
    Z: np.ndarray | None = None
    argmax: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def slice(self, t_index: int) -> np.ndarray:
        return self.values[t_index]

    def time_index(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidInputError(f"t={t} is not a node of the time grid")
        return j

    def at(self, t: float, x) -> np.ndarray:
        """Interpolated values ``(n,)`` at a single point, or ``(n, P)`` for many."""
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1 and x.size == self.grid.k
        out = interpolate(self.grid, self.values[self.time_index(t)], x.reshape(-1, self.grid.k))
        return out[:, 0] if single else out
