"""Named problem definitions.

Each preset is plain data (expression strings and numbers) so that a run
configuration can embed it inline; ``build_problem`` turns the data into
solver objects.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .forward import SdeCoefficients
from .gcore import GammaSet
from .grid import GridSpec
from .picard import SystemSpec

SIGMA_BAR = 2.0

_BASE = {
    "b": ["0"],
    "sigma": [["1"]],
    "h": {},
    "g": [],
    "L": 1.0,
    "beta": 2.0,
    "lower": None,
}

PRESETS: dict[str, dict] = {
    "g-heat": {
        "problem": {"f": ["0"], "terminal": ["x1^2"]},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "g-heat-concave": {
        "problem": {"f": ["0"], "terminal": ["-x1^2"]},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "abs-terminal": {
        "problem": {"f": ["0"], "terminal": ["abs(x1)"]},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "coupled-linear": {
        "problem": {"f": ["y2", "y1"], "terminal": ["x1", "x1"], "L": 1.0},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "decoupled-pair": {
        "problem": {"f": ["-0.5*y1", "0.25*abs(z1) + 0.1"], "terminal": ["sin(x1)", "abs(x1)"], "L": 1.0},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "comparison-pair": {
        "problem": {
            "f": ["0.5*y2 + 0.2*abs(z1) + 0.1", "0.5*y1"],
            "terminal": ["abs(x1)", "x1"],
            "L": 1.0,
            "lower": {"f": ["0.5*y2 + 0.2*abs(z1)", "0.5*y1"], "g": [], "terminal": ["abs(x1) - 0.2", "x1"]},
        },
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
    },
    "classical-singleton": {
        "problem": {"f": ["0"], "terminal": ["x1^2"]},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 1.0},
    },
    "strong-coupling": {
        "problem": {"f": ["5*y2", "5*y1"], "terminal": ["x1", "x1"], "L": 5.0},
        "gamma": {"kind": "interval", "lower": 1.0, "upper": 4.0},
        "solver": {"m_initial": 1},
    },
}


def _closed_forms():
    return {
        "g-heat": lambda t, X, T: X[:, 0] ** 2 + 4.0 * (T - t),
        "g-heat-concave": lambda t, X, T: -X[:, 0] ** 2 - 1.0 * (T - t),
        "classical-singleton": lambda t, X, T: X[:, 0] ** 2 + (T - t),
        "coupled-linear": lambda t, X, T: X[:, 0] * math.exp(T - t),
        "strong-coupling": lambda t, X, T: X[:, 0] * math.exp(5.0 * (T - t)),
    }


def abs_terminal_value(tau: float, sigma_bar: float = SIGMA_BAR) -> float:
    """``u(T - tau, 0)`` for terminal ``|x|``: ``sigma_bar * sqrt(2 tau / pi)``."""
    return sigma_bar * math.sqrt(2.0 * tau / math.pi)


def preset_names() -> list[str]:
    return sorted(PRESETS)


def preset_problem(name: str) -> dict:
    """Fully materialized problem/gamma/solver sections of a preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}")
    raw = copy.deepcopy(PRESETS[name])
    problem = {**copy.deepcopy(_BASE), **raw["problem"]}
    problem["preset"] = name
    return {"problem": problem, "gamma": raw["gamma"], "solver": raw.get("solver", {})}


@dataclass(frozen=True, eq=False)
class Problem:
    name: str | None
    spec: SystemSpec
    gamma: GammaSet
    lower: SystemSpec | None = None

    def exact(self, t: float, X: np.ndarray, T: float) -> np.ndarray | None:
        fn = _closed_forms().get(self.name or "")
        return None if fn is None else fn(t, np.atleast_2d(X), T)


def gamma_from_dict(data: dict) -> GammaSet:
    kind = data.get("kind", "interval")
    if kind == "interval":
        return GammaSet.interval(data["lower"], data["upper"])
    if kind == "finite":
        return GammaSet.finite(data["matrices"], data.get("sigma_min2"))
    raise ConfigError(f"unknown gamma kind {kind!r}")


def build_problem(problem: dict, gamma: dict) -> Problem:
    """Solver objects from a materialized problem section."""
    dyn = SdeCoefficients.from_strings(problem["b"], problem["sigma"], problem.get("h") or {}, problem["L"])
    spec = SystemSpec.from_strings(
        problem["f"], problem["terminal"], dyn, problem.get("g") or None, problem["L"], problem["beta"]
    )
    lower = None
    if problem.get("lower"):
        lo = problem["lower"]
        lower = SystemSpec.from_strings(
            lo["f"], lo["terminal"], dyn, lo.get("g") or None, problem["L"], problem["beta"]
        )
    return Problem(problem.get("preset"), spec, gamma_from_dict(gamma), lower)


def load_preset(name: str) -> Problem:
    data = preset_problem(name)
    return build_problem(data["problem"], data["gamma"])


def default_grid() -> GridSpec:
    return GridSpec()
