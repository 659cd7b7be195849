"""Run configuration: JSON schema, preset materialization and the result envelope."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .errors import ConfigError
from .gcore import QuadratureRule, discretize_gamma
from .grid import GridSpec
from .presets import Problem, build_problem, preset_problem

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR_LIST = {"type": "array", "items": {"type": "string"}}
_G_LIST = {
    "type": "array",
    "items": {"anyOf": [{"type": "null"}, {"type": "object", "additionalProperties": {"type": "string"}}]},
}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": ["string", "null"]},
                "f": _STR_LIST,
                "g": _G_LIST,
                "terminal": _STR_LIST,
                "b": _STR_LIST,
                "sigma": {"type": "array", "items": _STR_LIST},
                "h": {"type": "object", "additionalProperties": _STR_LIST},
                "L": {"type": "number", "exclusiveMinimum": 0},
                "beta": {"type": "number", "exclusiveMinimum": 1},
                "lower": {
                    "anyOf": [
                        {"type": "null"},
                        {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["f", "terminal"],
                            "properties": {"f": _STR_LIST, "g": _G_LIST, "terminal": _STR_LIST},
                        },
                    ]
                },
            },
        },
        "gamma": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["interval", "finite"]},
                "lower": _NUM,
                "upper": _NUM,
                "matrices": {"type": "array"},
                "sigma_min2": {"type": ["number", "null"]},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lower": {"type": "array", "items": _NUM},
                "upper": {"type": "array", "items": _NUM},
                "nodes": {"type": "array", "items": _INT},
                "n_t": {"type": "integer", "minimum": 1},
                "t_start": _NUM,
                "t_end": _NUM,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 2},
                "implicit": {"type": "boolean"},
                "m_initial": {"type": ["integer", "null"], "minimum": 1},
                "quadrature_q": {"type": "integer", "minimum": 2},
                "gamma_m": {"type": "integer", "minimum": 2},
                "warm_start": {"type": "boolean"},
                "c_K": {"type": "number", "exclusiveMinimum": 0},
                "c_cmp": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "dat"]}},
                "probes": {"type": "array", "items": {"type": "array", "items": _NUM}},
                "slice_times": {"type": "array", "items": _NUM},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "paths": {"type": "integer", "minimum": 1},
                "policy": {"type": "string", "pattern": r"^(uniform|fixed:[0-9]+)$"},
                "x0": {"type": "array", "items": _NUM},
                "increment_law": {"enum": ["gaussian", "quadrature"]},
            },
        },
        "checks": {"type": "array", "items": {"type": "string"}},
        "seed": {"type": "integer", "minimum": 0},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)

DEFAULT_SOLVER = {
    "tol": 1e-8,
    "max_iter": 50,
    "implicit": False,
    "m_initial": None,
    "quadrature_q": 7,
    "gamma_m": 9,
    "warm_start": False,
    "c_K": 10.0,
    "c_cmp": 10.0,
}

DEFAULT_GAMMA = {"kind": "interval", "lower": 1.0, "upper": 1.0}

CHECK_NAMES = ("comparison", "stability", "regularity", "contraction", "kmono", "forward-moments")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every default filled in."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict, preset: str | None = None, seed: int | None = None) -> "RunConfig":
        try:
            _VALIDATOR.validate(raw)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        raw = copy.deepcopy(raw)
        problem_in = raw.get("problem", {})
        name = preset or problem_in.get("preset")
        if name:
            base = preset_problem(name)
        else:
            base = {"problem": preset_problem("g-heat")["problem"], "gamma": DEFAULT_GAMMA, "solver": {}}
            base["problem"].update(preset=None, f=[], terminal=[])
        problem = _merge(base["problem"], {k: v for k, v in problem_in.items() if k != "preset"})
        problem["preset"] = name
        if not problem["f"] or not problem["terminal"]:
            raise ConfigError("problem needs 'f' and 'terminal' (or a preset)")
        grid = GridSpec().to_dict()
        grid.update(raw.get("grid", {}))
        k = len(problem["b"])
        if len(grid["nodes"]) != k:
            raise ConfigError(f"grid has {len(grid['nodes'])} dimensions but the dynamics have k={k}")
        outputs = {
            "directory": "out",
            "formats": ["csv", "dat"],
            "probes": [[0.0] * k, [1.0] * k],
            "slice_times": [grid["t_start"], grid["t_end"]],
        }
        outputs.update(raw.get("outputs", {}))
        simulate = {"paths": 1000, "policy": "fixed:0", "x0": [0.0] * k, "increment_law": "quadrature"}
        simulate.update(raw.get("simulate", {}))
        data = {
            "problem": problem,
            "gamma": _merge(base["gamma"], raw.get("gamma", {})),
            "grid": grid,
            "solver": _merge(_merge(DEFAULT_SOLVER, base["solver"]), raw.get("solver", {})),
            "outputs": outputs,
            "simulate": simulate,
            "checks": list(raw.get("checks", [])),
            "seed": int(seed if seed is not None else raw.get("seed", 0)),
        }
        unknown = [c for c in data["checks"] if c not in CHECK_NAMES]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; known: {', '.join(CHECK_NAMES)}")
        _VALIDATOR.validate(data)
        cfg = cls(data)
        cfg.problem()  # parse expressions now so errors surface before any run
        cfg.grid()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, preset: str | None = None, seed: int | None = None) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not raw and preset is None:
            raise ConfigError("give --config or --preset")
        return cls.from_dict(raw, preset, seed)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)

    # -- solver objects

    def problem(self) -> Problem:
        return build_problem(self.data["problem"], self.data["gamma"])

    def grid(self) -> GridSpec:
        g = self.data["grid"]
        return GridSpec(tuple(g["lower"]), tuple(g["upper"]), tuple(g["nodes"]), g["n_t"], g["t_start"], g["t_end"])

    def gammas(self, problem: Problem | None = None):
        problem = problem or self.problem()
        return discretize_gamma(problem.gamma, self.data["solver"]["gamma_m"])

    def rule(self, problem: Problem | None = None) -> QuadratureRule:
        problem = problem or self.problem()
        return QuadratureRule(self.data["solver"]["quadrature_q"], problem.spec.d)

    def solver_opts(self, threads: int = 1) -> dict:
        s = self.data["solver"]
        return {
            "initial_m": s["m_initial"],
            "tol": s["tol"],
            "max_iter": s["max_iter"],
            "implicit": s["implicit"],
            "warm_start": s["warm_start"],
            "threads": threads,
        }


@dataclass
class ResultEnvelope:
    command: str
    config: dict
    version: str
    timings: dict[str, float] = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": self.version,
            "status": self.status,
            "error": self.error,
            "config": self.config,
            "timings": self.timings,
            "files": self.files,
            "diagnostics": self.diagnostics,
            "checks": self.checks,
        }

    def write(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "result.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
