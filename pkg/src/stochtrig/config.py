"""YAML run configuration.

A config has up to five sections; only ``model`` is required::

    model:
      kind: matrices        # or "datacenter" (then only `seed` is read)
      state_dim: 1
      sensor_dims: [1]
      A: [[0.5]]
      C: [[1.0]]            # stacked sensor rows, s x n
      Q: [[1.0]]
      R: [[1.0]]
      Sigma0: [[1.3333]]    # optional, defaults to the stationary covariance
    trigger:
      Y: [[[1.2857]]]       # one square block per sensor, or
      uniform_rate: 0.5     # every sensor at this communication rate
      eps: 1.0e-8
    design:
      delta: 0.8            # scalar for delta * I, or an n x n matrix
      delta_grid: [0.5, 1.0]
    experiment:
      seed: 0
      trials: 1000
      horizon: 500
      burn_in: 100
      rates: [0.1, 0.5, 0.9]
      schedules: [random, uniform, optimized]
      workers: 1
      oracle_steps: 3
      oracle_points: 2001
    output:
      dir: out

Matrices are row-major nested lists with dimensions checked against
``state_dim`` and ``sensor_dims``. Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .model import ModelError, SystemModel, stationary_stats, validate
from .numerics import solve_lyapunov
from .scenario import generate_datacenter_scenario
from .sim import DEFAULT_BURN_IN, DEFAULT_HORIZON, DEFAULT_RATES, SCHEDULE_KINDS
from .trigger import DEFAULT_EPS, TriggerDesign, uniform_rate_design


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names the key and line."""


SECTIONS = {
    "model": {"kind", "state_dim", "sensor_dims", "A", "C", "Q", "R", "Sigma0", "seed"},
    "trigger": {"Y", "uniform_rate", "eps"},
    "design": {"delta", "delta_grid"},
    "experiment": {"seed", "trials", "horizon", "burn_in", "rates", "schedules", "workers",
                   "oracle_steps", "oracle_points"},
    "output": {"dir"},
}


@dataclass(frozen=True)
class ExperimentSpec:
    seed: int = 0
    trials: int = 1000
    horizon: int = DEFAULT_HORIZON
    burn_in: int = DEFAULT_BURN_IN
    rates: tuple = DEFAULT_RATES
    schedules: tuple = SCHEDULE_KINDS
    workers: int = 1
    oracle_steps: int = 3
    oracle_points: int = 2001


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    model: SystemModel
    model_label: str
    trigger: dict | None = None
    design: dict | None = None
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)
    output_dir: str = "out"

    def sha256(self) -> str:
        """Hash of the effective configuration (after command-line overrides)."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def trigger_design(self) -> TriggerDesign:
        if self.trigger is None:
            raise ConfigError("this command needs a `trigger` section")
        eps = float(self.trigger.get("eps", DEFAULT_EPS))
        if "Y" in self.trigger:
            design = TriggerDesign(tuple(self.trigger["Y"]), eps=eps)
            try:
                design.check_model(self.model)
            except ValueError as exc:
                raise ConfigError(f"trigger.Y: {exc}") from exc
            return design
        return uniform_rate_design(stationary_stats(self.model), self.trigger["uniform_rate"], eps=eps)

    def delta_matrix(self) -> np.ndarray:
        if self.design is None or "delta" not in self.design:
            raise ConfigError("this command needs `design.delta`")
        d = self.design["delta"]
        return d * np.eye(self.model.n) if np.ndim(d) == 0 else d


# -- line-aware loading -----------------------------------------------------------

class _Lines:
    """Maps key paths to 1-based source lines for error messages."""

    def __init__(self, node):
        self.lines = {}
        self._walk(node, ())

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def where(self, path) -> str:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return f" (line {self.lines[path]})" if path in self.lines else ""


def _err(lines: _Lines, path, msg: str) -> ConfigError:
    name = ".".join(str(p) for p in path)
    return ConfigError(f"{name}: {msg}{lines.where(path)}")


def _matrix(lines, path, value, shape) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise _err(lines, path, "expected a nested list of numbers") from None
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise _err(lines, path, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise _err(lines, path, "entries must be finite")
    return arr


def _number(lines, path, value, kind=float, low=None, high=None, low_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _err(lines, path, f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise _err(lines, path, f"expected an integer, got {value!r}")
    value = kind(value)
    if low is not None and (value < low or (low_open and value == low)):
        raise _err(lines, path, f"must be {'>' if low_open else '>='} {low}")
    if high is not None and value > high:
        raise _err(lines, path, f"must be <= {high}")
    return value


def _check_keys(lines, path, section, allowed):
    if not isinstance(section, dict):
        raise _err(lines, path, "expected a mapping")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise _err(lines, path + (unknown[0],), f"unknown key {unknown[0]!r}; allowed: {sorted(allowed)}")


def _model(lines, spec):
    path = ("model",)
    kind = spec.get("kind", "matrices")
    if kind == "datacenter":
        extra = sorted(set(spec) - {"kind", "seed"})
        if extra:
            raise _err(lines, path + (extra[0],), "datacenter models only accept `seed`")
        seed = _number(lines, path + ("seed",), spec.get("seed", 0), int, low=0)
        sc = generate_datacenter_scenario(seed)
        return sc.model, sc.label
    if kind != "matrices":
        raise _err(lines, path + ("kind",), f"unknown model kind {kind!r}; use 'matrices' or 'datacenter'")
    for key in ("state_dim", "sensor_dims", "A", "C", "Q", "R"):
        if key not in spec:
            raise _err(lines, path, f"missing required key {key!r}")
    n = _number(lines, path + ("state_dim",), spec["state_dim"], int, low=1)
    dims = spec["sensor_dims"]
    if not isinstance(dims, list) or not dims:
        raise _err(lines, path + ("sensor_dims",), "expected a non-empty list of positive integers")
    dims = [_number(lines, path + ("sensor_dims", i), d, int, low=1) for i, d in enumerate(dims)]
    s = sum(dims)
    A = _matrix(lines, path + ("A",), spec["A"], (n, n))
    C = _matrix(lines, path + ("C",), spec["C"], (s, n))
    Q = _matrix(lines, path + ("Q",), spec["Q"], (n, n))
    R = _matrix(lines, path + ("R",), spec["R"], (s, s))
    if "Sigma0" in spec:
        Sigma0 = _matrix(lines, path + ("Sigma0",), spec["Sigma0"], (n, n))
    else:
        try:
            Sigma0 = solve_lyapunov(A, Q)
        except ValueError as exc:
            # no stationary covariance: report the model's own violations
            probe = SystemModel(A=A, sensor_blocks=(C,), Q=Q, R=R, Sigma0=np.eye(n))
            raise ModelError(validate(probe).reasons or [str(exc)]) from exc
    offsets = np.cumsum([0] + dims)
    blocks = tuple(C[offsets[i]:offsets[i + 1]] for i in range(len(dims)))
    return SystemModel(A=A, sensor_blocks=blocks, Q=Q, R=R, Sigma0=Sigma0), "model"


def _trigger(lines, spec, model):
    path = ("trigger",)
    if ("Y" in spec) == ("uniform_rate" in spec):
        raise _err(lines, path, "give exactly one of `Y` or `uniform_rate`")
    out = {}
    if "eps" in spec:
        out["eps"] = _number(lines, path + ("eps",), spec["eps"], low=0.0, low_open=True)
    if "Y" in spec:
        Ys = spec["Y"]
        if not isinstance(Ys, list) or len(Ys) != model.m:
            raise _err(lines, path + ("Y",), f"expected a list of {model.m} blocks")
        out["Y"] = [_matrix(lines, path + ("Y", i), Y, (d, d)) for i, (Y, d) in enumerate(zip(Ys, model.sensor_dims))]
    else:
        out["uniform_rate"] = _number(lines, path + ("uniform_rate",), spec["uniform_rate"], low=0.0, high=1.0)
        if out["uniform_rate"] >= 1.0:
            raise _err(lines, path + ("uniform_rate",), "must be below 1")
    return out


def _design(lines, spec, model):
    path = ("design",)
    out = {}
    if "delta" in spec:
        d = spec["delta"]
        if isinstance(d, (int, float)) and not isinstance(d, bool):
            out["delta"] = _number(lines, path + ("delta",), d, low=0.0, low_open=True)
        else:
            out["delta"] = _matrix(lines, path + ("delta",), d, (model.n, model.n))
    if "delta_grid" in spec:
        grid = spec["delta_grid"]
        if not isinstance(grid, list) or not grid:
            raise _err(lines, path + ("delta_grid",), "expected a non-empty list of positive numbers")
        out["delta_grid"] = [_number(lines, path + ("delta_grid", i), g, low=0.0, low_open=True)
                             for i, g in enumerate(grid)]
    return out


def _experiment(lines, spec):
    path = ("experiment",)
    kw = {}
    for key, low in (("seed", 0), ("trials", 2), ("horizon", 1), ("burn_in", 0), ("workers", 1),
                     ("oracle_steps", 1), ("oracle_points", 3)):
        if key in spec:
            kw[key] = _number(lines, path + (key,), spec[key], int, low=low)
    if "rates" in spec:
        rates = spec["rates"]
        if not isinstance(rates, list) or not rates:
            raise _err(lines, path + ("rates",), "expected a non-empty list of rates in (0, 1]")
        kw["rates"] = tuple(_number(lines, path + ("rates", i), r, low=0.0, high=1.0, low_open=True)
                            for i, r in enumerate(rates))
    if "schedules" in spec:
        sch = spec["schedules"]
        if not isinstance(sch, list) or not sch or any(s not in SCHEDULE_KINDS for s in sch):
            raise _err(lines, path + ("schedules",), f"expected a list drawn from {list(SCHEDULE_KINDS)}")
        kw["schedules"] = tuple(sch)
    exp = ExperimentSpec(**kw)
    if exp.burn_in >= exp.horizon:
        raise _err(lines, path + ("burn_in",), "must be smaller than horizon")
    return exp


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse YAML text into validated domain objects.

    ``overrides`` maps ``experiment`` keys (``seed``, ``trials``,
    ``horizon``) to command-line values.
    """
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from None
    if node is None or not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with at least a `model` section")
    lines = _Lines(node)
    _check_keys(lines, (), raw, set(SECTIONS))
    for name, section in raw.items():
        _check_keys(lines, (name,), section, SECTIONS[name])
    if "model" not in raw:
        raise ConfigError("missing required section `model`")
    raw = json.loads(json.dumps(raw))  # plain copy
    for key, value in (overrides or {}).items():
        if value is not None:
            raw.setdefault("experiment", {})[key] = value
    model, label = _model(lines, raw["model"])
    trigger = _trigger(lines, raw["trigger"], model) if "trigger" in raw else None
    design = _design(lines, raw["design"], model) if "design" in raw else None
    experiment = _experiment(lines, raw.get("experiment", {}))
    out_dir = raw.get("output", {}).get("dir", "out")
    if not isinstance(out_dir, str):
        raise _err(lines, ("output", "dir"), "expected a path string")
    return RunConfig(raw=raw, model=model, model_label=label, trigger=trigger, design=design,
                     experiment=experiment, output_dir=out_dir)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)
