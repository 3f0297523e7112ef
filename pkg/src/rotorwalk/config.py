"""Experiment configuration: a single JSON document plus command-line overrides.

Environment shapes accepted under ``"environment"``::

    {"tree": "regular", "d": 3, "rotor": "uniform"}
    {"tree": "regular", "d": 2, "r": [0, 0.5, 0.5]}
    {"tree": "galton-watson", "offspring": {"1": 0.5, "2": 0.5}, "Q": "uniform"}
    {"tree": "galton-watson", "offspring": {"1": 0.5, "2": 0.5},
     "Q": {"1": [0.5, 0.5], "2": [0.2, 0.3, 0.5]}}

Errors are raised as :class:`ConfigError` naming the offending field, or the
line and column for malformed JSON.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Union

from .distributions import OffspringLaw, RotorLaw, RotorMatrix
from .engine import DEFAULT_NODE_BUDGET, GaltonWatson, Regular
from .errors import ConfigError, InvalidLaw

EnvSpec = Union[Regular, GaltonWatson]

DEFAULT_ENVIRONMENT = {"tree": "regular", "d": 3, "rotor": "uniform"}

# fields that change where or how fast results are produced, never what they are
NON_SEMANTIC = ("out", "threads")


@dataclass
class ContourSpec:
    k: int = 4
    L: int = 8
    empirical: bool = False
    replicas: int = 10_000
    step_cap: int = 1 << 40


@dataclass
class SweepSpec:
    families: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    p_grid: list = field(default_factory=lambda: [round(0.1 * i, 10) for i in range(11)])
    replicas: int = 16
    n_steps: int = 1_000_000


@dataclass
class ExperimentConfig:
    environment: dict = field(default_factory=lambda: dict(DEFAULT_ENVIRONMENT))
    walk: str = "rotor"
    n_steps: int = 1_000_000
    replicas: int = 20
    seed: int = 2024
    sample_stride: Optional[int] = None
    mode: str = "steps"
    k_returns: int = 10
    out: str = "out"
    node_budget: int = DEFAULT_NODE_BUDGET
    null_tol: float = 1e-12
    strict: bool = False
    threads: Optional[int] = None
    d_range: list = field(default_factory=lambda: [2, 10])
    contour: ContourSpec = field(default_factory=ContourSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    # -- derived ----------------------------------------------------------
    @property
    def stride(self) -> int:
        if self.sample_stride is not None:
            return self.sample_stride
        return max(1, self.n_steps // 1000)

    def env_spec(self) -> EnvSpec:
        return parse_environment(self.environment)

    def semantic_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k in NON_SEMANTIC:
            out.pop(k, None)
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        _require(self.walk in ("rotor", "srw"), "walk", f"must be 'rotor' or 'srw', got {self.walk!r}")
        _require(self.mode in ("steps", "returns"), "mode", f"must be 'steps' or 'returns', got {self.mode!r}")
        for name in ("n_steps", "replicas", "k_returns", "node_budget"):
            v = getattr(self, name)
            _require(_is_int(v) and v >= 1, name, f"must be an integer >= 1, got {v!r}")
        _require(_is_int(self.seed) and self.seed >= 0, "seed", "must be a non-negative integer")
        if self.sample_stride is not None:
            _require(_is_int(self.sample_stride) and self.sample_stride >= 1, "sample_stride", "must be >= 1")
        if self.threads is not None:
            _require(_is_int(self.threads) and self.threads >= 1, "threads", "must be >= 1")
        _require(
            isinstance(self.d_range, list) and len(self.d_range) == 2
            and all(_is_int(x) for x in self.d_range) and 2 <= self.d_range[0] <= self.d_range[1],
            "d_range", "must be [d_min, d_max] with 2 <= d_min <= d_max",
        )
        c = self.contour
        _require(_is_int(c.k) and c.k >= 1, "contour.k", "must be >= 1")
        _require(_is_int(c.L) and c.L >= 1, "contour.L", "must be >= 1")
        _require(_is_int(c.replicas) and c.replicas >= 2, "contour.replicas", "must be >= 2")
        s = self.sweep
        _require(
            all(_is_int(i) and 2 <= i <= 127 for i in s.families), "sweep.families",
            "families are offspring maxima i >= 2",
        )
        _require(all(0.0 <= p <= 1.0 for p in s.p_grid), "sweep.p_grid", "entries must lie in [0, 1]")
        _require(_is_int(s.replicas) and s.replicas >= 1, "sweep.replicas", "must be >= 1")
        _require(_is_int(s.n_steps) and s.n_steps >= 1, "sweep.n_steps", "must be >= 1")
        self.env_spec()
        return self


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _require(cond: bool, fld: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"field '{fld}': {msg}")


def _prob(x: Any, where: str) -> Union[float, Fraction]:
    """Numbers or rational strings like ``"1/3"``."""
    if isinstance(x, str):
        try:
            return Fraction(x)
        except ValueError:
            raise ConfigError(f"field '{where}': cannot parse {x!r} as a probability") from None
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return x
    raise ConfigError(f"field '{where}': expected a number, got {x!r}")


def parse_environment(spec: dict) -> EnvSpec:
    if not isinstance(spec, dict):
        raise ConfigError("field 'environment': expected an object")
    tree = spec.get("tree", "regular")
    try:
        if tree == "regular":
            d = spec.get("d")
            _require(_is_int(d), "environment.d", f"expected an integer, got {d!r}")
            if "r" in spec:
                r = [_prob(x, f"environment.r[{i}]") for i, x in enumerate(spec["r"])]
                law = RotorLaw(d, tuple(r))
            else:
                rotor = spec.get("rotor", "uniform")
                _require(rotor == "uniform", "environment.rotor", "only 'uniform' is a shorthand; give 'r' otherwise")
                law = RotorLaw.uniform(d)
            return Regular(law)
        if tree in ("galton-watson", "gw"):
            raw = spec.get("offspring")
            _require(isinstance(raw, dict), "environment.offspring", "expected an object {k: p_k}")
            off = OffspringLaw({int(k): _prob(v, f"environment.offspring.{k}") for k, v in raw.items()})
            Q = spec.get("Q", "uniform")
            if Q == "uniform":
                mat = RotorMatrix.uniform(off.support)
            elif isinstance(Q, dict):
                mat = RotorMatrix({
                    int(k): tuple(_prob(x, f"environment.Q.{k}") for x in row) for k, row in Q.items()
                })
            else:
                raise ConfigError("field 'environment.Q': expected 'uniform' or an object of rows")
            return GaltonWatson(off, mat)
    except InvalidLaw as exc:
        raise ConfigError(f"field 'environment': {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"field 'environment': {exc}") from None
    raise ConfigError(f"field 'environment.tree': unknown tree kind {tree!r}")


def _build(cls, data: dict, prefix: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in names:
            raise ConfigError(f"field '{prefix}{key}': unknown field")
        if key == "contour":
            val = _build(ContourSpec, _obj(val, "contour"), "contour.")
        elif key == "sweep":
            val = _build(SweepSpec, _obj(val, "sweep"), "sweep.")
        kwargs[key] = val
    return cls(**kwargs)


def _obj(val: Any, name: str) -> dict:
    if not isinstance(val, dict):
        raise ConfigError(f"field '{name}': expected an object")
    return val


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return _build(ExperimentConfig, _obj(data, "<root>"), "")


def load(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)
