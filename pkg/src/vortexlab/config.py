"""Experiment configuration: YAML file -> validated ``ExperimentConfig``.

Every section has documented defaults (the dataclass defaults below); the
fully resolved config is echoed into each run's manifest.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .kernel import V_SUP

STUDIES = ("convergence", "lamb_oseen", "hierarchy_cert", "regularity", "concentration", "simulate")


class ConfigError(ValueError):
    """Invalid configuration; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass
class LawSection:
    kind: str = "two_point"
    A: float = 1.0
    p: float = 0.5
    value: float = 1.0


@dataclass
class GridSection:
    half_width: float = 8.0
    n: int = 128
    dealias: bool = True
    biot_savart: str = "free"


@dataclass
class InitialSection:
    variance: float = 0.25
    offset: float = 1.0


@dataclass
class HierarchySection:
    N: int = 64
    c1: float = 1.0
    c2: float = 0.3
    growth: str = "log"
    C: float = 1.0
    gamma: float = 1.0
    t_final: float = 5.0
    tol: float = 1e-6
    max_k: int = 4


@dataclass
class RegularitySection:
    gamma: float = 1.0
    t0: float = 0.5
    times: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0])
    log_times: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    fit_t_min: float = 1.0
    aux_t_max: float = 4.0


@dataclass
class ConcentrationSection:
    N_list: list = field(default_factory=lambda: [10, 100, 1000])
    n_mc: int = 100_000
    phi_scale: float = 0.1
    positive_control: bool = True


@dataclass
class LambOseenSection:
    gamma: float = 1.0
    t0: float = 1.0
    t_final: float = 1.0
    tol: float = 1e-6


@dataclass
class ExperimentConfig:
    study: str = "convergence"
    preset: str | None = None
    seed: int = 0
    sigma: float = 0.5
    A: float = 1.0
    law: LawSection = field(default_factory=LawSection)
    grid: GridSection = field(default_factory=GridSection)
    initial: InitialSection = field(default_factory=InitialSection)
    dt: float = 0.025
    t_eval: float = 0.5
    N_list: list = field(default_factory=lambda: [1024, 4096, 16384])
    k: int = 1
    n_replicas: int = 32
    bandwidth: float = 0.25
    force_method: str = "direct"
    theta: float = 0.5
    slope_max: float = -0.35
    output_dir: str = "out"
    hierarchy: HierarchySection = field(default_factory=HierarchySection)
    regularity: RegularitySection = field(default_factory=RegularitySection)
    concentration: ConcentrationSection = field(default_factory=ConcentrationSection)
    lamb_oseen: LambOseenSection = field(default_factory=LambOseenSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# fields a preset changes when the file leaves them unset
PRESET_DEFAULTS = {
    "smoke": {"N_list": [1024, 4096], "n_replicas": 8},
}

_SECTIONS = {
    "law": LawSection, "grid": GridSection, "initial": InitialSection,
    "hierarchy": HierarchySection, "regularity": RegularitySection,
    "concentration": ConcentrationSection, "lamb_oseen": LambOseenSection,
}


def _coerce(name, value, default, errors):
    """Match the type of the default; collect a violation instead of raising."""
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, list):
            if not isinstance(value, list):
                raise TypeError
            return list(value)
    except (TypeError, ValueError):
        errors.append(f"{name}: expected {type(default).__name__}, got {value!r}")
        return default
    return value


def _fill(cls, raw, prefix, errors):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: expected a mapping")
        raw = {}
    inst = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"{prefix}{key}: unknown field")
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        if f.name in _SECTIONS and cls is ExperimentConfig:
            setattr(inst, f.name, _fill(_SECTIONS[f.name], raw[f.name], f"{f.name}.", errors))
        else:
            setattr(inst, f.name, _coerce(prefix + f.name, raw[f.name], getattr(inst, f.name), errors))
    return inst


def validate(cfg: ExperimentConfig) -> list[str]:
    v = []

    def need(cond, constraint, msg):
        if not cond:
            v.append(f"{constraint}: {msg}")

    need(cfg.study in STUDIES, "study", f"must be one of {', '.join(STUDIES)}, got {cfg.study!r}")
    need(cfg.preset in (None, "sharp", "smoke"), "preset", f"unknown preset {cfg.preset!r}")
    need(cfg.sigma > 0, "sigma>0", f"sigma must be positive, got {cfg.sigma}")
    need(cfg.A > 0, "A>0", f"A must be positive, got {cfg.A}")
    need(0 <= cfg.seed < 2**64, "seed", "seed must be an unsigned 64-bit integer")
    need(cfg.dt > 0, "dt>0", f"dt must be positive, got {cfg.dt}")
    need(cfg.t_eval > 0, "t_eval>0", f"t_eval must be positive, got {cfg.t_eval}")
    need(len(cfg.N_list) > 0 and all(isinstance(n, int) and n >= 2 for n in cfg.N_list),
         "N_list", "needs integers >= 2")
    need(cfg.k in (1, 2), "k", "k must be 1 or 2")
    need(cfg.n_replicas >= 2, "n_replicas>=2", "at least two replicas")
    need(cfg.bandwidth > 0, "bandwidth>0", "bandwidth must be positive")
    need(cfg.force_method in ("direct", "tree"), "force_method", "must be direct or tree")
    need(0 < cfg.theta <= 1, "theta", "theta must lie in (0, 1]")
    need(cfg.law.kind in ("constant", "uniform", "two_point"), "law.kind",
         f"unknown circulation law {cfg.law.kind!r}")
    need(cfg.law.A > 0, "law.A>0", "law bound must be positive")
    need(0 <= cfg.law.p <= 1, "law.p", "probability must lie in [0, 1]")
    need(cfg.law.A <= cfg.A + 1e-12, "law.A<=A", "law support exceeds the circulation bound A")
    g = cfg.grid
    need(g.n >= 32 and g.n & (g.n - 1) == 0, "grid.n", "must be a power of two >= 32")
    need(g.half_width > 0, "grid.half_width>0", "must be positive")
    need(g.biot_savart in ("free", "periodic"), "grid.biot_savart", "must be free or periodic")
    need(cfg.initial.variance > 0, "initial.variance>0", "must be positive")
    h = cfg.hierarchy
    need(h.N >= 1, "hierarchy.N", "must be >= 1")
    need(h.c1 > h.c2 >= 0, "hierarchy.c1>c2>=0", f"need c1 > c2 >= 0, got c1={h.c1}, c2={h.c2}")
    need(h.growth in ("log", "constant"), "hierarchy.growth", "must be log or constant")
    need(h.C > 0, "hierarchy.C>0", "must be positive")
    need(h.t_final > 0, "hierarchy.t_final>0", "must be positive")
    r = cfg.regularity
    need(r.t0 > 0, "regularity.t0>0", "must be positive")
    need(len(r.times) >= 2 and all(t >= 0 for t in r.times), "regularity.times", "need >= 2 times >= 0")
    c = cfg.concentration
    need(all(isinstance(n, int) and n >= 1 for n in c.N_list), "concentration.N_list", "needs integers >= 1")
    need(c.n_mc >= 2, "concentration.n_mc", "needs >= 2 replicas")
    need(0 < c.phi_scale < 1 / (2 * math.e), "concentration.phi_scale",
         "sup-norm must lie in (0, 1/(2e))")
    lo = cfg.lamb_oseen
    need(lo.t0 > 0, "lamb_oseen.t0>0", "must be positive")
    need(lo.t_final > 0, "lamb_oseen.t_final>0", "must be positive")
    if cfg.preset == "sharp":
        bound = math.sqrt(2) * cfg.A * V_SUP
        need(cfg.sigma > bound, "sigma>sqrt(2)*A*||V||",
             f"sharp preset needs sigma > sqrt(2)*A/4 = {bound:.4f}, got {cfg.sigma}")
    return v


def _key_lines(text: str) -> dict:
    """Dotted key -> 1-based source line, from the YAML node tree."""
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                name = prefix + str(k.value)
                out[name] = k.start_mark.line + 1
                walk(v, name + ".")

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def _with_line(msg: str, lines: dict) -> str:
    key = msg.split(":", 1)[0]
    # constraint names like "sigma>0" or "hierarchy.c1>c2>=0" start with the field
    for cand in (key, key.split(">")[0].split("<")[0].split("(")[0]):
        if cand in lines:
            return f"line {lines[cand]}: {msg}"
    return msg


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError([f"parse error in {source} at {where}: {getattr(exc, 'problem', exc)}"]) from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"{source}: top level must be a mapping"])
    errors: list[str] = []
    cfg = _fill(ExperimentConfig, raw, "", errors)
    for key, value in PRESET_DEFAULTS.get(cfg.preset, {}).items():
        if key not in raw:
            setattr(cfg, key, value)
    errors.extend(validate(cfg))
    if errors:
        lines = _key_lines(text)
        raise ConfigError([_with_line(e, lines) for e in errors])
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {p}: {exc.strerror}"]) from None
    return parse_config(text, str(p))
