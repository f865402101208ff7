"""Flat ``section.key = value`` run configuration.

Every key has a documented default; a file only lists overrides. Unknown keys
and unparsable values are rejected with the offending line number.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from tissue_isp.env import EnvConfig
from tissue_isp.errors import ConfigError
from tissue_isp.expert import ExpertConfig
from tissue_isp.fem import MaterialParams, SolverConfig
from tissue_isp.planner import PlanConfig
from tissue_isp.sac import SacConfig


@dataclass(frozen=True)
class MeshConfig:
    side_mm: float = 100.0
    resolution: int = 21


@dataclass(frozen=True)
class RunOptions:
    eval_episodes: int = 5
    rollout_steps: int = 30


SECTIONS = {
    "mesh": MeshConfig,
    "material": MaterialParams,
    "solver": SolverConfig,
    "env": EnvConfig,
    "sac": SacConfig,
    "plan": PlanConfig,
    "expert": ExpertConfig,
    "run": RunOptions,
}

# per-episode draws or fixed by env.*; not meaningful to set here
_HIDDEN = {("material", "young_modulus"), ("material", "poisson_ratio")}


def _defaults() -> dict[str, object]:
    out = {}
    for sec, cls in SECTIONS.items():
        inst = cls()
        for f in fields(cls):
            if f.name.startswith("_") or (sec, f.name) in _HIDDEN:
                continue
            out[f"{sec}.{f.name}"] = getattr(inst, f.name)
    return out


DEFAULTS = _defaults()


def _parse_value(text: str, default):
    t = text.strip()
    if isinstance(default, bool):
        if t.lower() in ("true", "yes", "1"):
            return True
        if t.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if isinstance(default, int):
        return int(t)
    if isinstance(default, float):
        return float(t)
    if isinstance(default, tuple):
        parts = [p for p in t.replace("(", "").replace(")", "").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if default is None:
        return None if t.lower() in ("none", "") else float(t)
    return t


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


class RunConfig:
    """Resolved key/value map plus typed section objects."""

    def __init__(self, overrides: dict[str, object] | None = None, source: str = "<defaults>"):
        self.source = source
        self.values = dict(DEFAULTS)
        for k, v in (overrides or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"{source}: unknown key {k!r}")
            self.values[k] = v
        self._build()

    def _section(self, sec: str) -> dict:
        p = sec + "."
        return {k[len(p) :]: v for k, v in self.values.items() if k.startswith(p)}

    def _build(self):
        try:
            self.mesh = MeshConfig(**self._section("mesh"))
            self.material = MaterialParams(poisson_ratio=self.values["env.poisson_fixed"], **self._section("material"))
            self.solver = SolverConfig(**self._section("solver"))
            self.env = EnvConfig(**self._section("env"))
            self.sac = SacConfig(**self._section("sac"))
            self.plan = PlanConfig(**self._section("plan"))
            self.expert = ExpertConfig(**self._section("expert"))
            self.run = RunOptions(**self._section("run"))
        except (ValueError, TypeError, ConfigError) as exc:
            raise ConfigError(f"{self.source}: {exc}") from None

    def override(self, updates: dict[str, object]) -> "RunConfig":
        return RunConfig({**self.values, **updates}, self.source)

    def canonical_text(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def write_snapshot(self, path) -> None:
        Path(path).write_text(f"# resolved configuration, hash {self.hash}\n" + self.canonical_text())


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        if val == "" and DEFAULTS[key] is not None:
            raise ConfigError(f"{where}: missing value for {key!r}")
        try:
            overrides[key] = _parse_value(val, DEFAULTS[key])
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(overrides, source)
    except ConfigError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(text, str(p))


def defaults_text() -> str:
    """Every key with its default, for documentation and ``--print-defaults``."""
    return RunConfig().canonical_text()
