"""Run configuration: hyper-parameters and the flat ``key = value`` file format."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


@dataclass(frozen=True)
class Config:
    # flow table
    pkt_timeout: float = 10.0
    flow_line: int = 15
    judge_interval: float = 1.0
    # graph
    agg_line: int = 20
    window: float = 45.0
    # clustering
    eps: float = 4e-3
    min_points: int = 40
    k: int = 10
    # loss
    threshold: float = 10.0
    alpha: float = 0.1
    beta: float = 0.5
    gamma: float = 1.7
    # misc
    seed: int = 0
    vc_exact_cutoff: int = 30

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite, got {v!r}")
        positive = ("pkt_timeout", "flow_line", "judge_interval", "agg_line", "window", "eps",
                    "min_points", "k")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        for name in ("threshold", "alpha", "beta", "gamma", "vc_exact_cutoff", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")

    def with_overrides(self, **kw: Any) -> Config:
        return replace(self, **kw)

    def snapshot(self) -> dict[str, Any]:
        return asdict(self)

    def overrides(self) -> dict[str, Any]:
        """Keys whose value differs from the defaults."""
        base = Config()
        return {k: v for k, v in asdict(self).items() if getattr(base, k) != v}


# Alternative spellings accepted in config files.
_ALIASES = {"epsilon": "eps", "minpoint": "min_points", "min_point": "min_points", "minpts": "min_points",
            "t": "threshold", "loss_threshold": "threshold", "K": "k"}


def _coerce(name: str, raw: str, typ: type) -> Any:
    raw = raw.strip().strip('"').strip("'")
    try:
        if typ is int:
            f = float(raw)
            if not f.is_integer():
                raise ValueError
            return int(f)
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    types = {f.name: (int if f.type in (int, "int") else float) for f in fields(Config)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _ALIASES.get(key, _ALIASES.get(key.lower(), key))
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[name] = _coerce(name, raw, types[name])
    try:
        return replace(base or Config(), **values)
    except ConfigError:
        raise


def load_config(path: str | Path | None, base: Config | None = None) -> Config:
    if path is None:
        return base or Config()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)
