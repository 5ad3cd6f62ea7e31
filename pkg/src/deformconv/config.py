"""Flat ``key = value`` run configuration files.

One setting per line; ``#`` starts a full-line comment; keys are dotted
paths (``opt.lr``, ``layer.0.type``). Every key must be known: a typo'd
key is an error, not a silently ignored setting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Missing, malformed, unknown, or out-of-range configuration."""


# every legal key; layer settings are per-index
_FIXED_KEYS = {
    "task",
    "seed",
    "out",
    "data.kind",
    "data.dir",
    "data.train",
    "data.test",
    "data.points",
    "data.noise",
    "layer.count",
    "opt.lr",
    "opt.weight_decay",
    "opt.epochs",
    "opt.batch",
    "eval.checkpoint",
    "eval.split",
    "export.checkpoint",
    "export.layer",
    "bench.sizes",
    "bench.reps",
    "pcc.hidden",
    "voxel.pitch",
    "subvoxel.pitch",
    "subvoxel.displacement",
}
_LAYER_KEY = re.compile(r"^layer\.(\d+)\.(type|in|out|k|a|r|cap|skip)$")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        if key not in _FIXED_KEYS and not _LAYER_KEY.match(key):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_config(path) -> "RunConfig":
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig(parse_config_text(text, source=str(path)))


@dataclass
class RunConfig:
    """Typed access over the parsed key/value map."""

    values: dict[str, str]

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        if key in self.values:
            return self.values[key]
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get_int(self, key: str, default: int | None = None) -> int:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {self.values[key]!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        if key not in self.values:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        try:
            out = float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {self.values[key]!r}") from None
        if not np.isfinite(out):
            raise ConfigError(f"{key}: value must be finite")
        return out

    def get_flag(self, key: str, default: bool = False) -> bool:
        if key not in self.values:
            return default
        v = self.values[key]
        if v not in ("0", "1"):
            raise ConfigError(f"{key}: expected 0 or 1, got {v!r}")
        return v == "1"

    def layer_specs(self) -> list[dict]:
        """The layer.* keys as a list of spec dicts (see nn.build_stack)."""
        count = self.get_int("layer.count")
        if count < 1:
            raise ConfigError("layer.count must be >= 1")
        specs = []
        for i in range(count):
            prefix = f"layer.{i}."
            kind = self.get_str(prefix + "type")
            spec: dict = {"type": kind}
            if kind in ("deformable", "separable"):
                spec["in"] = self.get_int(prefix + "in")
                spec["out"] = self.get_int(prefix + "out")
                spec["k"] = self.get_int(prefix + "k")
                spec["a"] = _parse_spacing(self.get_str(prefix + "a"), prefix + "a")
                spec["r"] = (
                    self.get_float(prefix + "r") if self.has(prefix + "r") else None
                )
                spec["cap"] = self.get_int(prefix + "cap")
                spec["skip"] = 1 if self.get_flag(prefix + "skip") else 0
            elif kind == "linear":
                spec["in"] = self.get_int(prefix + "in")
                spec["out"] = self.get_int(prefix + "out")
                spec["skip"] = 1 if self.get_flag(prefix + "skip") else 0
            elif kind in ("relu", "pool"):
                pass
            else:
                raise ConfigError(f"{prefix}type: unknown layer type {kind!r}")
            specs.append(spec)
        stray = [
            k
            for k in self.values
            if _LAYER_KEY.match(k) and int(_LAYER_KEY.match(k).group(1)) >= count
        ]
        if stray:
            raise ConfigError(f"layer keys beyond layer.count: {sorted(stray)}")
        return specs

    def int_list(self, key: str, default: list[int]) -> list[int]:
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers") from None


def _parse_spacing(raw: str, key: str) -> list[float]:
    toks = [t for t in raw.split(",") if t.strip() != ""]
    if len(toks) not in (1, 3):
        raise ConfigError(f"{key}: expected one or three comma-separated numbers")
    try:
        vals = [float(t) for t in toks]
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {raw!r}") from None
    if any(not np.isfinite(v) or v <= 0 for v in vals):
        raise ConfigError(f"{key}: spacings must be positive")
    return vals * 3 if len(vals) == 1 else vals
