"""Flat ``key = value`` run configuration with dotted section keys.

Every key has a fixed type and default. Files may set any subset of keys; unknown
keys, malformed values and invalid combinations raise :class:`ConfigError`.
``RunConfig.to_text`` writes every key, and parsing that text gives back an equal
config.
"""
from __future__ import annotations

import math
from dataclasses import fields
from pathlib import Path

from .gap_synth import BrushConfig, GapConfig, scale_gap_config
from .mask_data import SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or an invalid combination of values."""


# type tags: int, float, bool, str, or ("int"|"float", n) for fixed-length tuples
_TRAIN_SKIP = {"patch_size", "gap", "seed"}
_SCALARS = {"int": int, "float": float, "bool": bool, "str": str}


def _train_schema() -> dict:
    out = {}
    for f in fields(TrainConfig):
        if f.name in _TRAIN_SKIP:
            continue
        kind = f.type if isinstance(f.type, type) else _SCALARS[f.type]
        out[f"train.{f.name}"] = (kind, f.default)
    return out


SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "threads": (int, 1),
    "patch_size": (int, 256),
    "synth.count": (int, 200),
    "synth.split": (("float", 3), (8.0, 1.0, 1.0)),
    "synth.canvas": (("int", 2), SynthConfig.canvas),
    "synth.stem_count": (int, SynthConfig.stem_count),
    "synth.branch_prob": (float, SynthConfig.branch_prob),
    "synth.step_jitter": (float, SynthConfig.step_jitter),
    "synth.thickness": (int, SynthConfig.thickness),
    "synth.min_length": (int, SynthConfig.min_length),
    "gap.kind": (str, GapConfig.kind),
    "gap.reference_patch": (int, 256),
    "gap.count_range": (("int", 2), GapConfig.count_range),
    "gap.square_size_range": (("int", 2), GapConfig.square_size_range),
    "gap.blob_scale_range": (("float", 2), GapConfig.blob_scale_range),
    "gap.blob_count": (int, GapConfig.blob_count),
    "gap.brush.vertex_count_range": (("int", 2), BrushConfig.vertex_count_range),
    "gap.brush.stroke_width_range": (("int", 2), BrushConfig.stroke_width_range),
    "gap.brush.max_turn": (float, BrushConfig.max_turn),
    "gap.brush.segment_length_range": (("int", 2), BrushConfig.segment_length_range),
    **_train_schema(),
    "train.resume": (str, ""),
    "infer.threshold": (float, 0.5),
    "infer.chunk": (int, 16),
    "eval.connectivity": (int, 8),
    "eval.pixel_diff_in_gaps": (bool, True),
    "eval.traits": (bool, True),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind, _ = SCHEMA[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is str:
            return text
        if isinstance(kind, tuple):
            elem, n = kind
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != n:
                raise ValueError(f"expected {n} comma-separated values")
            conv = int if elem == "int" else float
            return tuple(conv(p) for p in parts)
        value = kind(text)
        if isinstance(value, float) and not math.isfinite(value):
            raise ValueError("not finite")
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def __repr__(self):
        return f"RunConfig({self.values!r})"

    # --- text form ---------------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key = key.strip()
            try:
                values[key] = parse_value(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, str(path))

    def with_overrides(self, assignments) -> "RunConfig":
        values = dict(self.values)
        for item in assignments:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            values[key.strip()] = parse_value(key.strip(), value)
        return RunConfig(values)

    def to_text(self) -> str:
        lines = ["# resolved configuration"]
        lines += [f"{k} = {format_value(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    # --- typed views -------------------------------------------------------------------

    def synth_config(self, seed: int | None = None) -> SynthConfig:
        v = self.values
        return SynthConfig(seed=v["seed"] if seed is None else seed, canvas=v["synth.canvas"],
                           stem_count=v["synth.stem_count"], branch_prob=v["synth.branch_prob"],
                           step_jitter=v["synth.step_jitter"], thickness=v["synth.thickness"],
                           min_length=v["synth.min_length"])

    def gap_config(self) -> GapConfig:
        """Gap sizes are written for a ``gap.reference_patch`` tile and scaled to ``patch_size``."""
        v = self.values
        base = GapConfig(
            kind=v["gap.kind"], count_range=v["gap.count_range"],
            square_size_range=v["gap.square_size_range"],
            brush=BrushConfig(v["gap.brush.vertex_count_range"], v["gap.brush.stroke_width_range"],
                              v["gap.brush.max_turn"], v["gap.brush.segment_length_range"]),
            blob_scale_range=v["gap.blob_scale_range"], blob_count=v["gap.blob_count"],
            seed=v["seed"])
        if v["patch_size"] == v["gap.reference_patch"]:
            return base
        return scale_gap_config(base, v["patch_size"] / v["gap.reference_patch"])

    def train_config(self) -> TrainConfig:
        kw = {k[len("train."):]: val for k, val in self.values.items()
              if k.startswith("train.") and k != "train.resume"}
        return TrainConfig(patch_size=self.values["patch_size"], gap=self.gap_config(),
                           seed=self.values["seed"], **kw)

    def validate(self, training: bool = True) -> "RunConfig":
        """Build the typed views so that bad values fail before any work starts.

        ``training=False`` skips the checks that only matter to ``train_config``.
        """
        v = self.values
        try:
            if v["threads"] < 1:
                raise ValueError("threads must be >= 1")
            if v["patch_size"] < 16 or v["gap.reference_patch"] < 1:
                raise ValueError("patch_size must be >= 16 and gap.reference_patch >= 1")
            if v["synth.count"] < 0:
                raise ValueError("synth.count must be >= 0")
            if min(v["synth.split"]) < 0 or sum(v["synth.split"]) <= 0:
                raise ValueError("synth.split needs non-negative parts with a positive sum")
            if not 0.0 < v["infer.threshold"] < 1.0 or v["infer.chunk"] < 1:
                raise ValueError("infer.threshold must lie in (0, 1) and infer.chunk >= 1")
            if v["eval.connectivity"] not in (4, 8):
                raise ValueError("eval.connectivity must be 4 or 8")
            self.synth_config()
            self.gap_config()
            if training:
                self.train_config()
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        return self
