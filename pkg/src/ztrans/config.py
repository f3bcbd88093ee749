"""Experiment configuration: one JSON document, strictly validated.

Defaults reproduce the full-size setup.  ``ExperimentConfig.toy()`` gives the
desk-scale setup the test suite and demos train in a few minutes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field, fields
from typing import Any, Optional, Sequence

from .corpus import atomic_write_text
from .errors import ConfigError
from .model import TransformerConfig
from .training import TrainConfig

VARIANTS = ("vanilla", "lole", "lclr", "both")


@dataclass(frozen=True)
class DataConfig:
    num_languages: int = 5
    sentences_per_pair: int = 2000
    valid_per_pair: int = 100
    test_per_pair: int = 100
    length_min: int = 3
    length_max: int = 8
    concept_vocab_size: int = 20
    seed: int = 1


@dataclass(frozen=True)
class ModelSection:
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 512
    heads: int = 4
    d_ffn: int = 1024
    dropout: float = 0.2
    activation: str = "gelu"
    max_positions: int = 256
    tie_embeddings: bool = True
    lole_layer: Optional[int] = None  # None: second-top encoder layer
    d_e: int = 128
    lclr_layer: Optional[int] = None  # None: bottom, or second-bottom next to LoLE
    d_h: int = 64
    k: int = 30


@dataclass(frozen=True)
class AnalysisConfig:
    beam: int = 4
    variance_threshold: float = 0.99
    regularization: float = 1e-6
    exclude_tag: bool = True
    bootstrap_iterations: int = 1000
    bootstrap_ratio: float = 0.5
    bootstrap_seed: int = 0
    sentences: Optional[int] = None  # cap on sentences per comparison set


_SECTIONS = {"data": DataConfig, "model": ModelSection, "train": TrainConfig,
             "analysis": AnalysisConfig}


def _check_value(where: str, hint, value):
    """Validate ``value`` against a field annotation; returns the coerced value."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_value(where, inner[0], value)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def _build(cls, where: str, data: Any):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]!r}")
    values = {k: _check_value(f"{where}.{k}", hints[k], v) for k, v in data.items()}
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "vanilla"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    # -- (de)serialisation
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Any) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = sorted(set(d) - {"variant", *_SECTIONS})
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        kwargs = {name: _build(sec, name, d.get(name, {})) for name, sec in _SECTIONS.items()}
        variant = d.get("variant", "vanilla")
        if not isinstance(variant, str):
            raise ConfigError(f"variant: expected str, got {variant!r}")
        return cls(variant=variant, **kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_json())

    # -- overrides
    def with_overrides(self, assignments: Sequence[str]) -> "ExperimentConfig":
        """Apply ``key=value`` strings; keys are dotted or unique bare field names.

        Values are parsed as JSON when possible, otherwise taken as strings.
        """
        doc = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            section, name = self._resolve(key.strip())
            if section is None:
                doc[name] = value
            else:
                doc[section][name] = value
        return ExperimentConfig.from_dict(doc)

    @staticmethod
    def _resolve(key: str) -> tuple[str | None, str]:
        if key == "variant":
            return None, key
        if "." in key:
            section, _, name = key.partition(".")
            if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
                raise ConfigError(f"unknown config key {key!r}")
            return section, name
        owners = [s for s, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"config key {key!r} is ambiguous; use one of "
                              + ", ".join(f"{s}.{key}" for s in owners))
        return owners[0], key

    # -- derived objects
    def model_config(self, vocab_size: int, num_languages: int,
                     variant: str | None = None) -> TransformerConfig:
        variant = variant or self.variant
        if variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {variant!r}")
        m = self.model
        return TransformerConfig(
            vocab_size=vocab_size, num_languages=num_languages, enc_layers=m.enc_layers,
            dec_layers=m.dec_layers, d_model=m.d_model, heads=m.heads, d_ffn=m.d_ffn,
            dropout=m.dropout, activation=m.activation, max_positions=m.max_positions,
            tie_embeddings=m.tie_embeddings, lole_enabled=variant in ("lole", "both"),
            lole_layer=m.lole_layer, d_e=m.d_e, lclr_enabled=variant in ("lclr", "both"),
            lclr_layer=m.lclr_layer, d_h=m.d_h, k=m.k)

    @classmethod
    def toy(cls, variant: str = "vanilla", seed: int = 1) -> "ExperimentConfig":
        """Desk-scale preset: 5 languages, 2+2 layers, width 64, 2k steps."""
        return cls(
            variant=variant,
            data=DataConfig(seed=seed),
            model=ModelSection(enc_layers=2, dec_layers=2, d_model=64, heads=4, d_ffn=128,
                               dropout=0.1, d_e=16, d_h=8),
            train=TrainConfig(base_lr=2e-3, warmup_steps=200, max_steps=2000, batch_tokens=1500,
                              seed=seed, log_every=100, checkpoint_every=500,
                              lclr_reduction="mean"),
        )
