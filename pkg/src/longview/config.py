"""Pipeline configuration: one YAML file, strictly validated."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .highlevel import DEFAULT_CONTEXT_BUDGET, PipelineVariant
from .llm import BackendConfig
from .thvae.config import ThVaeConfig
from .timeline import DEFAULT_CHUNK_CUTOFF


class ConfigError(ValueError):
    pass


def _strict(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class MetricBackendConfig:
    """``kind`` is ``stub`` or ``hf``; the model names only matter for ``hf``."""

    kind: str = "stub"
    model_name: str | None = None
    seq2seq_name: str | None = None
    layer: int | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "hf"):
            raise ValueError(f"metric backend kind must be 'stub' or 'hf', got {self.kind!r}")
        if self.kind == "hf" and not self.model_name:
            raise ValueError("hf metric backends need model_name")


@dataclass(frozen=True)
class TrainingSettings:
    steps: int = 2000
    batch_size: int | None = None
    min_freq: int = 1
    max_vocab: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("training steps must be >= 1")


@dataclass(frozen=True)
class Backends:
    extract: BackendConfig = field(default_factory=BackendConfig)
    instruct: BackendConfig = field(default_factory=BackendConfig)
    embedder: MetricBackendConfig = field(default_factory=MetricBackendConfig)
    nli: MetricBackendConfig = field(default_factory=MetricBackendConfig)
    lm: MetricBackendConfig = field(default_factory=MetricBackendConfig)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    variant: str = "full"
    chunk_cutoff: int = DEFAULT_CHUNK_CUTOFF
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    templates_dir: str | None = None
    manifest_path: str | None = None
    thvae: ThVaeConfig = field(default_factory=ThVaeConfig)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    backends: Backends = field(default_factory=Backends)

    def __post_init__(self):
        PipelineVariant.parse(self.variant)
        if self.chunk_cutoff < 1 or self.context_budget < 1:
            raise ConfigError("chunk_cutoff and context_budget must be >= 1")

    @property
    def pipeline_variant(self) -> PipelineVariant:
        return PipelineVariant.parse(self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thvae"] = self.thvae.to_dict()
        for name in ("extract", "instruct"):
            d["backends"][name]["kind"] = getattr(self.backends, name).kind.value
        return d

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, variant: str | None = None,
                       backend: str | None = None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if variant is not None:
            cfg = replace(cfg, variant=variant)
        if backend == "stub":
            cfg = replace(cfg, backends=Backends())
        return cfg

    @classmethod
    def from_dict(cls, data: dict | None) -> "PipelineConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        if "thvae" in data:
            data["thvae"] = _thvae_from(data["thvae"])
        if "training" in data:
            data["training"] = _strict(TrainingSettings, data["training"], "training")
        if "backends" in data:
            raw = data["backends"] or {}
            if not isinstance(raw, dict):
                raise ConfigError("backends: expected a mapping")
            unknown = set(raw) - {f.name for f in fields(Backends)}
            if unknown:
                raise ConfigError(f"backends: unknown keys {sorted(unknown)}")
            parts = {}
            for name in ("extract", "instruct"):
                if name in raw:
                    parts[name] = _strict(BackendConfig, raw[name], f"backends.{name}")
            for name in ("embedder", "nli", "lm"):
                if name in raw:
                    parts[name] = _strict(MetricBackendConfig, raw[name], f"backends.{name}")
            data["backends"] = Backends(**parts)
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


def _thvae_from(raw) -> ThVaeConfig:
    if raw is None:
        return ThVaeConfig()
    if not isinstance(raw, dict):
        raise ConfigError("thvae: expected a mapping")
    raw = dict(raw)
    preset = raw.pop("preset", "default")
    try:
        if preset == "micro":
            return ThVaeConfig.micro(**raw)
        if preset == "default":
            return ThVaeConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"thvae: {exc}") from None
    raise ConfigError(f"thvae: unknown preset {preset!r}")
