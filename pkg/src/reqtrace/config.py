"""Run configuration: defaults, a YAML file, then command-line overrides.

Secrets never live in the file. The API key is read from the environment
variable named by ``gateway.api_key_env`` when a live provider is built.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE
from .errors import ConfigError
from .extraction import DEFAULT_ENTITY_TYPES
from .llm import MODES, GatewayConfig
from .retrieval import DEFAULT_THRESHOLD

logger = logging.getLogger(__name__)

RETRIEVAL_MODES = ("graph", "baseline")
STRATEGIES = ("io", "cot", "tot")
SECRET_KEYS = frozenset({"api_key", "openai_api_key", "token", "secret", "password"})


@dataclass
class RunConfig:
    references: list[str] = field(default_factory=list)
    requirements: str | None = None
    ground_truth: str | None = None
    output_dir: str = "out"
    chunk_size: int = DEFAULT_CHUNK_SIZE
    chunk_overlap: int = DEFAULT_CHUNK_OVERLAP
    entity_types: list[str] = field(default_factory=lambda: list(DEFAULT_ENTITY_TYPES))
    max_gleanings: int = 1
    resolution: float = 1.0
    max_levels: int = 3
    report_budget: int = 2000
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    community_threshold: float = 0.2
    baseline_k: int = 5
    modes: list[str] = field(default_factory=lambda: ["graph"])
    strategies: list[str] = field(default_factory=lambda: list(STRATEGIES))
    tot_mode: str = "multi"
    workers: int = 4
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    chat_models: list[str] = field(default_factory=lambda: ["gpt-4o"])

    def validate(self) -> RunConfig:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if not 0.0 <= self.community_threshold <= 1.0:
            raise ConfigError(f"community_threshold must be in [0, 1], got {self.community_threshold}")
        if self.chunk_size <= 0 or not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("need 0 <= chunk_overlap < chunk_size")
        if self.max_gleanings < 0 or self.max_levels < 1 or self.baseline_k < 1 or self.workers < 1:
            raise ConfigError("max_gleanings >= 0, max_levels >= 1, baseline_k >= 1 and workers >= 1 are required")
        if self.resolution <= 0:
            raise ConfigError("resolution must be positive")
        bad = [m for m in self.modes if m not in RETRIEVAL_MODES]
        if bad or not self.modes:
            raise ConfigError(f"modes must be a non-empty subset of {RETRIEVAL_MODES}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"strategies must be a non-empty subset of {STRATEGIES}")
        if self.tot_mode not in ("multi", "single"):
            raise ConfigError("tot_mode must be 'multi' or 'single'")
        if self.gateway.mode not in MODES:
            raise ConfigError(f"gateway mode must be one of {MODES}")
        if not self.chat_models:
            raise ConfigError("at least one chat model is required")
        if not self.entity_types:
            raise ConfigError("entity_types must not be empty")
        return self

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def to_json(self) -> dict[str, Any]:
        """Settings that shape results; input paths are reduced to file names."""
        data = dataclasses.asdict(self)
        data["references"] = sorted(Path(p).name for p in self.references)
        for key in ("requirements", "ground_truth"):
            data[key] = Path(data[key]).name if data[key] else None
        gw = data.pop("gateway")
        data["gateway"] = {
            "mode": gw["mode"],
            "embedding_model": gw["embedding_model"],
            "embedding_provider": gw["embedding_provider"],
            "temperature": gw["temperature"],
            "max_tokens": gw["max_tokens"],
        }
        data.pop("output_dir")
        data.pop("workers")
        return data


_PATH_KEYS = ("requirements", "ground_truth", "output_dir")
_LIST_KEYS = ("references", "entity_types", "modes", "strategies", "chat_models")


def _check_secrets(data: Mapping[str, Any], where: str) -> None:
    for key, value in data.items():
        if str(key).lower() in SECRET_KEYS:
            raise ConfigError(f"{where}{key}: secrets must come from the environment, not the config file")
        if isinstance(value, Mapping):
            _check_secrets(value, f"{where}{key}.")


def _as_list(key: str, value: Any) -> list[str]:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    raise ConfigError(f"{key} must be a list")


def _apply(cfg: RunConfig, data: Mapping[str, Any], base: Path | None) -> None:
    def resolve(p: str) -> str:
        return str(base / p) if base is not None and not Path(p).is_absolute() else str(p)

    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key, value in data.items():
        if value is None:
            continue
        if key == "gateway":
            if not isinstance(value, Mapping):
                raise ConfigError("gateway must be a mapping")
            gw_fields = {f.name for f in dataclasses.fields(GatewayConfig)} | {"cache", "chat_models"}
            for gk, gv in value.items():
                if gk not in gw_fields:
                    raise ConfigError(f"unknown gateway setting {gk!r}")
                if gk == "chat_models":
                    cfg.chat_models = _as_list(gk, gv)
                elif gk in ("cache", "cache_path"):
                    cfg.gateway.cache_path = resolve(str(gv))
                else:
                    setattr(cfg.gateway, gk, gv)
            continue
        if key not in fields:
            raise ConfigError(f"unknown setting {key!r}")
        if key in _LIST_KEYS:
            value = _as_list(key, value)
            if key == "references":
                value = [resolve(v) for v in value]
        elif key in _PATH_KEYS:
            value = resolve(str(value))
        else:
            default = getattr(cfg, key)
            try:
                value = type(default)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        setattr(cfg, key, value)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the YAML file at ``path``, then non-None ``overrides``.

    Relative paths in the file are resolved against the file's directory;
    override paths are taken as given. Override keys use the file's names,
    with ``gateway`` holding a nested mapping.
    """
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        _check_secrets(data, "")
        _apply(cfg, data, path.parent)
    if overrides:
        _apply(cfg, overrides, None)
    return cfg.validate()
