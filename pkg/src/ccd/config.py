"""Pipeline configuration: one JSON document, validated eagerly at load.

Relative paths inside the document resolve against the --out directory, so a
config file is portable across workspaces. Two placeholders are substituted
in provider commands: {python} (the running interpreter) and {out} (the
absolute output directory). The config hash covers the canonical document
before substitution, so reruns and stage chaining under one config agree.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from .cam_views import ViewConfig
from .debias import CalibrationConfig
from .errors import ConfigError
from .synth import WorldSpec
from .trainer import TrainConfig


@dataclass
class ProviderConfig:
    command: list[str] | None = None
    address: str | None = None     # host:port alternative to command
    window: int = 16
    timeout_s: float = 60.0
    resize_long: int = 640
    cache: str | None = "cache/views.bin"

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigError(f"provider window must be >= 1, got {self.window}")
        if self.timeout_s <= 0:
            raise ConfigError(f"provider timeout must be positive, got {self.timeout_s}")
        if self.resize_long < 1:
            raise ConfigError(f"resize_long must be positive, got {self.resize_long}")
        if self.command is not None and self.address is not None:
            raise ConfigError("provider: give either command or address, not both")


@dataclass
class PipelineConfig:
    seed: int = 0
    manifest: str = "dataset/manifest.json"
    tau: float = 0.01
    fuse_alpha: float = 0.4
    debias: CalibrationConfig = field(default_factory=CalibrationConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: WorldSpec | None = None
    sweep: dict | None = None      # {"parameter": dotted path, "values": [...]}

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not (0.0 <= self.fuse_alpha <= 1.0):
            raise ConfigError(f"fuse_alpha must be in [0, 1], got {self.fuse_alpha}")
        if self.sweep is not None:
            if "parameter" not in self.sweep or "values" not in self.sweep:
                raise ConfigError("sweep needs 'parameter' and 'values'")
            if not isinstance(self.sweep["values"], list) or not self.sweep["values"]:
                raise ConfigError("sweep values must be a non-empty list")


_SECTION_TYPES = {
    "debias": CalibrationConfig,
    "views": ViewConfig,
    "provider": ProviderConfig,
    "train": TrainConfig,
    "synth": WorldSpec,
}


def _build_section(cls, doc: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    converted = dict(doc)
    for key in ("feature_grid", "box_size_range"):
        if key in converted and isinstance(converted[key], list):
            converted[key] = tuple(converted[key])
    try:
        return cls(**converted)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}")


def parse_config(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    top_allowed = {f.name for f in fields(PipelineConfig)}
    unknown = set(doc) - top_allowed
    if unknown:
        raise ConfigError(f"config: unknown top-level keys {sorted(unknown)}")
    kwargs: dict = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            if value is None:
                kwargs[key] = None
            else:
                kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    cfg = PipelineConfig(**kwargs)
    # the trainer carries the shared seed and fusion weight for its log
    cfg.train.seed = cfg.seed
    cfg.train.alpha = cfg.fuse_alpha
    if cfg.synth is not None and cfg.synth.tau != cfg.tau:
        raise ConfigError(
            f"synth.tau ({cfg.synth.tau}) must match tau ({cfg.tau}): the planted"
            " probability rows are realized at the pipeline temperature"
        )
    return cfg


def load_config(path: str | Path) -> tuple[PipelineConfig, str]:
    """Parse and validate; returns (config, config_hash)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    cfg = parse_config(doc)
    return cfg, config_hash(doc)


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def resolve_path(rel_or_abs: str, out_dir: Path) -> Path:
    p = Path(rel_or_abs)
    return p if p.is_absolute() else out_dir / p


def substitute_command(command: list[str], out_dir: Path) -> list[str]:
    return [
        arg.replace("{python}", sys.executable).replace("{out}", str(out_dir))
        for arg in command
    ]
