"""Experiment configuration: TOML loading, ablation arms, lock-file echo.

The file format mirrors the module boundaries: [data], [schedule], [model],
[loss], [train], [augment], [run] sections of flat key/value pairs. Every
run writes a fully-resolved ``config.lock`` next to its report so results
stay self-describing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .augment import AugmentOptions
from .datasets import Dataset, DomainSpec, SyntheticSpec, generate_synthetic, load_dataset
from .errors import ValidationError
from .losses import LossConfig
from .protocol import (
    SessionSchedule,
    TrainOptions,
    load_schedule,
    one_way_schedule,
    single_domain_schedule,
)

ARM_NAMES = ("full", "no-ld", "no-pseudo", "baseline")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    domains: int = 6
    classes: tuple[int, ...] = (4, 4, 4, 3, 3, 3)
    train_per_class: int = 40
    test_per_class: int = 20
    height: int = 16
    width: int = 16
    channels: int = 1
    train_manifest: str | None = None
    test_manifest: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest"):
            raise ValidationError("data.source must be 'synthetic' or 'manifest'")
        if self.source == "synthetic":
            if self.domains < 1 or len(self.classes) != self.domains:
                raise ValidationError("data.classes must list one class count per domain")
        else:
            if not self.train_manifest or not self.test_manifest:
                raise ValidationError("manifest source needs data.train_manifest and data.test_manifest")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "single-domain"
    base_domains: int = 3
    shots: int = 1
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("single-domain", "one-way", "file"):
            raise ValidationError("schedule.kind must be 'single-domain', 'one-way' or 'file'")
        if self.kind == "file" and not self.path:
            raise ValidationError("schedule.kind = 'file' needs schedule.path")
        if self.shots < 1 or self.base_domains < 1:
            raise ValidationError("schedule.shots and schedule.base_domains must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "conv-small"
    embedding_dim: int = 64

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ValidationError("model.embedding_dim must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/exp"

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("run.seeds must list at least one seed")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainOptions = TrainOptions()
    augment: AugmentOptions = AugmentOptions()
    run: RunConfig = RunConfig()


_LOSS_KEYS = {"lambda": "lam", "r_a": "r_a", "r_d": "r_d", "m_a": "m_a", "m_d": "m_d"}
_FLOAT_FIELDS = {
    "lam", "r_a", "r_d", "m_a", "m_d",
    "lr", "momentum", "val_fraction",
    "alpha", "flip_prob", "crop_prob", "jitter_prob", "jitter",
}


def _section(raw: dict, name: str, cls, key_map: dict[str, str] | None = None):
    payload = raw.get(name, {})
    if not isinstance(payload, dict):
        raise ValidationError(f"[{name}] must be a table")
    key_map = key_map or {}
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in payload.items():
        field = key_map.get(key, key)
        if field not in fields:
            raise ValidationError(f"unknown key {key!r} in [{name}]")
        if isinstance(value, list):
            value = tuple(value)
        if field in _FLOAT_FIELDS:
            value = float(value)
        kwargs[field] = value
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    """Parse and validate an experiment TOML file."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"config is not valid TOML: {path}: {e}") from e
    known = {"data", "schedule", "model", "loss", "train", "augment", "run"}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"unknown config sections {sorted(unknown)}")
    cfg = ExperimentConfig(
        data=_section(raw, "data", DataConfig),
        schedule=_section(raw, "schedule", ScheduleConfig),
        model=_section(raw, "model", ModelConfig),
        loss=_section(raw, "loss", LossConfig, _LOSS_KEYS),
        train=_section(raw, "train", TrainOptions),
        augment=_section(raw, "augment", AugmentOptions),
        run=_section(raw, "run", RunConfig),
    )
    base = path.parent
    for ref in (cfg.data.train_manifest, cfg.data.test_manifest, cfg.schedule.path):
        if ref is not None and not (base / ref).exists() and not Path(ref).exists():
            raise ValidationError(f"referenced path does not exist: {ref}")
    return cfg


def resolve_path(config_path, ref: str) -> Path:
    """Resolve a config-referenced path relative to the config file."""
    candidate = Path(config_path).parent / ref
    return candidate if candidate.exists() else Path(ref)


def apply_arm(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    """Derive an ablation arm from a configuration.

    full: unchanged. no-ld: lam = 1. no-pseudo: pseudo_per_batch = 0.
    baseline: lam = 1, no pseudo data, zero margins (plain cosine softmax).
    """
    if arm == "full":
        return cfg
    if arm == "no-ld":
        return dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, lam=1.0))
    if arm == "no-pseudo":
        return dataclasses.replace(cfg, augment=dataclasses.replace(cfg.augment, pseudo_per_batch=0))
    if arm == "baseline":
        return dataclasses.replace(
            cfg,
            loss=dataclasses.replace(cfg.loss, lam=1.0, m_a=0.0, m_d=0.0),
            augment=dataclasses.replace(cfg.augment, pseudo_per_batch=0),
        )
    raise ValidationError(f"unknown ablation arm {arm!r}; choose from {ARM_NAMES}")


def build_datasets(cfg: ExperimentConfig, data_seed: int, config_path=None) -> tuple[Dataset, Dataset]:
    if cfg.data.source == "synthetic":
        spec = SyntheticSpec(
            domains=tuple(DomainSpec(f"domain{i}", int(k)) for i, k in enumerate(cfg.data.classes)),
            train_per_class=cfg.data.train_per_class,
            test_per_class=cfg.data.test_per_class,
            height=cfg.data.height,
            width=cfg.data.width,
            channels=cfg.data.channels,
        )
        return generate_synthetic(spec, data_seed)
    train_path = resolve_path(config_path or ".", cfg.data.train_manifest)
    test_path = resolve_path(config_path or ".", cfg.data.test_manifest)
    return load_dataset(train_path, "train"), load_dataset(test_path, "test")


def build_schedule(cfg: ExperimentConfig, train_ds: Dataset, config_path=None) -> SessionSchedule:
    if cfg.schedule.kind == "file":
        return load_schedule(resolve_path(config_path or ".", cfg.schedule.path))
    builder = single_domain_schedule if cfg.schedule.kind == "single-domain" else one_way_schedule
    return builder(train_ds.class_domain_map, cfg.schedule.base_domains, cfg.schedule.shots)


# ---------------------------------------------------------------------------
# Lock-file echo
# ---------------------------------------------------------------------------


def config_sections(cfg: ExperimentConfig) -> dict[str, dict]:
    """Fully-resolved configuration as ordered {section: {key: value}}."""

    def clean(d: dict) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}

    loss = dataclasses.asdict(cfg.loss)
    loss = {"lambda" if k == "lam" else k: v for k, v in loss.items()}
    return {
        "data": clean(dataclasses.asdict(cfg.data)),
        "schedule": clean(dataclasses.asdict(cfg.schedule)),
        "model": clean(dataclasses.asdict(cfg.model)),
        "loss": clean(loss),
        "train": clean(dataclasses.asdict(cfg.train)),
        "augment": clean(dataclasses.asdict(cfg.augment)),
        "run": clean(dataclasses.asdict(cfg.run)),
    }


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ValidationError(f"cannot serialize {type(value).__name__} to TOML")


def dump_toml(sections: dict[str, dict]) -> str:
    lines = []
    for section, payload in sections.items():
        lines.append(f"[{section}]")
        for key, value in payload.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_lock(sections: dict[str, dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_toml(sections))
    return path
