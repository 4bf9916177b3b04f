"""Run configuration: versioned JSON schema, validation, defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .optim import OptimizerSettings
from .scenes import AugmentConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class BankConfig:
    manifest: Path | None = None
    synth: dict | None = None          # k, l, d_e, sep, noise, seed, orthogonal
    normalize: bool = False

    def __post_init__(self):
        if (self.manifest is None) == (self.synth is None):
            raise ConfigError("query_bank needs exactly one of 'manifest' or 'synth'")


@dataclass
class SceneSource:
    directory: Path | None = None
    generate: dict | None = None       # spec (path), count, seed

    def __post_init__(self):
        if (self.directory is None) == (self.generate is None):
            raise ConfigError("scenes needs exactly one of 'dir' or 'generate'")


@dataclass
class ModelConfig:
    d: int = 32
    num_queries: int = 16
    fusion_layers: int = 2
    subset_size: int = 64
    voxel_size: float = 0.3

    def __post_init__(self):
        if min(self.d, self.num_queries, self.subset_size) < 1 or self.fusion_layers < 0:
            raise ConfigError("model dimensions out of range")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")


@dataclass
class RunConfig:
    catalog: Path
    bank: BankConfig
    scenes: SceneSource
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    seed: int = 0
    holdout_fraction: float = 0.2
    output_dir: Path = Path("out")

    def __post_init__(self):
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


def _require_path(base: Path, raw: str, what: str) -> Path:
    path = (base / raw).resolve() if not Path(raw).is_absolute() else Path(raw)
    if not path.exists():
        raise ConfigError(f"{what} path does not exist: {raw}")
    return path


def load_config(path) -> RunConfig:
    """Parse and validate a run-config JSON; relative paths anchor at the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {doc.get('schema')!r}")
    base = path.parent

    if "catalog" not in doc:
        raise ConfigError("config missing 'catalog'")
    catalog = _require_path(base, doc["catalog"], "catalog")

    bank_doc = doc.get("query_bank", {})
    manifest = bank_doc.get("manifest")
    bank = BankConfig(
        manifest=_require_path(base, manifest, "query manifest") if manifest else None,
        synth=bank_doc.get("synth"),
        normalize=bool(bank_doc.get("normalize", False)),
    )

    scene_doc = doc.get("scenes", {})
    directory = scene_doc.get("dir")
    generate = scene_doc.get("generate")
    if generate is not None:
        generate = dict(generate)
        generate["spec"] = _require_path(base, generate["spec"], "scene spec")
        if int(generate.get("count", 0)) < 1:
            raise ConfigError("scenes.generate.count must be >= 1")
    scenes = SceneSource(
        directory=_require_path(base, directory, "scene directory") if directory else None,
        generate=generate,
    )

    model_doc = doc.get("model", {})
    model = ModelConfig(
        d=int(model_doc.get("d", 32)),
        num_queries=int(model_doc.get("S", model_doc.get("num_queries", 16))),
        fusion_layers=int(model_doc.get("B", model_doc.get("fusion_layers", 2))),
        subset_size=int(model_doc.get("s", model_doc.get("subset_size", 64))),
        voxel_size=float(model_doc.get("voxel_size", 0.3)),
    )

    loss_doc = doc.get("loss", {})
    try:
        loss = LossWeights(
            lambda1=float(loss_doc.get("lambda1", 0.5)),
            lambda2=float(loss_doc.get("lambda2", 1.0)),
            lambda3=float(loss_doc.get("lambda3", 0.1)),
            tau=float(loss_doc.get("tau", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    opt_doc = doc.get("optimizer", {})
    try:
        optimizer = OptimizerSettings(
            lr=float(opt_doc.get("lr", 1e-4)),
            weight_decay=float(opt_doc.get("weight_decay", 0.05)),
            beta1=float(opt_doc.get("beta1", 0.9)),
            beta2=float(opt_doc.get("beta2", 0.999)),
            eps=float(opt_doc.get("eps", 1e-8)),
            power=float(opt_doc.get("power", 0.9)),
            batch_size=int(opt_doc.get("batch_size", 4)),
            steps=int(opt_doc.get("steps", 2000)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    aug_doc = doc.get("augment")
    if aug_doc is None or aug_doc.get("enabled", True):
        aug_doc = aug_doc or {}
        try:
            augment = AugmentConfig(
                flip_prob=float(aug_doc.get("flip_prob", 0.5)),
                rotation_max=float(aug_doc.get("rotation_max", 3.141592653589793)),
                scale_range=tuple(aug_doc.get("scale_range", (0.95, 1.05))),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        augment = None

    return RunConfig(
        catalog=catalog,
        bank=bank,
        scenes=scenes,
        model=model,
        loss=loss,
        optimizer=optimizer,
        augment=augment,
        seed=int(doc.get("seed", 0)),
        holdout_fraction=float(doc.get("holdout_fraction", 0.2)),
        output_dir=Path(doc.get("output_dir", base / "out")),
    )
