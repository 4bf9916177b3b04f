"""Training loop: gradient accumulation over scene batches, polynomial decay,
JSONL loss logging, resumable checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import decode
from .losses import targets_from_scene, total_loss
from .metrics import MetricsReport
from .model import HyperParams, Model, init_model, load_checkpoint_full, save_checkpoint
from .optim import AdamW, polynomial_lr
from .pipeline import evaluate_suite, mix_seed, prepare_scenes, resolve_bank
from .queries import QueryBank
from .scenes import ClassCatalog, PointCloud, augment, voxelize

LOSS_KEYS = ("bce", "dice", "ce_ins", "ce_sem", "svc", "total")


@dataclass
class TrainOutcome:
    model: Model
    checkpoint_path: Path
    log_path: Path
    summary: dict


def split_scenes(clouds: list[PointCloud], holdout_fraction: float
                 ) -> tuple[list[PointCloud], list[PointCloud]]:
    n_holdout = int(round(len(clouds) * holdout_fraction))
    if n_holdout == 0:
        return clouds, []
    return clouds[:-n_holdout], clouds[-n_holdout:]


def build_model(config: RunConfig, catalog: ClassCatalog, bank: QueryBank) -> Model:
    hp = HyperParams(
        d=config.model.d,
        num_queries=config.model.num_queries,
        fusion_layers=config.model.fusion_layers,
        subset_size=config.model.subset_size,
        num_classes=catalog.num_classes,
        descriptions_per_class=bank.num_descriptions,
        images_per_class=bank.num_images,
        d_e=bank.d_e,
        voxel_size=config.model.voxel_size,
    )
    return init_model(hp, seed=config.seed)


def train_step(model: Model, bank: QueryBank, clouds: list[PointCloud], step: int,
               config: RunConfig) -> dict[str, float]:
    """One optimizer step over a gradient-accumulated scene batch."""
    batch = config.optimizer.batch_size
    totals = {k: 0.0 for k in LOSS_KEYS}
    T.zero_grads(model.parameters())
    for j in range(batch):
        idx = (step * batch + j) % len(clouds)
        pc = clouds[idx]
        if config.augment is not None:
            pc = augment(pc, config.augment, seed=mix_seed(config.seed, 0xA4C, step, j))
        scene = voxelize(pc, model.hp.voxel_size)
        targets = targets_from_scene(scene, bank.catalog)
        result = decode(scene, bank, model, seed=mix_seed(config.seed, 0xDEC, step, j))
        breakdown = total_loss(result.bundle, result.m_sem, targets, scene.class_labels,
                               result.x_enh, result.q_t_proj, result.q_o_proj, config.loss)
        T.backward(T.scale(breakdown.total, 1.0 / batch))
        for k in LOSS_KEYS:
            totals[k] += breakdown.components[k] / batch
    return totals


def run_training(config: RunConfig, resume: Path | None = None,
                 eval_after: bool = False, stop_after: int | None = None) -> TrainOutcome:
    """Train per config; ``stop_after`` interrupts early (resume picks up exactly)."""
    catalog = ClassCatalog.load(config.catalog)
    bank = resolve_bank(config, catalog)
    clouds = prepare_scenes(config)
    train_clouds, holdout_clouds = split_scenes(clouds, config.holdout_fraction)
    if not train_clouds:
        raise ValueError("no training scenes after holdout split")

    model = build_model(config, catalog, bank)
    optimizer = AdamW(model.parameters(), config.optimizer)
    start_step = 0
    if resume is not None:
        restored, extras, header = load_checkpoint_full(resume)
        if restored.hp != model.hp:
            raise ValueError(
                f"resume checkpoint hyperparameters {restored.hp} do not match "
                f"config-derived {model.hp}"
            )
        model = restored
        optimizer = AdamW(model.parameters(), config.optimizer)
        start_step = int(header.get("step", 0))
        if extras:
            optimizer.load_state_arrays(extras, start_step)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.jsonl"
    mode = "a" if (resume is not None and log_path.exists()) else "w"

    steps = config.optimizer.steps
    end_step = steps if stop_after is None else min(steps, stop_after)
    with open(log_path, mode) as log:
        for step in range(start_step, end_step):
            lr = polynomial_lr(config.optimizer.lr, step, steps, config.optimizer.power)
            components = train_step(model, bank, train_clouds, step, config)
            optimizer.step(lr)
            record = {"step": step, "lr": round(lr, 12)}
            record.update({k: round(v, 9) for k, v in components.items()})
            log.write(json.dumps(record, sort_keys=True) + "\n")

    checkpoint_path = out_dir / "checkpoint.u3dt"
    save_checkpoint(checkpoint_path, model, extra_arrays=optimizer.state_arrays(),
                    extra_header={"step": end_step})

    summary = {
        "steps": steps,
        "train_scenes": len(train_clouds),
        "holdout_scenes": len(holdout_clouds),
        "window_means": window_means(log_path, window=100),
    }
    if eval_after and holdout_clouds:
        report = evaluate_suite(holdout_clouds, bank, model, catalog,
                                eval_seed=config.seed)
        summary["holdout_metrics"] = json.loads(report.to_json())
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return TrainOutcome(model=model, checkpoint_path=checkpoint_path,
                        log_path=log_path, summary=summary)


def window_means(log_path, window: int = 100) -> list[float]:
    """Mean total loss per consecutive window of steps, in step order."""
    totals = []
    with open(log_path) as fh:
        for line in fh:
            totals.append(json.loads(line)["total"])
    return [float(np.mean(totals[i:i + window])) for i in range(0, len(totals), window)]


def evaluate_checkpoint(config: RunConfig, model: Model, clouds: list[PointCloud],
                        oracle: bool = False) -> MetricsReport:
    catalog = ClassCatalog.load(config.catalog)
    bank = resolve_bank(config, catalog)
    if bank.d_e != model.hp.d_e or catalog.num_classes != model.hp.num_classes:
        raise ValueError(
            f"checkpoint dimensions (d_e={model.hp.d_e}, C={model.hp.num_classes}) do not "
            f"match config bank (d_e={bank.d_e}, C={catalog.num_classes})"
        )
    return evaluate_suite(clouds, bank, model, catalog, eval_seed=config.seed,
                          oracle=oracle)
