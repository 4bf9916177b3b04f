"""Scene-level inference: forward runs, prediction extraction, metric evaluation.

Evaluation concatenates scenes into one global point universe (with segment-id
offsets) so instance and panoptic metrics pool across the whole suite. A
worker pool sized by the ``U3DSEG_THREADS`` environment variable fans out
per-scene jobs; results always reduce in scene order.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .decoder import DecodeResult, decode
from .metrics import (
    InstancePrediction,
    MetricsReport,
    PanopticAssignment,
    map_suite,
    panoptic_fuse,
    panoptic_quality,
    prec_rec_at50,
    semantic_miou,
)
from .model import Model
from .ply import color_palette, write_ply
from .queries import QueryBank, load_query_bank, synth_query_bank
from .scenes import ClassCatalog, PointCloud, SceneSpec, generate_scene, load_scene, voxelize
from .tensor import Tensor


def worker_count() -> int:
    raw = os.environ.get("U3DSEG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"U3DSEG_THREADS must be an integer, got {raw!r}") from None
    return min(4, os.cpu_count() or 1)


def _pool_map(fn, items):
    """Map preserving order; trivial sequentially for a single worker."""
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def mix_seed(*parts: int) -> int:
    """Deterministic integer mixing for derived seed streams."""
    acc = 0x9E3779B9
    for p in parts:
        acc ^= (int(p) + 0x7F4A7C15 + ((acc << 6) & 0xFFFFFFFF) + (acc >> 2)) & 0xFFFFFFFF
        acc = (acc * 0x01000193) & 0xFFFFFFFF
    return acc & 0x7FFFFFFF


def resolve_bank(config: RunConfig, catalog: ClassCatalog) -> QueryBank:
    if config.bank.manifest is not None:
        bank = load_query_bank(config.bank.manifest)
        if bank.catalog.names != catalog.names:
            raise ConfigError("query bank catalog does not match the run catalog")
    else:
        synth = dict(config.bank.synth)
        bank = synth_query_bank(
            catalog,
            k=int(synth.get("k", 4)),
            l=int(synth.get("l", 3)),
            d_e=int(synth.get("d_e", 32)),
            sep=float(synth.get("sep", 4.0)),
            noise=float(synth.get("noise", 0.1)),
            seed=int(synth.get("seed", 0)),
            orthogonal=bool(synth.get("orthogonal", True)),
        )
    if config.bank.normalize:
        bank = bank.normalized()
    return bank


def prepare_scenes(config: RunConfig) -> list[PointCloud]:
    if config.scenes.directory is not None:
        return load_scene_dir(config.scenes.directory)
    gen = config.scenes.generate
    spec = SceneSpec.load(gen["spec"])
    count = int(gen["count"])
    base_seed = int(gen.get("seed", 0))
    return _pool_map(lambda i: generate_scene(spec, mix_seed(base_seed, i)), range(count))


def load_scene_dir(directory) -> list[PointCloud]:
    directory = Path(directory)
    index = directory / "index.json"
    if index.exists():
        names = json.loads(index.read_text())["scenes"]
        paths = [directory / n for n in names]
    else:
        paths = sorted(directory.glob("*.u3dt"))
    if not paths:
        raise ConfigError(f"no scene files found in {directory}")
    return _pool_map(load_scene, paths)


def _grid_components(cells: np.ndarray) -> list[np.ndarray]:
    """Group rows of integer cell coordinates into 26-connected components."""
    n = len(cells)
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        near = np.flatnonzero(np.abs(cells - cells[i]).max(axis=1) <= 1)
        ri = find(i)
        for j in near:
            rj = find(j)
            if ri != rj:
                parent[rj] = ri
    roots = np.array([find(i) for i in range(n)])
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


def extract_instance_predictions(result: DecodeResult, catalog: ClassCatalog,
                                 voxel_size: float, min_cells: int = 2,
                                 dedup_iou: float = 0.95) -> list[InstancePrediction]:
    """Turn decoded mask logits into scored, thing-class point predictions.

    Each query's thresholded superpoint mask is split into grid-connected
    components (objects never touch, so a mask spanning several objects
    separates here), then near-identical masks are deduplicated keeping the
    higher score.
    """
    from . import tensor as T

    probs = T.softmax_rows(Tensor(result.bundle.cls_ins.data)).data  # (S, C+1)
    mask_probs = 1.0 / (1.0 + np.exp(-result.bundle.m_ins.data))     # (M, S)
    assignment = result.scene.assignment
    cell_coords = np.floor(result.scene.features_in[:, :3] / voxel_size).astype(np.int64)
    raw = []
    for s in range(probs.shape[0]):
        cls = int(np.argmax(probs[s, :-1]))
        if not catalog.is_thing[cls]:
            continue
        sp_mask = mask_probs[:, s] > 0.5
        if not sp_mask.any():
            continue
        rows = np.flatnonzero(sp_mask)
        for comp in _grid_components(cell_coords[rows]):
            comp_rows = rows[comp]
            if comp_rows.size < min_cells:
                continue
            comp_mask = np.zeros(sp_mask.size, dtype=bool)
            comp_mask[comp_rows] = True
            confidence = float(probs[s, cls] * mask_probs[comp_rows, s].mean())
            point_mask = comp_mask[assignment]
            if point_mask.any():
                raw.append(InstancePrediction(mask=point_mask, class_id=cls,
                                              score=min(confidence, 1.0)))
    preds: list[InstancePrediction] = []
    for p in sorted(raw, key=lambda p: -p.score):
        dup = False
        for q in preds:
            union = (p.mask | q.mask).sum()
            if union and (p.mask & q.mask).sum() / union >= dedup_iou:
                dup = True
                break
        if not dup:
            preds.append(p)
    return preds


def gt_instances(pc: PointCloud) -> list[InstancePrediction]:
    out = []
    for gid in np.unique(pc.instance_ids):
        if gid < 1:
            continue
        mask = pc.instance_ids == gid
        cls_ids, counts = np.unique(pc.class_labels[mask], return_counts=True)
        out.append(InstancePrediction(mask=mask, class_id=int(cls_ids[counts.argmax()]),
                                      score=1.0))
    return out


def gt_panoptic(pc: PointCloud) -> PanopticAssignment:
    return PanopticAssignment(class_ids=pc.class_labels.copy(),
                              segment_ids=pc.instance_ids.copy())


@dataclass
class SceneEval:
    sem_pred: np.ndarray
    sem_gt: np.ndarray
    preds: list[InstancePrediction]
    gts: list[InstancePrediction]
    pan_pred: PanopticAssignment
    pan_gt: PanopticAssignment


def evaluate_scene(pc: PointCloud, bank: QueryBank, model: Model, seed: int,
                   catalog: ClassCatalog, oracle: bool = False,
                   fuse_kwargs: dict | None = None) -> SceneEval:
    gts = gt_instances(pc)
    pan_gt = gt_panoptic(pc)
    if oracle:
        return SceneEval(sem_pred=pc.class_labels.copy(), sem_gt=pc.class_labels,
                         preds=[InstancePrediction(g.mask.copy(), g.class_id, 1.0)
                                for g in gts],
                         gts=gts, pan_pred=gt_panoptic(pc), pan_gt=pan_gt)
    scene = voxelize(pc, model.hp.voxel_size)
    result = decode(scene, bank, model, seed=seed)
    sem_logits = result.point_semantic_logits()
    preds = extract_instance_predictions(result, catalog, model.hp.voxel_size)
    pan_pred = panoptic_fuse(sem_logits, preds, catalog, **(fuse_kwargs or {}))
    return SceneEval(sem_pred=sem_logits.argmax(axis=1), sem_gt=pc.class_labels,
                     preds=preds, gts=gts, pan_pred=pan_pred, pan_gt=pan_gt)


def _concat_panoptic(parts: list[PanopticAssignment]) -> PanopticAssignment:
    class_ids, segment_ids = [], []
    offset = 0
    for p in parts:
        seg = p.segment_ids.copy()
        seg[seg > 0] += offset
        if seg.size:
            offset = max(offset, int(seg.max()))
        class_ids.append(p.class_ids)
        segment_ids.append(seg)
    return PanopticAssignment(class_ids=np.concatenate(class_ids),
                              segment_ids=np.concatenate(segment_ids))


def _offset_instances(items: list[InstancePrediction], start: int, total: int
                      ) -> list[InstancePrediction]:
    out = []
    for it in items:
        mask = np.zeros(total, dtype=bool)
        mask[start:start + it.mask.size] = it.mask
        out.append(InstancePrediction(mask=mask, class_id=it.class_id, score=it.score))
    return out


def evaluate_suite(clouds: list[PointCloud], bank: QueryBank, model: Model,
                   catalog: ClassCatalog, eval_seed: int = 0, oracle: bool = False,
                   fuse_kwargs: dict | None = None) -> MetricsReport:
    """Pooled metrics over a scene suite; deterministic for a fixed eval seed."""
    evals = _pool_map(
        lambda i: evaluate_scene(clouds[i], bank, model, mix_seed(eval_seed, 0xE7A1, i),
                                 catalog, oracle=oracle, fuse_kwargs=fuse_kwargs),
        range(len(clouds)),
    )
    sizes = [e.sem_gt.size for e in evals]
    total = int(np.sum(sizes))
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1])).astype(int)

    sem_pred = np.concatenate([e.sem_pred for e in evals])
    sem_gt = np.concatenate([e.sem_gt for e in evals])
    preds, gts = [], []
    for e, start in zip(evals, starts):
        preds.extend(_offset_instances(e.preds, start, total))
        gts.extend(_offset_instances(e.gts, start, total))
    pan_pred = _concat_panoptic([e.pan_pred for e in evals])
    pan_gt = _concat_panoptic([e.pan_gt for e in evals])

    miou, per_iou = semantic_miou(sem_pred, sem_gt, catalog.num_classes)
    mean_ap, ap50, ap25 = map_suite(preds, gts)
    prec50, rec50 = prec_rec_at50(preds, gts)
    pq, pq_th, pq_st, per_pq = panoptic_quality(pan_pred, pan_gt, catalog)
    return MetricsReport(
        miou=miou,
        per_class_iou={catalog.names[c]: v for c, v in per_iou.items()},
        map=mean_ap, map50=ap50, map25=ap25, mprec50=prec50, mrec50=rec50,
        pq=pq, pq_things=pq_th, pq_stuff=pq_st,
        per_class_pq={catalog.names[c]: v for c, v in per_pq.items()},
    )


def predict_scene(pc: PointCloud, bank: QueryBank, model: Model, catalog: ClassCatalog,
                  out_prefix, seed: int = 0, fuse_kwargs: dict | None = None) -> dict:
    """Write semantic/instance/panoptic PLY colorings and a JSON assignment dump."""
    scene = voxelize(pc, model.hp.voxel_size)
    result = decode(scene, bank, model, seed=seed)
    sem_logits = result.point_semantic_logits()
    sem_classes = sem_logits.argmax(axis=1)
    preds = extract_instance_predictions(result, catalog, model.hp.voxel_size)
    pan = panoptic_fuse(sem_logits, preds, catalog, **(fuse_kwargs or {}))

    coords = pc.points[:, :3]
    class_colors = color_palette(catalog.num_classes)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)

    write_ply(f"{out_prefix}_semantic.ply", coords, class_colors[sem_classes])

    n_segments = int(pan.segment_ids.max()) + 1
    seg_palette = color_palette(n_segments + 1)
    instance_colors = np.full((pc.n_points, 3), 60, dtype=np.uint8)
    thing = pan.segment_ids > 0
    instance_colors[thing] = seg_palette[pan.segment_ids[thing] % len(seg_palette)]
    write_ply(f"{out_prefix}_instance.ply", coords, instance_colors)

    pan_colors = class_colors[pan.class_ids]
    pan_colors[thing] = seg_palette[pan.segment_ids[thing] % len(seg_palette)]
    write_ply(f"{out_prefix}_panoptic.ply", coords, pan_colors)

    assignments = {
        "semantic": sem_classes.tolist(),
        "panoptic_class": pan.class_ids.tolist(),
        "panoptic_segment": pan.segment_ids.tolist(),
        "instances": [
            {"class": catalog.names[p.class_id], "score": round(p.score, 6),
             "size": int(p.mask.sum())}
            for p in preds
        ],
    }
    Path(f"{out_prefix}_assignments.json").write_text(
        json.dumps(assignments, sort_keys=True) + "\n")
    return assignments
