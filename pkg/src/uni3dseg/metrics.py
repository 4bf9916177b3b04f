"""Evaluation: semantic IoU, scored instance AP, panoptic fusion and quality.

Per-class values that are undefined (no ground truth and no prediction) are
excluded from means rather than counted as 0 or 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .scenes import ClassCatalog


class MetricError(ValueError):
    """Inconsistent metric inputs."""


@dataclass
class InstancePrediction:
    mask: np.ndarray   # (N,) bool point mask
    class_id: int
    score: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise MetricError("instance prediction with an empty mask")
        if not 0.0 <= self.score <= 1.0:
            raise MetricError(f"score {self.score} outside [0, 1]")


@dataclass
class PanopticAssignment:
    class_ids: np.ndarray    # (N,)
    segment_ids: np.ndarray  # (N,) 0 for stuff, >=1 for thing segments

    @property
    def n_points(self) -> int:
        return self.class_ids.shape[0]


@dataclass
class MetricsReport:
    miou: float | None = None
    per_class_iou: dict[str, float] = field(default_factory=dict)
    map: float | None = None
    map50: float | None = None
    map25: float | None = None
    mprec50: float | None = None
    mrec50: float | None = None
    pq: float | None = None
    pq_things: float | None = None
    pq_stuff: float | None = None
    per_class_pq: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def _mean_or_none(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


# ---------------------------------------------------------------------------
# semantic
# ---------------------------------------------------------------------------

def semantic_miou(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Mean point-level IoU over classes present in gt or pred."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"semantic_miou: shapes differ, {pred.shape} vs {gt.shape}")
    per_class: dict[int, float] = {}
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = (p | g).sum()
        if union == 0:
            continue
        per_class[c] = float((p & g).sum() / union)
    miou = _mean_or_none(per_class.values())
    return miou, per_class


# ---------------------------------------------------------------------------
# instance
# ---------------------------------------------------------------------------

def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


def _class_table(preds, gts, class_id):
    """Score-ordered predictions of one class and their IoU matrix against gts."""
    class_preds = [p for p in preds if p.class_id == class_id]
    class_preds.sort(key=lambda p: -p.score)  # stable: insertion order on ties
    gt_masks = [g.mask for g in gts if g.class_id == class_id]
    if not class_preds or not gt_masks:
        return class_preds, gt_masks, np.zeros((len(class_preds), len(gt_masks)))
    p = np.stack([pr.mask for pr in class_preds]).astype(np.float64)
    g = np.stack(gt_masks).astype(np.float64)
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    return class_preds, gt_masks, inter / np.maximum(union, 1.0)


def _greedy_tp_flags(iou: np.ndarray, threshold: float) -> np.ndarray:
    """Per-prediction TP flags: each (score-ordered) row takes the best free gt."""
    n_pred, n_gt = iou.shape
    matched = np.zeros(n_gt, dtype=bool)
    flags = np.zeros(n_pred, dtype=bool)
    for i in range(n_pred):
        best_iou, best_g = 0.0, -1
        for g in range(n_gt):
            if not matched[g] and iou[i, g] > best_iou:
                best_iou, best_g = iou[i, g], g
        if best_g >= 0 and best_iou >= threshold:
            matched[best_g] = True
            flags[i] = True
    return flags


def _ap_from_flags(flags: np.ndarray, n_gt: int) -> float:
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    precision = tp / ranks
    recall = tp / n_gt
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ap_over_classes(preds, gts, iou_threshold, tables=None) -> float | None:
    classes = sorted({g.class_id for g in gts})
    aps = []
    for c in classes:
        class_preds, gt_masks, iou = tables[c] if tables else _class_table(preds, gts, c)
        if not class_preds:
            aps.append(0.0)
            continue
        flags = _greedy_tp_flags(iou, iou_threshold)
        aps.append(_ap_from_flags(flags, len(gt_masks)))
    return _mean_or_none(aps)


def instance_ap(preds, gts, iou_threshold: float) -> float | None:
    """Mean over classes (with ground truth) of average precision.

    AP is the area under the max-interpolated precision/recall curve built
    from score-ordered greedy matching at the given IoU threshold.
    """
    return _ap_over_classes(preds, gts, iou_threshold)


def map_suite(preds, gts):
    """(mAP over 0.50:0.05:0.95, mAP50, mAP25)."""
    tables = {c: _class_table(preds, gts, c) for c in {g.class_id for g in gts}}
    thresholds = np.arange(0.50, 0.96, 0.05)
    ap_by_thr = [_ap_over_classes(preds, gts, float(t), tables) for t in thresholds]
    return (_mean_or_none(ap_by_thr),
            _ap_over_classes(preds, gts, 0.50, tables),
            _ap_over_classes(preds, gts, 0.25, tables))


def prec_rec_at50(preds, gts):
    """Class-mean precision and recall from greedy one-to-one matching at IoU 0.5."""
    classes = sorted({g.class_id for g in gts} | {p.class_id for p in preds})
    precisions, recalls = [], []
    for c in classes:
        class_preds, gt_masks, iou = _class_table(preds, gts, c)
        tp = int(_greedy_tp_flags(iou, 0.5).sum())
        if class_preds:
            precisions.append(tp / len(class_preds))
        if gt_masks:
            recalls.append(tp / len(gt_masks))
    return _mean_or_none(precisions), _mean_or_none(recalls)


# ---------------------------------------------------------------------------
# panoptic
# ---------------------------------------------------------------------------

def panoptic_fuse(sem_logits: np.ndarray, preds, catalog: ClassCatalog,
                  score_thresh: float = 0.5, overlap_thresh: float = 0.5,
                  min_points: int = 10) -> PanopticAssignment:
    """Merge scored instances with semantic argmax into a single partition.

    Instances are visited by descending score; one is accepted when its score
    clears ``score_thresh`` and its still-unclaimed part is at least
    ``overlap_thresh`` of the mask and ``min_points`` points. Unclaimed points
    fall back to the semantic argmax with segment id 0 (thing classes keep
    their class).
    """
    n = sem_logits.shape[0]
    class_ids = np.empty(n, dtype=np.int64)
    segment_ids = np.zeros(n, dtype=np.int64)
    claimed = np.zeros(n, dtype=bool)
    next_segment = 1
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    for i in order:
        pred = preds[i]
        if pred.score < score_thresh:
            continue
        unclaimed = pred.mask & ~claimed
        size = int(unclaimed.sum())
        if size < min_points or size / pred.mask.sum() < overlap_thresh:
            continue
        class_ids[unclaimed] = pred.class_id
        segment_ids[unclaimed] = next_segment
        next_segment += 1
        claimed |= unclaimed
    rest = ~claimed
    class_ids[rest] = sem_logits[rest].argmax(axis=1)
    return PanopticAssignment(class_ids=class_ids, segment_ids=segment_ids)


def _segments(assign: PanopticAssignment):
    """Map (class, segment) -> point mask."""
    keys = assign.class_ids.astype(np.int64) * (assign.segment_ids.max() + 2) \
        + assign.segment_ids
    out = {}
    for key in np.unique(keys):
        mask = keys == key
        cls = int(assign.class_ids[np.argmax(mask)])
        seg = int(assign.segment_ids[np.argmax(mask)])
        out[(cls, seg)] = mask
    return out


def panoptic_quality(pred: PanopticAssignment, gt: PanopticAssignment,
                     catalog: ClassCatalog):
    """(PQ, PQ_things, PQ_stuff, per-class PQ) with strict IoU > 0.5 matching."""
    if pred.n_points != gt.n_points:
        raise MetricError(
            f"panoptic_quality: point counts differ, {pred.n_points} vs {gt.n_points}"
        )
    pred_segs = _segments(pred)
    gt_segs = _segments(gt)
    per_class: dict[int, float] = {}
    classes = sorted({c for c, _ in pred_segs} | {c for c, _ in gt_segs})
    for c in classes:
        p_list = [m for (pc, _), m in pred_segs.items() if pc == c]
        g_list = [m for (gc, _), m in gt_segs.items() if gc == c]
        matched_p = set()
        matched_g = set()
        iou_sum = 0.0
        for gi, gmask in enumerate(g_list):
            hits = 0
            for pi, pmask in enumerate(p_list):
                if pi in matched_p:
                    continue
                iou = _mask_iou(pmask, gmask)
                if iou > 0.5:
                    hits += 1
                    assert hits <= 1, "IoU > 0.5 must give a unique match"
                    matched_p.add(pi)
                    matched_g.add(gi)
                    iou_sum += iou
        tp = len(matched_g)
        fp = len(p_list) - len(matched_p)
        fn = len(g_list) - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        per_class[c] = iou_sum / denom if denom else 0.0
    pq = _mean_or_none(per_class.values())
    pq_things = _mean_or_none(v for c, v in per_class.items() if catalog.is_thing[c])
    pq_stuff = _mean_or_none(v for c, v in per_class.items() if not catalog.is_thing[c])
    return pq, pq_things, pq_stuff, per_class
