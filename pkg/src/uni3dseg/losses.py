"""Training objectives: mask losses, contrastive alignment, query matching.

The total objective is

    L = L_bce + L_dice + l1 * L_ce_ins + l2 * L_ce_sem + l3 * L_svc

where ground-truth instances are assigned to queries by minimum-cost
matching over a (BCE + dice + l1 * CE) cost, matched queries receive mask
and class supervision, unmatched queries are pushed to the no-object class,
semantic cross-entropy supervises the ensembled per-class logits, and the
contrastive term pulls enhanced features toward the projected embeddings of
their class while pushing away every other embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .scenes import ClassCatalog, SuperpointScene
from .tensor import ShapeError, Tensor

DICE_EPS = 1e-7


class LossError(ValueError):
    """Inconsistent loss inputs."""


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 0.1
    tau: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise LossError("temperature tau must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise LossError("loss weights must be nonnegative")


@dataclass
class InstanceTargets:
    """Ground-truth thing instances at superpoint resolution."""

    masks: np.ndarray    # (G, M) binary
    classes: np.ndarray  # (G,) thing class ids

    @property
    def count(self) -> int:
        return self.masks.shape[0]


def targets_from_scene(scene: SuperpointScene, catalog: ClassCatalog) -> InstanceTargets:
    """Extract per-instance superpoint masks and majority classes from labels."""
    masks, classes = [], []
    for gid in np.unique(scene.instance_ids):
        if gid < 1:
            continue
        mask = scene.instance_ids == gid
        cls_ids, counts = np.unique(scene.class_labels[mask], return_counts=True)
        cls = int(cls_ids[counts.argmax()])
        if not catalog.is_thing[cls]:
            continue
        masks.append(mask.astype(np.float64))
        classes.append(cls)
    if not masks:
        m = scene.num_superpoints
        return InstanceTargets(masks=np.zeros((0, m)), classes=np.zeros(0, dtype=np.int64))
    return InstanceTargets(masks=np.stack(masks), classes=np.asarray(classes, dtype=np.int64))


# ---------------------------------------------------------------------------
# individual objectives
# ---------------------------------------------------------------------------

def dice_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Soft dice: 1 - 2*sum(p*g) / (sum(p) + sum(g) + eps). Inputs in [0, 1]."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossError(f"dice: prediction shape {pred.shape} != target {target.shape}")
    overlap = T.reduce_sum(T.mul(pred, Tensor(target)))
    denom = T.add(T.reduce_sum(pred), Tensor(target.sum() + DICE_EPS))
    return T.sub(Tensor(1.0), T.div(T.scale(overlap, 2.0), denom))


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-safe softplus form."""
    target = np.asarray(target, dtype=np.float64)
    if logits.shape != target.shape:
        raise LossError(f"bce: logit shape {logits.shape} != target {target.shape}")
    abs_z = T.add(T.relu(logits), T.relu(T.neg(logits)))
    softplus = T.log(T.add(T.exp(T.neg(abs_z)), Tensor(np.ones(()))))
    per_elem = T.add(T.sub(T.relu(logits), T.mul(logits, Tensor(target))), softplus)
    return T.reduce_mean(per_elem)


def _log_sum_exp_rows(logits: Tensor) -> Tensor:
    """Row-wise logsumexp; the shift uses a detached max so gradients stay exact."""
    rows = logits.shape[0]
    shift = T.reduce_max_axis(logits, axis=1).detach()
    shifted = T.sub(logits, T.reshape(shift, (rows, 1)))
    return T.add(T.log(T.reduce_sum(T.exp(shifted), axis=1)), shift)


def cross_entropy(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the target column per row."""
    ids = np.asarray(target_ids, dtype=np.int64)
    rows, cols = logits.shape
    if ids.shape != (rows,):
        raise LossError(f"cross_entropy: need {rows} target ids, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cols):
        raise LossError(f"cross_entropy: target id out of range for {cols} classes")
    onehot = np.zeros((rows, cols))
    onehot[np.arange(rows), ids] = 1.0
    picked = T.reduce_sum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.reduce_mean(T.sub(_log_sum_exp_rows(logits), picked))


def info_nce(features: Tensor, queries: Tensor, labels: np.ndarray, tau: float) -> Tensor:
    """Contrastive alignment of rows of ``features`` with class embedding stacks.

    ``queries`` is (C, slots, d); similarities are inner products. For each
    feature row the denominator runs over all C*slots embeddings, the
    per-positive terms are averaged over the row's class slots, and the
    result is averaged over rows.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m, d = features.shape
    c, slots, dq = queries.shape
    if dq != d:
        raise LossError(f"info_nce: feature width {d} != query width {dq}")
    if labels.shape != (m,):
        raise LossError(f"info_nce: need {m} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LossError(f"info_nce: label references a class without embeddings (C={c})")
    flat = T.reshape(queries, (c * slots, d))
    sims = T.scale(T.matmul(features, T.transpose(flat)), 1.0 / tau)
    lse = _log_sum_exp_rows(sims)
    positives = np.zeros((m, c * slots))
    for i, cls in enumerate(labels):
        positives[i, cls * slots:(cls + 1) * slots] = 1.0 / slots
    mean_pos = T.reduce_sum(T.mul(sims, Tensor(positives)), axis=1)
    return T.reduce_mean(T.sub(lse, mean_pos))


def svc_loss(x_enh: Tensor, q_t: Tensor, q_o: Tensor, labels: np.ndarray,
             tau: float) -> Tensor:
    """Semantic-visual contrastive loss over both modalities."""
    return T.add(info_nce(x_enh, q_t, labels, tau), info_nce(x_enh, q_o, labels, tau))


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def _optimal_cost(cost: np.ndarray) -> float:
    if min(cost.shape) == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost injective row-to-column assignment.

    Rectangular matrices are fine: exactly min(S, G) pairs are returned and
    the rest stay unmatched. Among equal-cost optima the lexicographically
    smallest assignment (scanning rows in order, preferring low columns, and
    preferring matched over unmatched) is chosen.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"hungarian_match expects a 2-d cost matrix, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise LossError("hungarian_match requires finite costs")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return []

    best = _optimal_cost(cost)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-9 * scale * max(n_rows, n_cols)

    pairs: list[tuple[int, int]] = []
    free_cols = list(range(n_cols))
    free_rows = list(range(n_rows))
    fixed = 0.0
    target_pairs = min(n_rows, n_cols)
    for r in range(n_rows):
        if len(pairs) == target_pairs:
            break
        free_rows.remove(r)
        rows_after = free_rows
        chosen = None
        for c in free_cols:
            rest_cols = [x for x in free_cols if x != c]
            rest = _optimal_cost(cost[np.ix_(rows_after, rest_cols)]) if rows_after and rest_cols else 0.0
            if fixed + cost[r, c] + rest <= best + tol:
                chosen = c
                break
        if chosen is None:
            # leaving r unmatched must still be optimal (possible when S > G)
            continue
        pairs.append((r, chosen))
        free_cols.remove(chosen)
        fixed += cost[r, chosen]
    return pairs


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

def combine_components(bce: Tensor, dice: Tensor, ce_ins: Tensor, ce_sem: Tensor,
                       svc: Tensor, w: LossWeights) -> Tensor:
    """Weighted sum of the five loss components."""
    total = T.add(bce, dice)
    total = T.add(total, T.scale(ce_ins, w.lambda1))
    total = T.add(total, T.scale(ce_sem, w.lambda2))
    return T.add(total, T.scale(svc, w.lambda3))


def _softplus_np(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def matching_cost_matrix(mask_logits: np.ndarray, cls_logits: np.ndarray,
                         targets: InstanceTargets, lambda1: float) -> np.ndarray:
    """(S, G) assignment costs mirroring the supervised loss: BCE + dice + l1*CE."""
    z = mask_logits  # (M, S)
    g = targets.masks.T  # (M, G)
    m = z.shape[0]
    base = (_softplus_np(z)).mean(axis=0)  # relu(z) + log1p(exp(-|z|)) averaged
    bce = base[:, None] - (z.T @ g) / m  # (S, G)

    p = 1.0 / (1.0 + np.exp(-z))
    overlap = p.T @ g
    denom = p.sum(axis=0)[:, None] + g.sum(axis=0)[None, :] + DICE_EPS
    dice = 1.0 - 2.0 * overlap / denom

    shifted = cls_logits - cls_logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = -logp[:, targets.classes]  # (S, G)
    return bce + dice + lambda1 * ce


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float]
    matches: list[tuple[int, int]]


def total_loss(bundle, m_sem: Tensor, targets: InstanceTargets, labels: np.ndarray,
               x_enh: Tensor, q_t: Tensor, q_o: Tensor, w: LossWeights) -> LossBreakdown:
    """Assemble the full objective for one scene.

    ``labels`` are per-superpoint class ids; ``q_t``/``q_o`` are the projected
    (pre-fusion) query stacks used by the contrastive term.
    """
    n_queries = bundle.cls_ins.shape[0]
    num_classes = bundle.cls_ins.shape[1] - 1

    cost = matching_cost_matrix(bundle.m_ins.data, bundle.cls_ins.data, targets, w.lambda1)
    matches = hungarian_match(cost)

    cls_targets = np.full(n_queries, num_classes, dtype=np.int64)
    if matches:
        cols = T.transpose(bundle.m_ins)
        bce_terms, dice_terms = [], []
        for q_idx, g_idx in matches:
            cls_targets[q_idx] = targets.classes[g_idx]
            col = T.reshape(T.index_select(cols, [q_idx]), (-1,))
            gmask = targets.masks[g_idx]
            bce_terms.append(bce_loss(col, gmask))
            dice_terms.append(dice_loss(T.sigmoid(col), gmask))
        inv = 1.0 / len(matches)
        bce = T.scale(_sum_tensors(bce_terms), inv)
        dice = T.scale(_sum_tensors(dice_terms), inv)
    else:
        bce = Tensor(0.0)
        dice = Tensor(0.0)

    ce_ins = cross_entropy(bundle.cls_ins, cls_targets)
    ce_sem = cross_entropy(m_sem, labels)
    svc = svc_loss(x_enh, q_t, q_o, labels, w.tau)

    total = combine_components(bce, dice, ce_ins, ce_sem, svc, w)
    components = {
        "bce": bce.item(), "dice": dice.item(), "ce_ins": ce_ins.item(),
        "ce_sem": ce_sem.item(), "svc": svc.item(), "total": total.item(),
    }
    return LossBreakdown(total=total, components=components, matches=matches)


def _sum_tensors(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc
