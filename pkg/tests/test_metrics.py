"""Metrics: frozen examples, invariants, exhaustive small-instance oracles."""

import itertools

import numpy as np
import pytest

from uni3dseg.metrics import (
    InstancePrediction,
    MetricError,
    PanopticAssignment,
    instance_ap,
    map_suite,
    panoptic_fuse,
    panoptic_quality,
    prec_rec_at50,
    semantic_miou,
)
from uni3dseg.scenes import ClassCatalog


def catalog4():
    return ClassCatalog(names=["floor", "wall", "crate", "ball"],
                        is_thing=[False, False, True, True])


# ---------------------------------------------------------------------------
# oracles (independent reimplementations)
# ---------------------------------------------------------------------------

def oracle_miou(pred, gt, num_classes):
    ious = []
    for c in range(num_classes):
        p = set(np.flatnonzero(pred == c).tolist())
        g = set(np.flatnonzero(gt == c).tolist())
        if not p and not g:
            continue
        ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious) if ious else None


def oracle_ap_single_class(scored_masks, gt_masks, threshold):
    """AP by explicit enumeration of every prefix of the ranked prediction list."""
    order = sorted(range(len(scored_masks)), key=lambda i: -scored_masks[i][0])
    matched = set()
    is_tp = []
    for i in order:
        _, mask = scored_masks[i]
        best, best_g = 0.0, None
        for g, gmask in enumerate(gt_masks):
            if g in matched:
                continue
            inter = np.logical_and(mask, gmask).sum()
            union = np.logical_or(mask, gmask).sum()
            iou = inter / union if union else 0.0
            if iou > best:
                best, best_g = iou, g
        if best_g is not None and best >= threshold:
            matched.add(best_g)
            is_tp.append(True)
        else:
            is_tp.append(False)
    # integrate precision envelope over recall by scanning every cut point
    n_gt = len(gt_masks)
    points = []
    tp = 0
    for i, flag in enumerate(is_tp, start=1):
        tp += flag
        points.append((tp / n_gt, tp / i))
    ap = 0.0
    prev_r = 0.0
    for r, _ in points:
        if r > prev_r:
            env = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * env
            prev_r = r
    return ap


def oracle_pq_class(pred_segs, gt_segs):
    """PQ for one class by exhaustive search over injective matchings."""
    best_pairs = []
    best_iou = -1.0
    p_idx = range(len(pred_segs))
    for k in range(min(len(pred_segs), len(gt_segs)) + 1):
        for p_combo in itertools.permutations(p_idx, k):
            for g_combo in itertools.combinations(range(len(gt_segs)), k):
                ious = []
                ok = True
                for p, g in zip(p_combo, g_combo):
                    inter = np.logical_and(pred_segs[p], gt_segs[g]).sum()
                    union = np.logical_or(pred_segs[p], gt_segs[g]).sum()
                    iou = inter / union if union else 0.0
                    if iou <= 0.5:
                        ok = False
                        break
                    ious.append(iou)
                if ok and sum(ious) > best_iou:
                    best_iou = sum(ious)
                    best_pairs = list(zip(p_combo, g_combo))
    tp = len(best_pairs)
    fp = len(pred_segs) - tp
    fn = len(gt_segs) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    return (max(best_iou, 0.0) / denom) if denom else 0.0


def random_panoptic(rng, n=60, num_classes=4, things=(2, 3), max_segments=4):
    class_ids = rng.integers(0, num_classes, n)
    segment_ids = np.zeros(n, dtype=np.int64)
    next_seg = 1
    for c in things:
        idx = np.flatnonzero(class_ids == c)
        if idx.size == 0:
            continue
        n_seg = int(rng.integers(1, max_segments + 1))
        splits = rng.integers(0, n_seg, idx.size)
        for s in range(n_seg):
            members = idx[splits == s]
            if members.size:
                segment_ids[members] = next_seg
                next_seg += 1
    return PanopticAssignment(class_ids=class_ids, segment_ids=segment_ids)


# ---------------------------------------------------------------------------
# semantic
# ---------------------------------------------------------------------------

class TestSemanticMiou:
    def test_perfect(self):
        gt = np.array([0, 1, 2, 2, 1])
        miou, _ = semantic_miou(gt.copy(), gt, 3)
        assert miou == 1.0

    def test_two_class_average(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 0, 1, 0])
        miou, per_class = semantic_miou(pred, gt, 2)
        assert per_class[1] == pytest.approx(0.5)
        assert miou == pytest.approx((2 / 3 + 0.5) / 2)

    def test_set_arithmetic_example(self):
        # prediction marks points {1,2}, truth marks {2,3}: IoU = 1/3
        pred = np.array([9, 0, 0, 9], dtype=int)
        gt = np.array([9, 9, 0, 0], dtype=int)
        pred[pred == 9] = 1
        gt[gt == 9] = 1
        # class 0: pred {1,2}, gt {2,3}
        _, per_class = semantic_miou(pred, gt, 2)
        assert per_class[0] == pytest.approx(1 / 3)

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            semantic_miou(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)

    def test_matches_oracle_on_random_labelings(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            c = int(rng.integers(1, 6))
            pred = rng.integers(0, c, n)
            gt = rng.integers(0, c, n)
            miou, _ = semantic_miou(pred, gt, c)
            assert miou == pytest.approx(oracle_miou(pred, gt, c), abs=1e-12)


# ---------------------------------------------------------------------------
# instance
# ---------------------------------------------------------------------------

def mask_from(indices, n):
    m = np.zeros(n, dtype=bool)
    m[list(indices)] = True
    return m


class TestInstanceAP:
    def test_perfect_single_prediction(self):
        n = 20
        gt_mask = mask_from(range(5), n)
        gts = [InstancePrediction(gt_mask, 2, 1.0)]
        preds = [InstancePrediction(gt_mask.copy(), 2, 0.9)]
        for thr in np.arange(0.5, 0.96, 0.05):
            assert instance_ap(preds, gts, float(thr)) == pytest.approx(1.0)

    def test_worked_example_half_ap(self):
        n = 30
        gts = [InstancePrediction(mask_from(range(5), n), 2, 1.0),
               InstancePrediction(mask_from(range(10, 15), n), 2, 1.0)]
        preds = [InstancePrediction(mask_from(range(5), n), 2, 0.9),
                 InstancePrediction(mask_from(range(20, 25), n), 2, 0.8)]
        assert instance_ap(preds, gts, 0.5) == pytest.approx(0.5)

    def test_below_threshold_gives_zero(self):
        n = 20
        gt = mask_from(range(0, 11), n)       # 11 points
        pred = mask_from(range(0, 5), n)      # IoU = 5/11 = 0.4545 < 0.5
        gts = [InstancePrediction(gt, 2, 1.0)]
        preds = [InstancePrediction(pred, 2, 0.9)]
        assert instance_ap(preds, gts, 0.5) == 0.0

    def test_map_suite_ordering(self):
        rng = np.random.default_rng(1)
        n = 50
        gts, preds = [], []
        for i in range(3):
            base = rng.choice(n, 8, replace=False)
            gts.append(InstancePrediction(mask_from(base, n), 2, 1.0))
            noisy = base[:6]
            preds.append(InstancePrediction(mask_from(noisy, n), 2, float(rng.uniform(0.5, 1))))
        m, m50, m25 = map_suite(preds, gts)
        assert m25 >= m50 >= m
        for v in (m, m50, m25):
            assert 0.0 <= v <= 1.0

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(2)
        n = 40
        for trial in range(30):
            n_gt = int(rng.integers(1, 5))
            n_pred = int(rng.integers(0, 6))
            gt_masks = []
            used = np.zeros(n, dtype=bool)
            for _ in range(n_gt):
                avail = np.flatnonzero(~used)
                if avail.size < 3:
                    break
                take = rng.choice(avail, min(int(rng.integers(3, 9)), avail.size),
                                  replace=False)
                used[take] = True
                gt_masks.append(mask_from(take, n))
            scored = []
            for _ in range(n_pred):
                if gt_masks and rng.uniform() < 0.7:
                    base = np.flatnonzero(gt_masks[rng.integers(len(gt_masks))])
                    keep = base[rng.uniform(size=base.size) < 0.8]
                    if keep.size == 0:
                        continue
                    scored.append((float(rng.uniform()), mask_from(keep, n)))
                else:
                    take = rng.choice(n, int(rng.integers(2, 7)), replace=False)
                    scored.append((float(rng.uniform()), mask_from(take, n)))
            if not gt_masks:
                continue
            gts = [InstancePrediction(m, 2, 1.0) for m in gt_masks]
            preds = [InstancePrediction(m, 2, s) for s, m in scored]
            for thr in (0.25, 0.5, 0.75):
                got = instance_ap(preds, gts, thr)
                want = oracle_ap_single_class(scored, gt_masks, thr)
                assert got == pytest.approx(want, abs=1e-9), f"trial {trial} thr {thr}"


class TestPrecRec:
    def test_perfect(self):
        n = 10
        m = mask_from(range(4), n)
        gts = [InstancePrediction(m, 2, 1.0)]
        preds = [InstancePrediction(m.copy(), 2, 0.9)]
        assert prec_rec_at50(preds, gts) == (1.0, 1.0)

    def test_halved_precision(self):
        n = 20
        m = mask_from(range(6), n)
        gts = [InstancePrediction(m, 2, 1.0)]
        preds = [InstancePrediction(m.copy(), 2, 0.9),
                 InstancePrediction(mask_from(range(10, 14), n), 2, 0.8)]
        prec, rec = prec_rec_at50(preds, gts)
        assert prec == pytest.approx(0.5)
        assert rec == pytest.approx(1.0)

    def test_no_predictions(self):
        n = 10
        gts = [InstancePrediction(mask_from(range(3), n), 2, 1.0)]
        prec, rec = prec_rec_at50([], gts)
        assert prec is None
        assert rec == 0.0


# ---------------------------------------------------------------------------
# panoptic
# ---------------------------------------------------------------------------

class TestPanopticFuse:
    def test_no_instances_single_stuff_segment(self):
        n = 25
        sem = np.zeros((n, 4))
        sem[:, 0] = 5.0
        out = panoptic_fuse(sem, [], catalog4())
        assert np.all(out.class_ids == 0)
        assert np.all(out.segment_ids == 0)

    def test_instance_overrides_conflicting_semantics(self):
        n = 30
        sem = np.zeros((n, 4))
        sem[:, 0] = 5.0  # semantics insist on floor
        inst = InstancePrediction(mask_from(range(10), n), 2, 0.9)
        out = panoptic_fuse(sem, [inst], catalog4(), score_thresh=0.5,
                            overlap_thresh=0.5, min_points=1)
        assert np.all(out.class_ids[:10] == 2)
        assert np.all(out.segment_ids[:10] == 1)
        assert np.all(out.class_ids[10:] == 0)

    def test_overlapping_lower_score_dropped(self):
        n = 40
        sem = np.zeros((n, 4))
        sem[:, 1] = 1.0
        shared = mask_from(range(12), n)
        hi = InstancePrediction(shared, 2, 0.9)
        lo = InstancePrediction(mask_from(range(2, 14), n), 3, 0.7)
        out = panoptic_fuse(sem, [hi, lo], catalog4(), score_thresh=0.5,
                            overlap_thresh=0.5, min_points=1)
        assert np.all(out.class_ids[:12] == 2)
        # low-score mask keeps only 2/12 unclaimed points: below overlap_thresh
        assert np.all(out.class_ids[12:14] == 1)

    def test_score_threshold_filters(self):
        n = 20
        sem = np.zeros((n, 4))
        sem[:, 0] = 1.0
        weak = InstancePrediction(mask_from(range(10), n), 2, 0.3)
        out = panoptic_fuse(sem, [weak], catalog4())
        assert np.all(out.class_ids == 0)

    def test_output_is_partition(self):
        rng = np.random.default_rng(3)
        n = 50
        sem = rng.normal(size=(n, 4))
        preds = [InstancePrediction(mask_from(rng.choice(n, 12, replace=False), n), 2, 0.9),
                 InstancePrediction(mask_from(rng.choice(n, 12, replace=False), n), 3, 0.8)]
        out = panoptic_fuse(sem, preds, catalog4(), min_points=1)
        assert out.class_ids.shape == (n,)
        assert np.all((out.class_ids >= 0) & (out.class_ids < 4))
        # thing segments have unique ids, each covering a disjoint point set
        for seg in np.unique(out.segment_ids[out.segment_ids > 0]):
            classes = np.unique(out.class_ids[out.segment_ids == seg])
            assert classes.size == 1


class TestPanopticQuality:
    def test_perfect_match(self):
        rng = np.random.default_rng(4)
        gt = random_panoptic(rng)
        pq, pq_th, pq_st, per_class = panoptic_quality(gt, gt, catalog4())
        assert pq == pq_th == pq_st == 1.0
        assert all(v == 1.0 for v in per_class.values())

    def test_partial_overlap_example(self):
        n = 10
        gt = PanopticAssignment(class_ids=np.full(n, 2), segment_ids=np.ones(n, dtype=int))
        pred_cls = np.full(n, 2)
        pred_seg = np.ones(n, dtype=int)
        pred_cls[8:] = 0  # two points defect to stuff
        pred_seg[8:] = 0
        pred = PanopticAssignment(class_ids=pred_cls, segment_ids=pred_seg)
        _, _, _, per_class = panoptic_quality(pred, gt, catalog4())
        assert per_class[2] == pytest.approx(0.8)

    def test_boundary_iou_half_is_no_match(self):
        n = 10
        gt = PanopticAssignment(class_ids=np.full(n, 2), segment_ids=np.ones(n, dtype=int))
        pred_cls = np.full(n, 2)
        pred_seg = np.ones(n, dtype=int)
        pred_cls[5:] = 0
        pred_seg[5:] = 0  # IoU exactly 5/10 = 0.5
        pred = PanopticAssignment(class_ids=pred_cls, segment_ids=pred_seg)
        _, _, _, per_class = panoptic_quality(pred, gt, catalog4())
        assert per_class[2] == 0.0

    def test_point_count_mismatch(self):
        a = PanopticAssignment(class_ids=np.zeros(3, dtype=int),
                               segment_ids=np.zeros(3, dtype=int))
        b = PanopticAssignment(class_ids=np.zeros(4, dtype=int),
                               segment_ids=np.zeros(4, dtype=int))
        with pytest.raises(MetricError):
            panoptic_quality(a, b, catalog4())

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(5)
        gt = random_panoptic(rng)
        pred = random_panoptic(rng)
        base = panoptic_quality(pred, gt, catalog4())[0]
        # apply a bijection to predicted thing segment ids
        ids = np.unique(pred.segment_ids[pred.segment_ids > 0])
        mapping = dict(zip(ids, rng.permutation(ids) + 100))
        relabeled = pred.segment_ids.copy()
        for old, new in mapping.items():
            relabeled[pred.segment_ids == old] = new
        shuffled = PanopticAssignment(class_ids=pred.class_ids, segment_ids=relabeled)
        assert panoptic_quality(shuffled, gt, catalog4())[0] == pytest.approx(base)

    def test_matches_exhaustive_oracle_on_random_scenes(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            gt = random_panoptic(rng, n=40)
            pred = random_panoptic(rng, n=40)
            _, _, _, per_class = panoptic_quality(pred, gt, catalog4())
            pred_segs = {}
            gt_segs = {}
            for assign, store in ((pred, pred_segs), (gt, gt_segs)):
                for c in np.unique(assign.class_ids):
                    masks = []
                    for s in np.unique(assign.segment_ids[assign.class_ids == c]):
                        masks.append((assign.class_ids == c) & (assign.segment_ids == s))
                    store[c] = masks
            for c in set(pred_segs) | set(gt_segs):
                want = oracle_pq_class(pred_segs.get(c, []), gt_segs.get(c, []))
                assert per_class[c] == pytest.approx(want, abs=1e-12)

    def test_all_values_within_unit_interval(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gt = random_panoptic(rng)
            pred = random_panoptic(rng)
            pq, pq_th, pq_st, per_class = panoptic_quality(pred, gt, catalog4())
            for v in [pq, pq_th, pq_st, *per_class.values()]:
                if v is not None:
                    assert 0.0 <= v <= 1.0


class TestInstancePredictionValidation:
    def test_empty_mask_rejected(self):
        with pytest.raises(MetricError):
            InstancePrediction(np.zeros(5, dtype=bool), 2, 0.5)

    def test_score_out_of_range(self):
        with pytest.raises(MetricError):
            InstancePrediction(np.ones(5, dtype=bool), 2, 1.5)
