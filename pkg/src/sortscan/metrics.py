"""Segmentation and classification metrics over instance masks.

Definitions (documented edge cases):
  dice      2|P&G| / (|P|+|G|); both masks empty -> 1.0.
  aji       aggregated Jaccard: each ground-truth instance greedily takes
            the prediction maximizing IoU (ties -> lower id); matched
            intersections/unions accumulate; every unmatched prediction
            adds its area to the union. Empty gt and pred -> 1.0.
  panoptic  matches are pairs with IoU > 0.5 (unique by construction);
            DQ = TP / (TP + FP/2 + FN/2); SQ = mean matched IoU (0 when
            no matches); PQ = DQ * SQ. Both masks empty -> (1, 1, 1).
  f-scores  detection F1 over IoU>0.5 matches; per-class F1 counts a true
            positive only when the matched pair also agrees on the class.
            A class absent from both sides scores 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instances import InstanceMask


@dataclass
class MetricsReport:
    dice: float
    aji: float
    dq: float
    sq: float
    pq: float
    f_detection: float
    per_class_f1: list[float]
    num_images: int = 1
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        values = [self.dice, self.aji, self.dq, self.sq, self.pq, self.f_detection,
                  *self.per_class_f1]
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValueError(f"metric out of [0,1]: {values}")
        if abs(self.pq - self.dq * self.sq) > 1e-12:
            raise ValueError("pq != dq * sq")

    def to_dict(self) -> dict:
        return {
            "dice": self.dice, "aji": self.aji, "dq": self.dq, "sq": self.sq,
            "pq": self.pq, "f_detection": self.f_detection,
            "per_class_f1": self.per_class_f1, "num_images": self.num_images,
            **({"extras": self.extras} if self.extras else {}),
        }


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("dice: shape mismatch")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


def _instance_areas(labels: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(labels.reshape(-1), minlength=n + 1)[1:]


def _pair_intersections(pred: np.ndarray, gt: np.ndarray,
                        np_: int, ng: int) -> np.ndarray:
    """inter[g, p] = |gt instance g+1 & pred instance p+1| via 2-d bincount."""
    both = (pred > 0) & (gt > 0)
    if not both.any():
        return np.zeros((ng, np_), dtype=np.int64)
    lin = (gt[both].astype(np.int64) - 1) * np_ + (pred[both].astype(np.int64) - 1)
    return np.bincount(lin, minlength=ng * np_).reshape(ng, np_)


def aji(pred: InstanceMask, gt: InstanceMask) -> float:
    if pred.labels.shape != gt.labels.shape:
        raise ValueError("aji: shape mismatch")
    c, u, used = aji_components(pred, gt)
    if u == 0:
        return 1.0
    return c / u


def aji_components(pred: InstanceMask, gt: InstanceMask) -> tuple[int, int, set[int]]:
    """Accumulated intersection, union and the set of used prediction ids."""
    npred = pred.num_instances
    ngt = gt.num_instances
    pred_areas = _instance_areas(pred.labels, npred)
    gt_areas = _instance_areas(gt.labels, ngt)
    inter = _pair_intersections(pred.labels, gt.labels, npred, ngt)

    c = 0
    u = 0
    used: set[int] = set()
    for g in range(ngt):
        if npred == 0:
            u += int(gt_areas[g])
            continue
        ious = inter[g] / (gt_areas[g] + pred_areas - inter[g])
        best = int(np.argmax(ious))  # argmax takes the lowest index on ties
        if ious[best] > 0:
            c += int(inter[g, best])
            u += int(gt_areas[g] + pred_areas[best] - inter[g, best])
            used.add(best + 1)
        else:
            u += int(gt_areas[g])
    for p in range(1, npred + 1):
        if p not in used:
            u += int(pred_areas[p - 1])
    return c, u, used


def _iou_matches(pred: InstanceMask, gt: InstanceMask,
                 thresh: float = 0.5) -> list[tuple[int, int, float]]:
    """Pairs (gt id, pred id, IoU) with IoU > thresh; unique at thresh 0.5."""
    npred = pred.num_instances
    ngt = gt.num_instances
    if npred == 0 or ngt == 0:
        return []
    pred_areas = _instance_areas(pred.labels, npred)
    gt_areas = _instance_areas(gt.labels, ngt)
    inter = _pair_intersections(pred.labels, gt.labels, npred, ngt)
    out = []
    for g in range(ngt):
        union = gt_areas[g] + pred_areas - inter[g]
        ious = inter[g] / union
        for p in np.nonzero(ious > thresh)[0]:
            out.append((g + 1, int(p) + 1, float(ious[p])))
    return out


def panoptic(pred: InstanceMask, gt: InstanceMask,
             iou_thresh: float = 0.5) -> tuple[float, float, float]:
    if pred.labels.shape != gt.labels.shape:
        raise ValueError("panoptic: shape mismatch")
    matches = _iou_matches(pred, gt, iou_thresh)
    tp = len(matches)
    fp = pred.num_instances - tp
    fn = gt.num_instances - tp
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(m[2] for m in matches) / tp if tp else 0.0
    return dq, sq, dq * sq


def classification_f1(pred: InstanceMask, gt: InstanceMask,
                      num_classes: int) -> tuple[float, list[float]]:
    """Detection F1 and per-class F1 over IoU>0.5 matched instances."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError("classification_f1: shape mismatch")
    counts = f1_counts(pred, gt, num_classes)
    return f1_from_counts(counts, num_classes)


def f1_counts(pred: InstanceMask, gt: InstanceMask, num_classes: int) -> dict:
    """Raw match counts, accumulable across images."""
    matches = _iou_matches(pred, gt)
    tp = len(matches)
    per = {c: {"tp": 0, "pred": 0, "gt": 0} for c in range(1, num_classes + 1)}
    for cls in pred.classes.values():
        if cls in per:
            per[cls]["pred"] += 1
    for cls in gt.classes.values():
        if cls in per:
            per[cls]["gt"] += 1
    for g, p, _ in matches:
        if gt.classes[g] == pred.classes[p] and gt.classes[g] in per:
            per[gt.classes[g]]["tp"] += 1
    return {"tp": tp, "n_pred": pred.num_instances, "n_gt": gt.num_instances,
            "per_class": per}


def f1_from_counts(counts: dict, num_classes: int) -> tuple[float, list[float]]:
    tp, n_pred, n_gt = counts["tp"], counts["n_pred"], counts["n_gt"]
    denom = 2 * tp + (n_pred - tp) + (n_gt - tp)
    f_d = 2 * tp / denom if denom else 1.0
    per_class = []
    for c in range(1, num_classes + 1):
        k = counts["per_class"][c]
        d = k["pred"] + k["gt"]
        per_class.append(2 * k["tp"] / d if d else 1.0)
    return f_d, per_class


def merge_counts(items: list[dict], num_classes: int) -> dict:
    out = {"tp": 0, "n_pred": 0, "n_gt": 0,
           "per_class": {c: {"tp": 0, "pred": 0, "gt": 0} for c in range(1, num_classes + 1)}}
    for it in items:
        out["tp"] += it["tp"]
        out["n_pred"] += it["n_pred"]
        out["n_gt"] += it["n_gt"]
        for c in range(1, num_classes + 1):
            for key in ("tp", "pred", "gt"):
                out["per_class"][c][key] += it["per_class"][c][key]
    return out


def evaluate_pair(pred: InstanceMask, gt: InstanceMask, num_classes: int) -> MetricsReport:
    dq, sq, pq = panoptic(pred, gt)
    f_d, per_class = classification_f1(pred, gt, num_classes)
    report = MetricsReport(
        dice=dice(pred.labels > 0, gt.labels > 0),
        aji=aji(pred, gt),
        dq=dq, sq=sq, pq=pq,
        f_detection=f_d,
        per_class_f1=per_class,
    )
    report.validate()
    return report


def aggregate_reports(pairs: list[tuple[InstanceMask, InstanceMask]],
                      num_classes: int) -> MetricsReport:
    """Dataset-level metrics: pixel and match counts accumulate across
    images (micro averaging), so pq == dq * sq holds for the aggregate."""
    inter2 = sizes = 0
    aji_c = aji_u = 0
    tp = 0
    iou_sum = 0.0
    n_pred = n_gt = 0
    counts = []
    for pred, gt in pairs:
        pb, gb = pred.labels > 0, gt.labels > 0
        inter2 += 2 * int((pb & gb).sum())
        sizes += int(pb.sum()) + int(gb.sum())
        c, u, _ = aji_components(pred, gt)
        aji_c += c
        aji_u += u
        matches = _iou_matches(pred, gt)
        tp += len(matches)
        iou_sum += sum(m[2] for m in matches)
        n_pred += pred.num_instances
        n_gt += gt.num_instances
        counts.append(f1_counts(pred, gt, num_classes))
    dq_den = tp + 0.5 * (n_pred - tp) + 0.5 * (n_gt - tp)
    dq = tp / dq_den if dq_den else 1.0
    sq = iou_sum / tp if tp else 0.0
    if n_pred == 0 and n_gt == 0:
        dq = sq = 1.0
    f_d, per_class = f1_from_counts(merge_counts(counts, num_classes), num_classes)
    report = MetricsReport(
        dice=inter2 / sizes if sizes else 1.0,
        aji=aji_c / aji_u if aji_u else 1.0,
        dq=dq, sq=sq, pq=dq * sq,
        f_detection=f_d,
        per_class_f1=per_class,
        num_images=len(pairs),
    )
    report.validate()
    return report


class oracles:
    """Independent brute-force implementations used only for verification.

    These recompute every quantity from explicit per-instance pixel sets
    with no shared code with the fast paths above.
    """

    @staticmethod
    def random_instance_mask(rng: np.random.Generator, h: int, w: int,
                             max_instances: int = 4, num_classes: int = 3) -> InstanceMask:
        labels = np.zeros((h, w), dtype=np.int32)
        n = int(rng.integers(0, max_instances + 1))
        placed = 0
        for _ in range(n):
            r0, c0 = int(rng.integers(0, h - 2)), int(rng.integers(0, w - 2))
            rh, cw = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            patch = labels[r0:r0 + rh, c0:c0 + cw]
            if (patch != 0).any():
                continue
            placed += 1
            patch[:] = placed
        classes = {i: int(rng.integers(1, num_classes + 1)) for i in range(1, placed + 1)}
        return InstanceMask(labels=labels, classes=classes)

    @staticmethod
    def _pixel_sets(mask: InstanceMask) -> dict[int, set[tuple[int, int]]]:
        out: dict[int, set[tuple[int, int]]] = {}
        for r in range(mask.labels.shape[0]):
            for c in range(mask.labels.shape[1]):
                v = int(mask.labels[r, c])
                if v > 0:
                    out.setdefault(v, set()).add((r, c))
        return out

    @staticmethod
    def dice_bruteforce(pred: np.ndarray, gt: np.ndarray) -> float:
        p = {(r, c) for r, c in zip(*np.nonzero(pred))}
        g = {(r, c) for r, c in zip(*np.nonzero(gt))}
        if not p and not g:
            return 1.0
        return 2.0 * len(p & g) / (len(p) + len(g))

    @staticmethod
    def aji_bruteforce(pred: InstanceMask, gt: InstanceMask) -> float:
        psets = oracles._pixel_sets(pred)
        gsets = oracles._pixel_sets(gt)
        c = u = 0
        used: set[int] = set()
        for gid in sorted(gsets):
            gpix = gsets[gid]
            best_iou, best_pid = 0.0, None
            for pid in sorted(psets):
                ppix = psets[pid]
                iou = len(gpix & ppix) / len(gpix | ppix)
                if iou > best_iou:
                    best_iou, best_pid = iou, pid
            if best_pid is None:
                u += len(gpix)
            else:
                c += len(gpix & psets[best_pid])
                u += len(gpix | psets[best_pid])
                used.add(best_pid)
        for pid in sorted(psets):
            if pid not in used:
                u += len(psets[pid])
        if u == 0:
            return 1.0
        return c / u

    @staticmethod
    def panoptic_bruteforce(pred: InstanceMask, gt: InstanceMask) -> tuple[float, float, float]:
        psets = oracles._pixel_sets(pred)
        gsets = oracles._pixel_sets(gt)
        matches = []
        for gid in sorted(gsets):
            for pid in sorted(psets):
                iou = len(gsets[gid] & psets[pid]) / len(gsets[gid] | psets[pid])
                if iou > 0.5:
                    matches.append(iou)
        tp = len(matches)
        fp = len(psets) - tp
        fn = len(gsets) - tp
        if tp + fp + fn == 0:
            return 1.0, 1.0, 1.0
        dq = tp / (tp + 0.5 * fp + 0.5 * fn)
        sq = sum(matches) / tp if tp else 0.0
        return dq, sq, dq * sq
