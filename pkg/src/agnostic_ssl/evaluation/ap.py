"""COCO-style average precision with 101-point interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..datamodel import Instance, ValidationError
from .geometry import geometry_area, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# desk-scale size buckets (64x64 images); COCO uses 32**2 and 96**2
DESK_AREA_SPLITS = (8.0**2, 20.0**2)


@dataclass
class Matching:
    """Result of greedily matching one image's predictions to its ground truth.

    ``pred_to_gt[i]`` is the matched GT index or -1, in the caller's
    prediction order.
    """

    pred_to_gt: np.ndarray
    gt_to_pred: np.ndarray

    @property
    def tp(self) -> int:
        return int((self.pred_to_gt >= 0).sum())

    @property
    def fp(self) -> int:
        return int((self.pred_to_gt < 0).sum())

    @property
    def fn(self) -> int:
        return int((self.gt_to_pred < 0).sum())


def score_order(preds: Sequence[Instance]) -> np.ndarray:
    """Descending score; equal scores are ordered by geometry so input order never matters."""

    def key(k: int):
        p = preds[k]
        mask_key = np.packbits(p.mask.data).tobytes() if p.mask is not None else b""
        return (-p.score, p.bbox.as_tuple(), mask_key)

    return np.array(sorted(range(len(preds)), key=key), dtype=np.int64)


def greedy_match(
    ious: np.ndarray,
    order: np.ndarray,
    iou_floor: float,
    gt_ignore: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Visit predictions in ``order``; each takes the unmatched GT with highest IoU >= floor.

    Ties go to the lower GT index. Ignored GTs are only used when no
    regular GT qualifies.
    """
    n_pred, n_gt = ious.shape
    pred_to_gt = np.full(n_pred, -1, dtype=np.int64)
    gt_to_pred = np.full(n_gt, -1, dtype=np.int64)
    if gt_ignore is None:
        gt_ignore = np.zeros(n_gt, dtype=bool)
    for i in order:
        best = -1
        best_iou = iou_floor
        best_ign = True
        for g in range(n_gt):
            if gt_to_pred[g] >= 0:
                continue
            v = ious[i, g]
            if v < iou_floor:
                continue
            ign = bool(gt_ignore[g])
            better = (best < 0) or (best_ign and not ign) or (ign == best_ign and v > best_iou)
            if better:
                best, best_iou, best_ign = g, v, ign
        if best >= 0:
            pred_to_gt[i] = best
            gt_to_pred[best] = i
    return pred_to_gt, gt_to_pred


def match(preds: Sequence[Instance], gts: Sequence[Instance], iou_floor: float, kind: str = "box") -> Matching:
    for k, p in enumerate(preds):
        if p.score is None:
            raise ValidationError(f"prediction {k} has no score")
    ious = iou_matrix(list(preds), list(gts), kind)
    p2g, g2p = greedy_match(ious, score_order(preds), iou_floor)
    return Matching(p2g, g2p)


def interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray]:
    """101-point AP of a ranked hit list; precision at r is the max precision at recall >= r."""
    tp = np.asarray(tp, dtype=np.int64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    # running max from the right makes precision non-increasing in rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
    # recall >= k/100 tested in integers: 100 * tp >= k * n_gt
    idx = np.searchsorted(100 * ctp, np.arange(len(RECALL_POINTS)) * n_gt, side="left")
    q = np.zeros(len(RECALL_POINTS))
    reached = idx < envelope.size
    q[reached] = envelope[idx[reached]]
    return math.fsum(q) / len(RECALL_POINTS), q


@dataclass
class EvalReport:
    """Metric values in [0, 1]; ``None`` marks a metric that is undefined (no GT)."""

    ap: Optional[float] = None
    ap50: Optional[float] = None
    ap75: Optional[float] = None
    ap_s: Optional[float] = None
    ap_m: Optional[float] = None
    ap_l: Optional[float] = None
    per_iou: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    pr_curves: dict = field(default_factory=dict)
    pq: Optional[float] = None
    sq: Optional[float] = None
    rq: Optional[float] = None
    tp: Optional[int] = None
    fp: Optional[int] = None
    fn: Optional[int] = None

    def to_dict(self, scale: float = 100.0, curves: bool = False) -> dict:
        def s(v):
            return None if v is None else round(v * scale, 6)

        out = {k: s(getattr(self, k)) for k in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "pq", "sq", "rq")}
        out.update({k: getattr(self, k) for k in ("tp", "fp", "fn")})
        out["per_iou"] = {f"{t:.2f}": s(v) for t, v in self.per_iou.items()}
        out["per_class"] = {str(c): s(v) for c, v in self.per_class.items()}
        if curves:
            out["pr_curves"] = {f"{t:.2f}": [float(x) for x in q] for t, q in self.pr_curves.items()}
        out = {k: v for k, v in out.items() if v is not None and v != {}}
        return out


def _category_ap(
    preds: Sequence[Sequence[Instance]],
    gts: Sequence[Sequence[Instance]],
    kind: str,
    thresholds: Sequence[float],
    area_range: tuple[float, float],
    max_detections: Optional[int],
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """APs per threshold for one category; ``None`` when the category has no counted GT."""
    lo, hi = area_range
    records = []  # (sort key, tp flags per thr, ignore flags per thr)
    n_gt = 0
    for img, (dts, gs) in enumerate(zip(preds, gts)):
        order = score_order(dts)
        if max_detections is not None:
            order = order[:max_detections]
        dts = [dts[k] for k in order]
        g_area = np.array([geometry_area(g, kind) for g in gs])
        g_ign = (g_area < lo) | (g_area > hi) if len(gs) else np.zeros(0, bool)
        n_gt += int((~g_ign).sum())
        ious = iou_matrix(dts, list(gs), kind)
        d_area = np.array([geometry_area(d, kind) for d in dts])
        per_thr_tp = np.zeros((len(thresholds), len(dts)), dtype=np.int64)
        per_thr_ign = np.zeros((len(thresholds), len(dts)), dtype=bool)
        for t, thr in enumerate(thresholds):
            p2g, _ = greedy_match(ious, np.arange(len(dts)), thr, g_ign)
            matched = p2g >= 0
            ign = np.where(matched, g_ign[np.maximum(p2g, 0)] if len(gs) else False, (d_area < lo) | (d_area > hi))
            per_thr_tp[t] = matched & ~ign
            per_thr_ign[t] = ign
        for k, d in enumerate(dts):
            records.append(((-d.score, img, k), per_thr_tp[:, k], per_thr_ign[:, k]))
    if n_gt == 0:
        return None, None
    records.sort(key=lambda r: r[0])
    aps = np.zeros(len(thresholds))
    curves = np.zeros((len(thresholds), len(RECALL_POINTS)))
    for t in range(len(thresholds)):
        hits = np.array([r[1][t] for r in records if not r[2][t]], dtype=np.int64)
        aps[t], curves[t] = interpolated_ap(hits, n_gt)
    return aps, curves


def average_precision(
    preds: Sequence[Sequence[Instance]],
    gts: Sequence[Sequence[Instance]],
    kind: str = "box",
    mode: str = "agnostic",
    area_splits: tuple[float, float] = DESK_AREA_SPLITS,
    max_detections: Optional[int] = None,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> EvalReport:
    """AP family over a dataset given per-image predictions and ground truth.

    Specific mode averages over classes that have ground truth; agnostic
    mode treats everything as one category and rejects class ids on GT.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists for {len(gts)} images")
    for img in preds:
        for p in img:
            if p.score is None:
                raise ValidationError("every prediction needs a score")
    if mode == "specific":
        for img in list(preds) + list(gts):
            if any(i.class_id is None for i in img):
                raise ValidationError("class-specific AP needs class ids on predictions and ground truth")
        classes = sorted({g.class_id for img in gts for g in img})
        groups = {c: ([[p for p in img if p.class_id == c] for img in preds],
                      [[g for g in img if g.class_id == c] for img in gts]) for c in classes}
    elif mode == "agnostic":
        if any(g.class_id is not None for img in gts for g in img):
            raise ValidationError("class-agnostic AP expects class-free ground truth")
        groups = {None: (preds, gts)}
    else:
        raise ValidationError(f"unknown mode {mode!r}")

    s, m = area_splits
    ranges = {"all": (0.0, math.inf), "s": (0.0, s), "m": (s, m), "l": (m, math.inf)}
    report = EvalReport()
    thr = list(thresholds)
    all_aps = []
    curve_acc = []
    for c, (p, g) in groups.items():
        aps, curves = _category_ap(p, g, kind, thr, ranges["all"], max_detections)
        if aps is None:
            continue
        all_aps.append(aps)
        curve_acc.append(curves)
        if c is not None:
            report.per_class[c] = math.fsum(aps) / len(aps)
    if not all_aps:
        return report
    stack = np.stack(all_aps)  # [classes, thresholds]
    report.ap = math.fsum(stack.ravel()) / stack.size
    report.per_iou = {t: math.fsum(stack[:, k]) / stack.shape[0] for k, t in enumerate(thr)}
    report.ap50 = report.per_iou.get(0.5)
    report.ap75 = report.per_iou.get(0.75)
    mean_curves = np.mean(np.stack(curve_acc), axis=0)
    report.pr_curves = {t: mean_curves[k] for k, t in enumerate(thr)}

    for name in ("s", "m", "l"):
        vals = []
        for p, g in groups.values():
            aps, _ = _category_ap(p, g, kind, thr, ranges[name], max_detections)
            if aps is not None:
                vals.append(aps)
        if vals:
            st = np.stack(vals)
            setattr(report, f"ap_{name}", math.fsum(st.ravel()) / st.size)
    return report
