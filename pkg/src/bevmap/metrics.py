"""Evaluation metrics for rasterized and vectorized map predictions.

Semantic quality is measured by per-class IoU on binary rasters.  Vector
quality uses Chamfer distance between arc-length-uniform samplings of the
polylines, reported both directed ways plus the sum and average of the two
directions, and average precision over a sweep of Chamfer thresholds with
10-point interpolated precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevConfig
from .maps import CLASS_NAMES, Polyline, VectorMap, polyline_cells, resolve_thickness
from .numerics import Grid2D


def iou(pred: Grid2D, gt: Grid2D) -> np.ndarray:
    """Per-channel intersection-over-union of binary grids.

    Both-empty channels score 1.0; a single empty side scores 0.0.
    """
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch {pred.data.shape} vs {gt.data.shape}")
    for g in (pred, gt):
        vals = np.unique(g.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("iou expects binary grids with values in {0, 1}")
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    inter = (p & g).sum(axis=(0, 1)).astype(np.float64)
    union = (p | g).sum(axis=(0, 1)).astype(np.float64)
    out = np.ones(pred.channels)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def class_masks(vm: VectorMap, bev: BevConfig, thickness=None) -> Grid2D:
    """Binary per-class occupancy rasters of a vector map.

    Unlike label rasterization there is no overwriting: a cell covered by
    elements of several classes is set in every covered channel, which is
    the right semantics for per-class IoU.
    """
    out = np.zeros((bev.height, bev.width, len(CLASS_NAMES)))
    for el in vm.elements:
        ch = CLASS_NAMES.index(el.class_name)
        for r, c in polyline_cells(el, bev, resolve_thickness(thickness, el.class_name)):
            out[r, c, ch] = 1.0
    return Grid2D(out)


def sample_polyline(poly: Polyline, spacing: float) -> np.ndarray:
    """Arc-length-uniform samples including both endpoints.

    The gap between consecutive samples never exceeds ``spacing``; a
    polyline of total length <= spacing yields exactly its two endpoints.
    Zero-length polylines are rejected.
    """
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    pts = poly.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if total == 0.0:
        raise ValueError("cannot sample a zero-length polyline")
    n = max(1, int(np.ceil(total / spacing - 1e-12)))
    targets = np.linspace(0.0, total, n + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((n + 1, 2))
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[idx] > 0.0, (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = pts[idx] + frac[:, None] * (pts[idx + 1] - pts[idx])
    out[-1] = pts[-1]
    return out


def chamfer_directed(a: np.ndarray, b: np.ndarray, empty_value: float) -> float:
    """Mean distance from each point of ``a`` to its nearest point of ``b``.

    Either side empty returns ``empty_value`` (callers flag this case).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        return float(empty_value)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean())


@dataclass(frozen=True)
class ChamferResult:
    forward: float   # a -> b
    backward: float  # b -> a

    @property
    def sum(self) -> float:
        return self.forward + self.backward

    @property
    def average(self) -> float:
        return 0.5 * (self.forward + self.backward)


def chamfer(a: np.ndarray, b: np.ndarray, empty_value: float) -> ChamferResult:
    """Bidirectional Chamfer distance; exposes both sum and average."""
    return ChamferResult(
        forward=chamfer_directed(a, b, empty_value),
        backward=chamfer_directed(b, a, empty_value),
    )


def average_precision(preds: list, gts: list, cd_threshold: float, spacing: float,
                      empty_value: float | None = None) -> float:
    """AP of predicted polylines against ground truth at one CD threshold.

    Predictions are taken in descending confidence (stable for ties) and
    greedily matched to the unmatched ground-truth element with the
    smallest bidirectional-average Chamfer distance; the match is a true
    positive (consuming the ground truth) iff that distance is strictly
    below the threshold.  Precision is interpolated at recalls
    0.1, 0.2, ..., 1.0; unreached recall levels contribute zero.  With no
    ground-truth elements the AP is defined as 0 (callers flag it).
    """
    if cd_threshold <= 0.0:
        raise ValueError("cd_threshold must be positive")
    if not gts:
        return 0.0
    if empty_value is None:
        empty_value = np.inf
    gt_samples = [sample_polyline(g, spacing) for g in gts]
    order = np.argsort([-p.confidence for p in preds], kind="stable")
    matched = np.zeros(len(gts), dtype=bool)
    tp_at = []
    tp = 0
    for pi in order:
        ps = sample_polyline(preds[pi], spacing)
        open_idx = np.nonzero(~matched)[0]
        if len(open_idx):
            cds = np.array([chamfer(ps, gt_samples[gi], empty_value).average for gi in open_idx])
            best = int(open_idx[int(np.argmin(cds))])
            if float(cds.min()) < cd_threshold:
                matched[best] = True
                tp += 1
        tp_at.append(tp)
    n_gt = len(gts)
    precisions = [t / (i + 1) for i, t in enumerate(tp_at)]
    recalls = [t / n_gt for t in tp_at]
    total = 0.0
    for k in range(1, 11):
        r = k / 10.0
        cand = [p for p, rec in zip(precisions, recalls) if rec >= r]
        total += max(cand) if cand else 0.0
    return total / 10.0


@dataclass
class ClassMetrics:
    iou: float
    cd_p: float       # label -> prediction
    cd_l: float       # prediction -> label
    cd_sum: float
    cd_avg: float
    ap: dict
    mean_ap: float
    flags: list = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-class and all-class metrics with empty-set flags.

    CD_P is the directed Chamfer distance from label points to prediction
    points and CD_L the reverse; the headline CD column is the average of
    the two directions, with the sum also reported.
    """

    classes: dict
    all_classes: ClassMetrics
    thresholds: list

    def to_json_dict(self) -> dict:
        def enc(m: ClassMetrics) -> dict:
            return {
                "iou": m.iou,
                "cd_p": m.cd_p,
                "cd_l": m.cd_l,
                "cd_sum": m.cd_sum,
                "cd_avg": m.cd_avg,
                "ap": {format(t, "g"): v for t, v in m.ap.items()},
                "map": m.mean_ap,
                "flags": list(m.flags),
            }

        return {
            "thresholds": list(self.thresholds),
            "cd_convention": {"cd_avg": "average of both directions",
                              "cd_sum": "sum of both directions"},
            "classes": {name: enc(m) for name, m in self.classes.items()},
            "all": enc(self.all_classes),
        }

    def to_text(self) -> str:
        names = list(self.classes) + ["all"]
        rows = [self.classes[n] for n in self.classes] + [self.all_classes]
        head = ["metric"] + names
        lines = []
        sem = [
            ("IoU", [m.iou for m in rows]),
            ("CD_P (label->pred)", [m.cd_p for m in rows]),
            ("CD_L (pred->label)", [m.cd_l for m in rows]),
            ("CD (avg)", [m.cd_avg for m in rows]),
            ("CD (sum)", [m.cd_sum for m in rows]),
        ]
        inst = [(f"AP@{format(t, 'g')}", [m.ap[t] for m in rows]) for t in self.thresholds]
        inst.append(("mAP", [m.mean_ap for m in rows]))
        table = [head] + [
            [label] + [format(v, ".4f") for v in vals] for label, vals in sem + inst
        ]
        widths = [max(len(r[i]) for r in table) for i in range(len(head))]
        for r in table:
            lines.append("  ".join(s.ljust(w) for s, w in zip(r, widths)))
        flags = [f for m in rows for f in m.flags]
        if flags:
            lines.append("")
            lines.extend(f"note: {f}" for f in flags)
        return "\n".join(lines) + "\n"


def evaluate(pred_map: VectorMap, gt_map: VectorMap, pred_mask: Grid2D, gt_mask: Grid2D,
             thresholds=(0.2, 0.5, 1.0), spacing: float | None = None) -> MetricsReport:
    """Full per-class evaluation of a predicted map against ground truth.

    ``pred_mask``/``gt_mask`` are co-registered binary rasters with one
    channel per class (background excluded).  Chamfer point sets pool the
    sampled points of every element of a class; empty sides are scored at
    the BEV diagonal and flagged.  The all-class row is the unweighted
    mean over classes.
    """
    if pred_map.bev != gt_map.bev:
        raise ValueError("prediction and ground truth use different BEV extents")
    bev = gt_map.bev
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds or any(t <= 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    if spacing is None:
        spacing = bev.pitch
    for mask, label in ((pred_mask, "pred"), (gt_mask, "gt")):
        if (mask.height, mask.width) != (bev.height, bev.width):
            raise ValueError(f"{label} mask does not match the BEV raster")
        if mask.channels != len(CLASS_NAMES):
            raise ValueError(f"{label} mask needs {len(CLASS_NAMES)} class channels")
    cap = bev.diagonal
    ious = iou(pred_mask, gt_mask)
    per_class = {}
    for ci, name in enumerate(CLASS_NAMES):
        preds = pred_map.by_class(name)
        gts = gt_map.by_class(name)
        flags = []
        pred_pts = (
            np.concatenate([sample_polyline(p, spacing) for p in preds])
            if preds else np.zeros((0, 2))
        )
        gt_pts = (
            np.concatenate([sample_polyline(g, spacing) for g in gts])
            if gts else np.zeros((0, 2))
        )
        if not preds:
            flags.append(f"{name}: empty prediction set, CD capped at {cap:.3f}")
        if not gts:
            flags.append(f"{name}: empty ground-truth set, CD capped at {cap:.3f}; AP fixed at 0")
        cd_p = chamfer_directed(gt_pts, pred_pts, cap)
        cd_l = chamfer_directed(pred_pts, gt_pts, cap)
        aps = {t: average_precision(preds, gts, t, spacing, cap) for t in thresholds}
        per_class[name] = ClassMetrics(
            iou=float(ious[ci]),
            cd_p=cd_p,
            cd_l=cd_l,
            cd_sum=cd_p + cd_l,
            cd_avg=0.5 * (cd_p + cd_l),
            ap=aps,
            mean_ap=float(np.mean(list(aps.values()))),
            flags=flags,
        )
    rows = list(per_class.values())
    overall = ClassMetrics(
        iou=float(np.mean([m.iou for m in rows])),
        cd_p=float(np.mean([m.cd_p for m in rows])),
        cd_l=float(np.mean([m.cd_l for m in rows])),
        cd_sum=float(np.mean([m.cd_sum for m in rows])),
        cd_avg=float(np.mean([m.cd_avg for m in rows])),
        ap={t: float(np.mean([m.ap[t] for m in rows])) for t in thresholds},
        mean_ap=float(np.mean([m.mean_ap for m in rows])),
        flags=[],
    )
    return MetricsReport(classes=per_class, all_classes=overall, thresholds=thresholds)
