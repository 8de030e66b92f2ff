"""Pixel-level mIoU and instance-level precision / recall / F-measure."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import PolygonSet, rasterize_polygon
from .postprocess import MatchResult

LEVELS = ("I", "II", "III")
IOU_THRESHOLD = 0.5


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of background and foreground IoU; a class absent from both counts as 1."""
    pred, gt = np.asarray(pred) > 0, np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    ious = []
    for p, g in ((~pred, ~gt), (pred, gt)):
        union = np.logical_or(p, g).sum()
        ious.append(1.0 if union == 0 else np.logical_and(p, g).sum() / union)
    return float(np.mean(ious))


def iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    if not len(preds) or not len(gts):
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, bool).ravel() for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, bool).ravel() for m in gts]).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_count(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> int:
    """Greedy one-to-one matching by descending IoU, pairs need IoU > 0.5."""
    ious = iou_matrix(preds, gts)
    order = np.argsort(-ious, axis=None, kind="stable")
    used_p, used_g, tp = set(), set(), 0
    for flat in order:
        i, j = divmod(int(flat), ious.shape[1])
        if ious[i, j] <= IOU_THRESHOLD:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp += 1
    return tp


def prf(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def instance_prf(pred_instances, gt_instances) -> tuple[float, float, float]:
    return prf(match_count(pred_instances, gt_instances), len(pred_instances), len(gt_instances))


@dataclass
class MetricReport:
    miou: float
    precision: float
    recall: float
    f_measure: float
    per_level: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv(self) -> str:
        """One row in the benchmark table layout (values in percent)."""
        header, row = [], []
        for name in LEVELS:
            lv = self.per_level.get(name)
            header += [f"Level {name} mIoU (%)", f"Level {name} F (%)"]
            row += ["" if lv is None else f"{100 * lv['miou']:.1f}",
                    "" if lv is None else f"{100 * lv['f']:.1f}"]
        header += ["Total mIoU (%)", "Total F (%)"]
        row += [f"{100 * self.miou:.1f}", f"{100 * self.f_measure:.1f}"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerow(row)
        return buf.getvalue()


class _Acc:
    def __init__(self):
        self.mious, self.tp, self.n_pred, self.n_gt = [], 0, 0, 0

    def report(self):
        p, r, f = prf(self.tp, self.n_pred, self.n_gt)
        return float(np.mean(self.mious)), p, r, f


def evaluate_run(items: Iterable[tuple[MatchResult, PolygonSet, str]]) -> MetricReport:
    """Accumulate per-image mIoU (macro) and instance counts over a run."""
    total, levels, images = _Acc(), {}, 0
    for item in items:
        if len(item) != 3:
            raise ValueError("each item must be (MatchResult, PolygonSet, level)")
        result, polygons, level = item
        h, w = result.merged.shape
        gt_masks = [rasterize_polygon(p, h, w) for p in polygons]
        gt_union = np.zeros((h, w), bool)
        for m in gt_masks:
            gt_union |= m
        preds = [inst.mask for inst in result.instances]
        m = miou(result.merged, gt_union)
        tp = match_count(preds, gt_masks)
        for acc in (total, levels.setdefault(level, _Acc())):
            acc.mious.append(m)
            acc.tp += tp
            acc.n_pred += len(preds)
            acc.n_gt += len(gt_masks)
        images += 1
    if images == 0:
        raise ValueError("no results to evaluate")
    mi, p, r, f = total.report()
    per_level = {}
    for name, acc in levels.items():
        lm, lp, lr, lf = acc.report()
        per_level[name] = {"miou": lm, "precision": lp, "recall": lr, "f": lf}
    counts = {"tp": total.tp, "fp": total.n_pred - total.tp, "fn": total.n_gt - total.tp,
              "images": images}
    return MetricReport(mi, p, r, f, per_level, counts)
