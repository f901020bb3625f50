"""Detection metrics (P, R, AP, mAP, confusion), prediction decoding and the FPS harness."""

from __future__ import annotations

import json
import math
import gc
import time
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff import Tensor
from .model import SCALES, DetectorOutput, ModelGraph, forward

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Prediction:
    box: tuple[float, float, float, float]  # normalized cx, cy, w, h
    class_id: int
    confidence: float
    image_id: int = 0


@dataclass
class GroundTruth:
    box: tuple[float, float, float, float]
    class_id: int
    image_id: int = 0


def _corners(box, fmt: str):
    a, b, w, h = box
    if fmt == "cxcywh":
        return a - w / 2, b - h / 2, a + w / 2, b + h / 2
    if fmt == "xywh":
        return a, b, a + w, b + h
    raise ValueError(f"unknown box format {fmt!r}")


def iou(a, b, fmt: str = "cxcywh") -> float:
    ax0, ay0, ax1, ay1 = _corners(a, fmt)
    bx0, by0, bx1, by1 = _corners(b, fmt)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """Zero whenever the denominator is zero."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def match_predictions(preds: Sequence[Prediction], gts: Sequence[GroundTruth], iou_thresh: float) -> list[bool]:
    """Greedy in the given order: each prediction takes the best-IoU unmatched GT of its image."""
    by_image: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    taken = [False] * len(gts)
    hits = []
    for p in preds:
        best, best_iou = -1, iou_thresh
        for j in by_image.get(p.image_id, ()):
            if taken[j]:
                continue
            v = iou(p.box, gts[j].box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        hits.append(best >= 0)
    return hits


def _by_confidence(preds: Sequence[Prediction]) -> list[Prediction]:
    return sorted(preds, key=lambda p: -p.confidence)


def average_precision(preds: Sequence[Prediction], gts: Sequence[GroundTruth], iou_thresh: float = 0.5) -> float:
    """All-point interpolated area under the precision envelope (single class)."""
    if not gts or not preds:
        return 0.0
    hits = match_predictions(_by_confidence(preds), gts, iou_thresh)
    # exact rationals so the result is the correctly rounded area
    precision = []
    tp = 0
    for k, hit in enumerate(hits, 1):
        tp += hit
        precision.append(Fraction(tp, k))
    envelope = list(precision)
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    return float(sum((envelope[k] for k, hit in enumerate(hits) if hit), Fraction(0)) / len(gts))


@dataclass
class MapResult:
    map50: float
    map5095: float
    per_class_ap50: list[float]
    ap_table: list[list[float]]  # [threshold][class]
    classes_present: list[int]


def map_metrics(preds: Sequence[Prediction], gts: Sequence[GroundTruth], num_classes: int) -> MapResult:
    """Mean AP over classes that have ground truth, at IoU 0.5 and averaged over 0.50:0.95."""
    present = sorted({g.class_id for g in gts})
    table = []
    for thr in IOU_THRESHOLDS:
        row = []
        for c in range(num_classes):
            pc = [p for p in preds if p.class_id == c]
            gc = [g for g in gts if g.class_id == c]
            row.append(average_precision(pc, gc, thr))
        table.append(row)
    if not present:
        return MapResult(0.0, 0.0, table[0], table, present)
    per_thr = [float(np.mean([row[c] for c in present])) for row in table]
    return MapResult(per_thr[0], float(np.mean(per_thr)), table[0], table, present)


def confusion_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth], num_classes: int,
                     iou_thresh: float = 0.5, conf_thresh: float = 0.25) -> np.ndarray:
    """Rows = predicted class, columns = true class; index ``num_classes`` is background."""
    bg = num_classes
    m = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    kept = _by_confidence([p for p in preds if p.confidence >= conf_thresh])
    hits_gt: set[int] = set()
    by_image: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    for p in kept:
        best, best_iou = -1, iou_thresh
        for j in by_image.get(p.image_id, ()):
            if j in hits_gt:
                continue
            v = iou(p.box, gts[j].box)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            hits_gt.add(best)
            m[p.class_id, gts[best].class_id] += 1
        else:
            m[p.class_id, bg] += 1
    for j, g in enumerate(gts):
        if j not in hits_gt:
            m[bg, g.class_id] += 1
    return m


# ---------------------------------------------------------------- decoding


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode(output: DetectorOutput, conf_floor: float = 1e-3, image_offset: int = 0) -> list[Prediction]:
    """One prediction per grid cell: best class, confidence = objectness x class probability."""
    preds = []
    for s in SCALES:
        o = output[s]
        cls = _sig(o.class_logits.data.astype(np.float64))
        obj = _sig(o.objectness.data[:, 0].astype(np.float64))
        box = o.box.data.astype(np.float64)
        n, _, gh, gw = cls.shape
        best = cls.argmax(axis=1)
        conf = obj * cls.max(axis=1)
        for b, i, j in zip(*np.nonzero(conf >= conf_floor)):
            cx = (j + _sig(box[b, 0, i, j])) / gw
            cy = (i + _sig(box[b, 1, i, j])) / gh
            w = min(1.0, math.exp(min(box[b, 2, i, j], 5.0)) / gw)
            h = min(1.0, math.exp(min(box[b, 3, i, j], 5.0)) / gh)
            preds.append(Prediction((cx, cy, w, h), int(best[b, i, j]), float(conf[b, i, j]), image_offset + int(b)))
    return preds


def nms(preds: Sequence[Prediction], iou_thresh: float = 0.5, score_thresh: float = 0.25) -> list[Prediction]:
    """Greedy per-image, per-class suppression."""
    out = []
    groups: dict[tuple[int, int], list[Prediction]] = {}
    for p in preds:
        if p.confidence >= score_thresh:
            groups.setdefault((p.image_id, p.class_id), []).append(p)
    for key in sorted(groups):
        survivors: list[Prediction] = []
        for p in _by_confidence(groups[key]):
            if all(iou(p.box, q.box) < iou_thresh for q in survivors):
                survivors.append(p)
        out.extend(survivors)
    return out


# ---------------------------------------------------------------- report


@dataclass
class ClassStats:
    class_id: int
    precision: float
    recall: float
    ap50: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    per_class: list[ClassStats]
    map50: float
    map5095: float
    confusion: list[list[int]]
    gflops: float = 0.0
    fps: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    zero_denominator_classes: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class"] = [ClassStats(**c) for c in d["per_class"]]
        return cls(**d)

    def to_table(self) -> str:
        rows = [("class", "P", "R", "AP50", "TP", "FP", "FN")]
        rows += [(str(c.class_id), f"{c.precision:.3f}", f"{c.recall:.3f}", f"{c.ap50:.3f}",
                  str(c.tp), str(c.fp), str(c.fn)) for c in self.per_class]
        rows.append(("all", f"{self.precision:.3f}", f"{self.recall:.3f}", f"{self.map50:.3f}", "", "", ""))
        widths = [max(len(r[i]) for r in rows) for i in range(7)]
        body = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
        return (f"{body}\nmAP50 {self.map50:.4f}  mAP50:95 {self.map5095:.4f}  "
                f"GFLOPs {self.gflops:.6f}  FPS {self.fps:.1f}")


def ground_truths(samples) -> list[GroundTruth]:
    return [GroundTruth(tuple(float(v) for v in box), int(lab), i)
            for i, s in enumerate(samples) for box, lab in zip(s.boxes, s.labels)]


def predict(model: ModelGraph, samples, batch_size: int = 32, nms_iou: float = 0.5,
            score_thresh: float = 0.25) -> list[Prediction]:
    preds: list[Prediction] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = Tensor(np.stack([s.image for s in chunk]))
        preds += decode(forward(model, x), conf_floor=score_thresh, image_offset=start)
    return nms(preds, nms_iou, score_thresh)


def evaluate(model: ModelGraph, samples, num_classes: int | None = None, score_thresh: float = 0.25,
             nms_iou: float = 0.5, gflops: float = 0.0, fps: float = 0.0) -> EvalReport:
    num_classes = model.num_classes if num_classes is None else num_classes
    preds = predict(model, samples, nms_iou=nms_iou, score_thresh=score_thresh)
    gts = ground_truths(samples)
    result = map_metrics(preds, gts, num_classes)
    stats, zero = [], []
    tot = [0, 0, 0]
    for c in range(num_classes):
        pc = _by_confidence([p for p in preds if p.class_id == c])
        gc = [g for g in gts if g.class_id == c]
        tp = sum(match_predictions(pc, gc, 0.5))
        fp, fn = len(pc) - tp, len(gc) - tp
        if tp + fp == 0 or tp + fn == 0:
            zero.append(c)
        p, r = precision_recall(tp, fp, fn)
        stats.append(ClassStats(c, p, r, result.per_class_ap50[c], tp, fp, fn))
        tot = [tot[0] + tp, tot[1] + fp, tot[2] + fn]
    p_all, r_all = precision_recall(*tot)
    cm = confusion_matrix(preds, gts, num_classes, 0.5, score_thresh)
    return EvalReport(stats, result.map50, result.map5095, cm.tolist(), gflops, fps, p_all, r_all, zero)


def fps_harness(model: ModelGraph, n_warmup: int = 50, n_timed: int = 200, image_size: int = 64,
                seed: int = 0) -> float:
    """Batch-1 forward passes only (no decoding or NMS); frames per second over the timed run."""
    if n_timed < 1:
        raise ValueError("n_timed must be >= 1")
    x = Tensor(np.random.default_rng(seed).random((1, 3, image_size, image_size)))
    # collector paused while timing, as timeit does, so sweeps of unrelated garbage don't land in the window
    gc_was_on = gc.isenabled()
    with threadpool_limits(limits=1):
        for _ in range(n_warmup):
            forward(model, x)
        gc.collect()
        gc.disable()
        try:
            start = time.perf_counter()
            for _ in range(n_timed):
                forward(model, x)
            elapsed = time.perf_counter() - start
        finally:
            if gc_was_on:
                gc.enable()
    return n_timed / max(elapsed, 1e-12)
