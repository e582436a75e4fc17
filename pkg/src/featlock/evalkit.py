"""Detection metrics: IoU, greedy TP/FP assignment, PR curves, VOC-2007
11-point AP and COCO-style 101-point AP averaged over IoU thresholds."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class GroundTruth:
    box: BoundingBox
    class_id: int


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map_value: float
    iou_thresholds: list[float]
    n_images: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "map": self.map_value,
            "iou_thresholds": list(self.iou_thresholds),
            "n_images": self.n_images,
            **({"meta": self.meta} if self.meta else {}),
        }


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _rank(dets: Sequence[Detection]) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def classify_tp_fp(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                   iou_thresh: float = 0.5) -> tuple[list[bool], int]:
    """Greedy matching of one image's detections, in descending confidence.

    Returns TP flags in the input order of ``dets`` and the FN count.  A
    detection is TP when some still-unmatched GT of its class has
    IoU >= ``iou_thresh``; the highest-IoU such GT is consumed.
    """
    matched = [False] * len(gts)
    flags = [False] * len(dets)
    for i in _rank(dets):
        d = dets[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != d.class_id:
                continue
            o = iou(d.box, g.box)
            if o >= iou_thresh and o > best_iou:
                best, best_iou = j, o
        if best >= 0:
            matched[best] = True
            flags[i] = True
    return flags, matched.count(False)


def precision_recall(flags: Sequence[bool], n_gt: int) -> list[tuple[float, float]]:
    """(recall, precision) after each detection of an already-ranked list."""
    if n_gt <= 0:
        return []
    curve = []
    tp = fp = 0
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))
    return curve


def average_precision_voc07(curve: Sequence[tuple[float, float]]) -> float:
    if not curve:
        return 0.0
    rec = np.array([r for r, _ in curve])
    prec = np.array([p for _, p in curve])
    total = 0.0
    for k in range(11):
        mask = rec >= k / 10
        total += float(prec[mask].max()) if mask.any() else 0.0
    return total / 11


def average_precision_coco(curve: Sequence[tuple[float, float]]) -> float:
    """101-point interpolated AP over the precision envelope."""
    if not curve:
        return 0.0
    rec = np.array([r for r, _ in curve])
    prec = np.array([p for _, p in curve])
    env = np.maximum.accumulate(prec[::-1])[::-1]
    grid = np.arange(101) / 100
    idx = np.searchsorted(rec, grid, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(q.sum() / 101)


def mean_ap(per_class_ap: Mapping[int, float]) -> float:
    if not per_class_ap:
        raise ValueError("mAP needs at least one class with ground truth")
    vals = [float(v) for v in per_class_ap.values()]
    return sum(vals) / len(vals)


def _class_flags(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
                 thresh: float):
    """Per class: ranked TP flags across the whole set and the GT count."""
    flags = defaultdict(list)  # class -> list[(confidence, order, is_tp)]
    n_gt = defaultdict(int)
    order = 0
    for img_dets, img_gts in zip(dets, gts):
        for g in img_gts:
            n_gt[g.class_id] += 1
        tp, _ = classify_tp_fp(img_dets, img_gts, thresh)
        for d, f in zip(img_dets, tp):
            flags[d.class_id].append((d.confidence, order, f))
            order += 1
    ranked = {}
    for cls in n_gt:
        items = sorted(flags.get(cls, []), key=lambda t: (-t[0], t[1]))
        ranked[cls] = [f for _, _, f in items]
    return ranked, n_gt


def voc07_map(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
              iou_thresh: float = 0.5) -> EvalReport:
    """Dataset-level VOC-2007 mAP; ``dets[i]``/``gts[i]`` belong to image i."""
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same images")
    ranked, n_gt = _class_flags(dets, gts, iou_thresh)
    ap = {c: average_precision_voc07(precision_recall(ranked[c], n_gt[c])) for c in sorted(n_gt)}
    return EvalReport(ap, mean_ap(ap), [iou_thresh], n_images=len(gts))


def coco_map(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[GroundTruth]],
             thresholds: Iterable[float] = COCO_THRESHOLDS) -> EvalReport:
    """101-point AP per class and threshold, averaged over thresholds, then classes."""
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same images")
    sums: dict[int, float] = defaultdict(float)
    for t in thresholds:
        ranked, n_gt = _class_flags(dets, gts, t)
        for c in n_gt:
            sums[c] += average_precision_coco(precision_recall(ranked[c], n_gt[c]))
    ap = {c: sums[c] / len(thresholds) for c in sorted(sums)}
    return EvalReport(ap, mean_ap(ap), thresholds, n_images=len(gts))


# ---------------------------------------------------------------------------
# JSON lines interchange
# ---------------------------------------------------------------------------


def write_jsonl(path, items_by_image: Sequence[Sequence[GroundTruth | Detection]],
                image_ids: Sequence | None = None) -> None:
    ids = list(range(len(items_by_image))) if image_ids is None else list(image_ids)
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, items in zip(ids, items_by_image):
            for it in items:
                rec = {"image_id": image_id, "class_id": it.class_id, "box": it.box.as_list()}
                if isinstance(it, Detection):
                    rec["confidence"] = it.confidence
                fh.write(json.dumps(rec) + "\n")


def read_jsonl(path, image_ids: Sequence | None = None) -> tuple[list, list]:
    """Read annotations or detections, grouped by image.

    Returns (image_ids, items_by_image).  Records with a ``confidence`` field
    become Detections, the rest GroundTruths.  If ``image_ids`` is given the
    output follows that order (images without records get empty lists).
    """
    groups: dict = defaultdict(list)
    seen = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        box = BoundingBox(*map(float, rec["box"]))
        iid = rec["image_id"]
        if iid not in groups:
            seen.append(iid)
        if "confidence" in rec:
            groups[iid].append(Detection(box, int(rec["class_id"]), float(rec["confidence"])))
        else:
            groups[iid].append(GroundTruth(box, int(rec["class_id"])))
    ids = seen if image_ids is None else list(image_ids)
    return ids, [groups.get(i, []) for i in ids]
