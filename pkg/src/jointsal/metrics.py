"""Evaluation metrics: mean IoU for segmentation, MAE and maximum F-measure
for saliency, plus text/record report emission."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .losses import IGNORE_LABEL


def confusion_matrix(prediction: np.ndarray, ground_truth: np.ndarray, num_classes: int) -> np.ndarray:
    """[num_classes, num_classes] int64 counts, rows = GT, cols = prediction.
    IGNORE_LABEL pixels in the ground truth are excluded."""
    prediction = np.asarray(prediction)
    ground_truth = np.asarray(ground_truth)
    if prediction.shape != ground_truth.shape:
        raise ValueError(f"prediction shape {prediction.shape} != ground truth shape {ground_truth.shape}")
    keep = ground_truth != IGNORE_LABEL
    pred = prediction[keep].astype(np.int64)
    gt = ground_truth[keep].astype(np.int64)
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels outside 0..{num_classes - 1}")
    counts = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


@dataclass
class MiouResult:
    per_class: list[float | None]   # None for classes absent from GT and prediction
    mean: float
    confusion: np.ndarray

    def present_classes(self) -> list[int]:
        return [k for k, v in enumerate(self.per_class) if v is not None]


def miou(predictions, ground_truths, num_classes: int) -> MiouResult:
    """Dataset-accumulated intersection-over-union per class and its mean.

    predictions / ground_truths: iterables of [H,W] integer label maps.
    Classes with empty union (absent from both GT and prediction) are
    reported as None and excluded from the mean.
    """
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, gt in zip(predictions, ground_truths, strict=True):
        total += confusion_matrix(pred, gt, num_classes)
    tp = np.diag(total)
    union = total.sum(axis=0) + total.sum(axis=1) - tp
    per_class: list[float | None] = []
    vals = []
    for k in range(num_classes):
        if union[k] == 0:
            per_class.append(None)
        else:
            iou = float(tp[k] / union[k])
            per_class.append(iou)
            vals.append(iou)
    if not vals:
        raise ValueError("no classes present in ground truth or predictions")
    return MiouResult(per_class, float(np.mean(vals)), total)


def _check_saliency_pair(sal: np.ndarray, gt: np.ndarray):
    if sal.shape != gt.shape:
        raise ValueError(f"saliency map shape {sal.shape} != mask shape {gt.shape}")
    if sal.min() < 0 or sal.max() > 1:
        raise ValueError("saliency values must lie in [0,1]")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth masks must be binary")


def mae(sal_maps, gt_masks) -> float:
    """Mean absolute error over all pixels of all images."""
    total = 0.0
    count = 0
    for sal, gt in zip(sal_maps, gt_masks, strict=True):
        sal = np.asarray(sal, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        _check_saliency_pair(sal, gt)
        total += np.abs(sal - gt).sum()
        count += sal.size
    if count == 0:
        raise ValueError("no pixels to evaluate")
    return total / count


@dataclass
class SaliencyEvalCurve:
    thresholds: np.ndarray   # 0..255
    precision: np.ndarray
    recall: np.ndarray
    fbeta: np.ndarray


def max_fmeasure(sal_maps, gt_masks, beta_sq: float = 0.3,
                 per_image: bool = False) -> tuple[float, int, SaliencyEvalCurve]:
    """Maximum F-measure over 256 binarization thresholds of the quantized maps.

    Maps are quantized to 0..255; a pixel is predicted salient at threshold t
    when its quantized value is >= t. Precision/recall aggregate over the
    dataset by default (micro); per_image=True averages per-image
    precision/recall across images before computing F. Returns (max F, the
    lowest threshold attaining it, the full curve).
    """
    pos_hists = []
    neg_hists = []
    n_pos_total = 0
    for sal, gt in zip(sal_maps, gt_masks, strict=True):
        sal = np.asarray(sal, dtype=np.float64)
        gt = np.asarray(gt)
        _check_saliency_pair(sal, np.asarray(gt, dtype=np.float64))
        q = np.rint(sal * 255).astype(np.int64)
        pos_hists.append(np.bincount(q[gt == 1], minlength=256))
        neg_hists.append(np.bincount(q[gt == 0], minlength=256))
        n_pos_total += int((gt == 1).sum())
    if not pos_hists:
        raise ValueError("no maps to evaluate")
    if n_pos_total == 0:
        raise ValueError("ground truth contains no salient pixels; recall is undefined")

    def curve_from(pos_hist, neg_hist):
        # predicted-positive counts for threshold t are suffix sums over q >= t
        tp = np.cumsum(pos_hist[::-1])[::-1].astype(np.float64)
        fp = np.cumsum(neg_hist[::-1])[::-1].astype(np.float64)
        n_pos = pos_hist.sum()
        predicted = tp + fp
        precision = np.divide(tp, predicted, out=np.zeros(256), where=predicted > 0)
        recall = tp / n_pos if n_pos > 0 else np.zeros(256)
        return precision, recall

    if per_image:
        pr = [curve_from(p, n) for p, n in zip(pos_hists, neg_hists) if p.sum() > 0]
        precision = np.mean([p for p, _ in pr], axis=0)
        recall = np.mean([r for _, r in pr], axis=0)
    else:
        precision, recall = curve_from(np.sum(pos_hists, axis=0), np.sum(neg_hists, axis=0))

    denom = beta_sq * precision + recall
    fbeta = np.divide((1 + beta_sq) * precision * recall, denom, out=np.zeros(256), where=denom > 0)
    best = int(np.argmax(fbeta))
    curve = SaliencyEvalCurve(np.arange(256), precision, recall, fbeta)
    return float(fbeta[best]), best, curve


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def format_table(headers: list[str], rows: list[list], title: str = "") -> str:
    cells = [[f"{v:.4f}" if isinstance(v, float) else ("-" if v is None else str(v)) for v in row]
             for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    lines = []
    if title:
        lines.append(title)
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_records(path: str, records: list[dict]) -> None:
    """Line-delimited JSON records with stable key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def segmentation_report(result: MiouResult, class_names: list[str] | None = None) -> tuple[str, list[dict]]:
    n = len(result.per_class)
    names = class_names if class_names is not None else [f"class{k}" for k in range(n)]
    rows = [[names[k], result.per_class[k]] for k in range(n)]
    rows.append(["mean", result.mean])
    text = format_table(["class", "iou"], rows, title="segmentation")
    records = [{"metric": "iou", "class": names[k], "value": result.per_class[k]} for k in range(n)]
    records.append({"metric": "miou", "value": result.mean})
    return text, records


def saliency_report(mae_value: float, max_f: float, threshold: int) -> tuple[str, list[dict]]:
    text = format_table(["metric", "value"],
                        [["mae", mae_value], ["max_fbeta", max_f], ["best_threshold", threshold]],
                        title="saliency")
    records = [{"metric": "mae", "value": mae_value},
               {"metric": "max_fbeta", "value": max_f},
               {"metric": "best_threshold", "value": threshold}]
    return text, records
