"""Stage-1 to stage-2 bridge: turn stage-1 segmentation outputs on the
classification set into hard per-pixel pseudo labels.

Per image: forward pass, suppress channels of absent categories by
multiplying with the one-hot image label, CRF-refine at full image
resolution, then per-pixel argmax (low-confidence pixels optionally become
the ignore label). Labels are persisted as 8-bit single-channel PNGs whose
pixel value is the label (255 = ignore), plus a manifest mapping image path
to label path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import data
from . import tensor as T
from .crf import CrfParams, densecrf_refine
from .losses import IGNORE_LABEL
from .tensor import Tensor

BACKGROUND_CONFIDENCE_FLOOR = 0.5


def mask_by_labels(seg: np.ndarray, categories: np.ndarray) -> np.ndarray:
    """Zero out foreground channels of absent categories; background channel
    passes through; no renormalization (CRF unaries are built downstream)."""
    seg = np.asarray(seg, dtype=np.float64)
    categories = np.asarray(categories, dtype=np.float64)
    if seg.ndim != 3 or seg.shape[0] != categories.shape[0] + 1:
        raise ValueError(f"expected [C+1,H,W] scores for C={categories.shape[0]} categories, got {seg.shape}")
    out = seg.copy()
    out[:-1] *= categories[:, None, None]
    return out


def assign_pseudo_labels(refined: np.ndarray, min_confidence: float | None = BACKGROUND_CONFIDENCE_FLOOR) -> np.ndarray:
    """Per-pixel argmax over C+1 channels (ties to the lowest channel index).

    The last channel maps to the background label C. Pixels whose winning
    probability is below min_confidence become IGNORE_LABEL; pass None to
    disable the floor.
    """
    refined = np.asarray(refined)
    if refined.ndim != 3:
        raise ValueError(f"expected [K,H,W] distribution, got shape {refined.shape}")
    labels = refined.argmax(axis=0).astype(np.uint8)
    if min_confidence is not None:
        conf = refined.max(axis=0)
        labels[conf < min_confidence] = IGNORE_LABEL
    return labels


@dataclass
class PseudoDatasetResult:
    manifest_path: str
    n_written: int
    failures: list[tuple[str, str]]   # (image path, error message)


def generate_pseudo_dataset(net, dc_manifest: str, out_dir: str,
                            crf_params: CrfParams | None = None,
                            min_confidence: float | None = BACKGROUND_CONFIDENCE_FLOOR,
                            forward_batch: int = 8) -> PseudoDatasetResult:
    """Run the trained stage-1 net over the classification set and persist
    pseudo labels. Per-file I/O errors are recorded and skipped; the manifest
    keeps the input order. Deterministic given net parameters and inputs.
    """
    crf_params = crf_params or CrfParams()
    records = data.load_manifest(dc_manifest)
    os.makedirs(out_dir, exist_ok=True)
    c = net.config.num_classes

    entries: list[tuple[str, str, str]] = []
    failures: list[tuple[str, str]] = []
    for start in range(0, len(records), forward_batch):
        chunk = records[start:start + forward_batch]
        loaded = []
        for rec in chunk:
            try:
                img = data.load_image(rec.image_path)
                raw = data.load_image(rec.image_path, normalize=False)
                loaded.append((rec, img, raw))
            except (OSError, data.ManifestError) as exc:
                failures.append((rec.image_path, str(exc)))
        if not loaded:
            continue
        with T.no_grad():
            batch = Tensor(np.stack([img for _, img, _ in loaded]))
            seg = net.segmentation_head(net.extract_features(batch)).data
        for (rec, _, raw), seg_i in zip(loaded, seg):
            try:
                masked = mask_by_labels(seg_i, rec.category_vector(c))
                refined = densecrf_refine(raw, masked, crf_params)
                labels = assign_pseudo_labels(refined, min_confidence)
                stem = os.path.splitext(os.path.basename(rec.image_path))[0]
                label_path = os.path.join(out_dir, f"{stem}_pseudo.png")
                tmp_path = label_path + ".tmp"
                data.save_mask(tmp_path, labels)
                os.replace(tmp_path, label_path)
                entries.append((rec.image_path, data.KIND_PSEUDO, label_path))
            except (OSError, ValueError) as exc:
                failures.append((rec.image_path, str(exc)))

    manifest_path = os.path.join(out_dir, "pseudo.manifest")
    data.write_manifest(manifest_path, entries)
    return PseudoDatasetResult(manifest_path, len(entries), failures)
