"""Synthetic shape scenes, manifest files, image I/O, and crop augmentation.

Scenes contain 1-3 shapes from five kinds (the five semantic classes) over a
solid or gradient background with sensor noise; one shape per scene is marked
salient. Three splits are produced: a classification set carrying only the
set of shape kinds per image, a saliency set carrying only the binary mask of
the salient shape, and a validation set carrying full per-pixel class ground
truth plus the saliency mask (evaluation only).

Manifest format: UTF-8 text, one record per line,
`<image-path>\t<label-kind>\t<payload-or-path>`, paths relative to the
manifest file. Category payloads are comma-separated class indices.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

SHAPE_KINDS = ("circle", "square", "triangle", "ring", "cross")
NUM_CLASSES = len(SHAPE_KINDS)

KIND_CATEGORY = "category-vector"
KIND_SALIENCY = "saliency-mask"
KIND_SEGMENTATION = "segmentation-mask"
KIND_PSEUDO = "pseudo-label"
_KINDS = (KIND_CATEGORY, KIND_SALIENCY, KIND_SEGMENTATION, KIND_PSEUDO)

NORM_MEAN = np.array([0.485, 0.456, 0.406])
NORM_STD = np.array([0.229, 0.224, 0.225])


class ManifestError(ValueError):
    """Malformed or inconsistent manifest content."""


# ---------------------------------------------------------------------------
# image / mask I/O
# ---------------------------------------------------------------------------

def save_image(path: str, rgb: np.ndarray) -> None:
    """Write a [H,W,3] uint8 array as RGB PNG."""
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_image(path: str, normalize: bool = True) -> np.ndarray:
    """Read an RGB PNG to float64 [3,H,W].

    normalize=True scales to [0,1] and applies the fixed mean/std constants;
    normalize=False returns raw 0..255 values (the scale CRF color stddevs
    are expressed in).
    """
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc
    chw = rgb.transpose(2, 0, 1)
    if not normalize:
        return chw
    return (chw / 255.0 - NORM_MEAN[:, None, None]) / NORM_STD[:, None, None]


def denormalize_image(img: np.ndarray) -> np.ndarray:
    """Inverse of load_image normalization, back to uint8 [H,W,3]."""
    raw = (img * NORM_STD[:, None, None] + NORM_MEAN[:, None, None]) * 255.0
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_mask(path: str, mask: np.ndarray) -> None:
    """Write a [H,W] uint8 array as grayscale PNG."""
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path, format="PNG")


def load_mask(path: str, binary: bool = False) -> np.ndarray:
    """Read a grayscale PNG to uint8 [H,W]; binary=True maps 0/255 to 0/1."""
    try:
        with Image.open(path) as im:
            mask = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read mask {path}: {exc}") from exc
    if binary:
        bad = np.setdiff1d(np.unique(mask), [0, 255])
        if bad.size:
            raise ManifestError(f"binary mask {path} contains values {bad.tolist()}")
        return (mask == 255).astype(np.uint8)
    return mask


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    kind: str
    payload: str          # comma-separated class indices, or a label path

    def category_indices(self) -> list[int]:
        if self.kind != KIND_CATEGORY:
            raise ManifestError(f"record for {self.image_path} has kind {self.kind}, not {KIND_CATEGORY}")
        return [int(tok) for tok in self.payload.split(",")]

    def category_vector(self, num_classes: int = NUM_CLASSES) -> np.ndarray:
        vec = np.zeros(num_classes)
        for idx in self.category_indices():
            if not 0 <= idx < num_classes:
                raise ManifestError(f"class index {idx} out of range for {self.image_path}")
            vec[idx] = 1.0
        return vec


def write_manifest(path: str, records: list[tuple[str, str, str]]) -> None:
    """Write records; any path fields are stored relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for image_path, kind, payload in records:
        if kind not in _KINDS:
            raise ManifestError(f"unknown label kind {kind!r}")
        rel_img = os.path.relpath(image_path, base)
        rel_payload = payload if kind == KIND_CATEGORY else os.path.relpath(payload, base)
        lines.append(f"{rel_img}\t{kind}\t{rel_payload}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def load_manifest(path: str, check_files: bool = True) -> list[ManifestRecord]:
    """Parse a manifest; paths come back absolute. All records must share one
    label kind and referenced files must exist."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records: list[ManifestRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            img, kind, payload = parts
            if kind not in _KINDS:
                raise ManifestError(f"{path}:{lineno}: unknown label kind {kind!r}")
            img_abs = os.path.normpath(os.path.join(base, img))
            payload_abs = payload if kind == KIND_CATEGORY else os.path.normpath(os.path.join(base, payload))
            records.append(ManifestRecord(img_abs, kind, payload_abs))
    kinds = {r.kind for r in records}
    if len(kinds) > 1:
        raise ManifestError(f"{path}: mixed label kinds {sorted(kinds)}")
    if check_files:
        for r in records:
            if not os.path.exists(r.image_path):
                raise ManifestError(f"{path}: missing image file {r.image_path}")
            if r.kind != KIND_CATEGORY and not os.path.exists(r.payload):
                raise ManifestError(f"{path}: missing label file {r.payload}")
    return records


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    image: np.ndarray        # [H,W,3] uint8
    class_mask: np.ndarray   # [H,W] uint8, values 0..C (C = background)
    saliency_mask: np.ndarray  # [H,W] uint8 in {0,1}
    categories: np.ndarray   # [C] one-hot of visible shape kinds


def _shape_mask(kind: str, cy: float, cx: float, r: float, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dy = yy - cy
    dx = xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if kind == "cross":
        arm = 0.45 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape kind {kind!r}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    """h in degrees, s/v in [0,1]; returns RGB in 0..255."""
    h = (h % 360.0) / 60.0
    i = int(h) % 6
    f = h - int(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb) * 255.0


def _object_color(rng: np.random.Generator, kind: int, avoid: np.ndarray) -> np.ndarray:
    """Class-correlated hue band with jitter; shape alone is not learnable
    from scratch in the desk-scale budget, hue + shape is."""
    for _ in range(10):
        hue = kind * (360.0 / NUM_CLASSES) + rng.uniform(-16.0, 16.0)
        color = _hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        if np.abs(color - avoid).sum() >= 120:
            return color
    return color


def generate_scene(rng: np.random.Generator, canvas: int, salient_exception_rate: float = 0.2,
                   clutter_rate: float = 0.2, n_objects: int | None = None) -> Scene:
    """One random scene; every random draw goes through rng in fixed order.

    n_objects pins the object count (saliency-set scenes use 1, like the
    single-dominant-object photographs of saliency benchmarks); by default
    1-3 objects with decreasing probability.
    """
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)

    bg_a = rng.uniform(20, 235, size=3)
    if rng.random() < 0.5:
        img = np.broadcast_to(bg_a, (canvas, canvas, 3)).copy()
    else:
        bg_b = rng.uniform(20, 235, size=3)
        axis = yy if rng.random() < 0.5 else xx
        t = (axis / (canvas - 1))[..., None]
        img = bg_a * (1 - t) + bg_b * t
    bg_mean = img.mean(axis=(0, 1))

    # distractor clutter: tiny background-class marks, well below object scale
    if rng.random() < clutter_rate:
        for _ in range(int(rng.integers(2, 6))):
            ccy, ccx = rng.uniform(2, canvas - 2, size=2)
            cr = rng.uniform(0.8, max(1.6, 0.035 * canvas))
            dot = (yy - ccy) ** 2 + (xx - ccx) ** 2 <= cr * cr
            img[dot] = rng.uniform(25, 230, size=3)

    n_obj = n_objects if n_objects is not None else 1 + int(rng.random() >= 0.5) + int(rng.random() >= 0.8)
    kinds = rng.choice(NUM_CLASSES, size=n_obj, replace=False)
    owner = np.full((canvas, canvas), -1, dtype=np.int64)
    for i in range(n_obj):
        # radii sized to span several cells of the 1/8-resolution prediction
        # grid; much smaller shapes are not localizable after 8x upsampling
        r = rng.uniform(0.20, 0.38) * canvas
        cy = rng.uniform(r + 1, canvas - r - 1)
        cx = rng.uniform(r + 1, canvas - r - 1)
        color = _object_color(rng, int(kinds[i]), bg_mean)
        mask = _shape_mask(SHAPE_KINDS[kinds[i]], cy, cx, r, yy, xx)
        img[mask] = color
        owner[mask] = i

    noise_sigma = rng.uniform(2.0, 8.0)
    img = img + rng.normal(scale=noise_sigma, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    areas = np.array([(owner == i).sum() for i in range(n_obj)])
    visible = np.nonzero(areas > 0)[0]
    use_random = rng.random() < salient_exception_rate
    random_pick = int(rng.integers(0, len(visible))) if len(visible) else 0
    salient = visible[random_pick] if use_random else visible[np.argmax(areas[visible])]

    class_mask = np.full((canvas, canvas), NUM_CLASSES, dtype=np.uint8)
    for i in range(n_obj):
        class_mask[owner == i] = kinds[i]
    saliency_mask = (owner == salient).astype(np.uint8)

    categories = np.zeros(NUM_CLASSES)
    for i in visible:
        categories[kinds[i]] = 1.0
    return Scene(image, class_mask, saliency_mask, categories)


@dataclass(frozen=True)
class DatasetPaths:
    root: str
    dc_manifest: str
    ds_manifest: str
    val_seg_manifest: str
    val_sal_manifest: str


def generate_dataset(out_dir: str, seed: int, n_class_images: int, n_saliency_images: int,
                     n_val: int, canvas: int = 64) -> DatasetPaths:
    """Render the three disjoint splits and write images, masks, manifests."""
    for count, name in ((n_class_images, "n_class_images"), (n_saliency_images, "n_saliency_images"),
                        (n_val, "n_val")):
        if count < 1:
            raise ValueError(f"{name} must be >= 1, got {count}")
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    try:
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise OSError(f"output directory not writable: {out_dir} ({exc})") from exc

    rng = np.random.default_rng(seed)
    dc_records, ds_records, val_seg_records, val_sal_records = [], [], [], []

    for i in range(n_class_images):
        scene = generate_scene(rng, canvas)
        img_path = os.path.join(img_dir, f"dc_{i:05d}.png")
        save_image(img_path, scene.image)
        present = ",".join(str(c) for c in np.nonzero(scene.categories)[0])
        dc_records.append((img_path, KIND_CATEGORY, present))

    for i in range(n_saliency_images):
        scene = generate_scene(rng, canvas, n_objects=1)
        img_path = os.path.join(img_dir, f"ds_{i:05d}.png")
        mask_path = os.path.join(mask_dir, f"ds_{i:05d}.png")
        save_image(img_path, scene.image)
        save_mask(mask_path, scene.saliency_mask * 255)
        ds_records.append((img_path, KIND_SALIENCY, mask_path))

    for i in range(n_val):
        scene = generate_scene(rng, canvas)
        img_path = os.path.join(img_dir, f"val_{i:05d}.png")
        seg_path = os.path.join(mask_dir, f"val_seg_{i:05d}.png")
        sal_path = os.path.join(mask_dir, f"val_sal_{i:05d}.png")
        save_image(img_path, scene.image)
        save_mask(seg_path, scene.class_mask)
        save_mask(sal_path, scene.saliency_mask * 255)
        val_seg_records.append((img_path, KIND_SEGMENTATION, seg_path))
        val_sal_records.append((img_path, KIND_SALIENCY, sal_path))

    paths = DatasetPaths(
        root=out_dir,
        dc_manifest=os.path.join(out_dir, "dc.manifest"),
        ds_manifest=os.path.join(out_dir, "ds.manifest"),
        val_seg_manifest=os.path.join(out_dir, "val_seg.manifest"),
        val_sal_manifest=os.path.join(out_dir, "val_sal.manifest"),
    )
    write_manifest(paths.dc_manifest, dc_records)
    write_manifest(paths.ds_manifest, ds_records)
    write_manifest(paths.val_seg_manifest, val_seg_records)
    write_manifest(paths.val_sal_manifest, val_sal_records)
    return paths


# ---------------------------------------------------------------------------
# augmentation and resizing
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """[C,H,W] float resize with half-pixel-centered sampling."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """[H,W] resize taking the nearest source sample; values pass through."""
    h, w = mask.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[ys][:, xs]


def augment(image: np.ndarray, label, seed, out_size: int):
    """Random 9/10 crop rescaled to out_size; pixel labels move with pixels.

    image: [3,H,W] float. label: None, a 1-d category vector (returned
    unchanged), or a [H,W] mask (cropped identically, nearest-resized).
    seed: anything np.random.default_rng accepts (an int or a tuple of ints).
    """
    rng = np.random.default_rng(seed)
    _, h, w = image.shape
    ch, cw = int(0.9 * h), int(0.9 * w)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    img = bilinear_resize(image[:, oy:oy + ch, ox:ox + cw], out_size, out_size)
    if label is None or np.asarray(label).ndim == 1:
        return img, label
    mask = np.asarray(label)
    if mask.ndim != 2:
        raise ValueError(f"label must be 1-d vector or 2-d mask, got shape {mask.shape}")
    return img, nearest_resize(mask[oy:oy + ch, ox:ox + cw], out_size, out_size)
