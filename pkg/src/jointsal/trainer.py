"""Two-stage training orchestration: Adam with bias correction, a halving
learning-rate schedule, mixed per-step batches from the applicable datasets,
binary checkpoints, validation tracking, and batch prediction.

Each optimizer step draws one mini-batch per enabled loss term (category
batch for the class loss, saliency batch for the saliency loss, pseudo-label
batch for the pseudo loss), sums the losses, and applies one update. Runs
are bit-reproducible for a fixed (seed, config, data).
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import tensor as T
from .crf import CrfParams
from .metrics import MiouResult, mae, max_fmeasure, miou
from .model import ModelConfig, SegSaliencyNet, aggregate_saliency
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SSNC"
CHECKPOINT_VERSION = 1

VALID_TERMS = {1: ("class", "saliency"), 2: ("saliency", "pseudo")}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    """Bad magic, version, or structure in a checkpoint file."""


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update: bias-corrected moments, epsilon added to the
    corrected root second moment (p -= lr * m_hat / (sqrt(v_hat) + eps))."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], lr: float, iteration: int | None = None,
             lr_scales: dict[str, float] | None = None) -> None:
        """lr_scales maps parameter-name prefixes to learning-rate multipliers."""
        self.t += 1
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(grad).all():
                where = f" at iteration {iteration}" if iteration is not None else ""
                raise TrainingError(f"non-finite gradient for parameter {name!r}{where}")
            eff_lr = lr
            if lr_scales:
                for prefix, scale in lr_scales.items():
                    if name.startswith(prefix):
                        eff_lr = lr * scale
                        break
            adam_step(p.data, grad, self.m[name], self.v[name], self.t,
                      eff_lr, self.beta1, self.beta2, self.eps)


def lr_at(iteration: int, initial_lr: float, halving_interval: int) -> float:
    return initial_lr * 0.5 ** (iteration // halving_interval)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    iteration: int
    rng_state: dict | None

    def build_net(self) -> SegSaliencyNet:
        tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return SegSaliencyNet(self.model_config, tensors)


def save_checkpoint(path: str, model_config: ModelConfig, params: dict[str, Tensor],
                    adam: Adam | None = None, iteration: int = 0,
                    rng_state: dict | None = None) -> None:
    """Little-endian binary: magic, u32 version, u64 header length, JSON
    header with the tensor directory, then raw float64 payloads."""
    directory = []
    blobs = []
    offset = 0

    def put(name: str, kind: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name in params:
        put(name, "param", params[name].data)
    if adam is not None:
        for name in params:
            if name in adam.m:
                put(name, "adam_m", adam.m[name])
                put(name, "adam_v", adam.v[name])
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model_config.to_dict(),
        "iteration": iteration,
        "adam_t": adam.t if adam is not None else 0,
        "rng_state": rng_state,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[16 + header_len:]

    params: dict[str, np.ndarray] = {}
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).copy()
        {"param": params, "adam_m": adam_m, "adam_v": adam_v}[entry["kind"]][entry["name"]] = arr
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        params=params, adam_m=adam_m, adam_v=adam_v,
        adam_t=header.get("adam_t", 0),
        iteration=header.get("iteration", 0),
        rng_state=header.get("rng_state"),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    iterations: int = 2000            # paper-scale runs use 10000
    batch_size: int = 8               # paper-scale runs use 16
    lr: float = 1e-4
    lr_halving_interval: int = 200    # paper-scale runs use 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss_terms: tuple[str, ...] = ()  # empty = both defaults for the stage
    pixel_reduction: str = "mean"
    class_weight: float = 1.0
    saliency_weight: float = 1.0
    pseudo_weight: float = 1.0
    presence_cap: float | None = None   # pretraining-only class-loss variant
    # pretraining-only: also fit the saliency scores to the category vector so
    # they start semantically meaningful before any saliency supervision
    sam_presence_weight: float = 0.0
    grad_clip_norm: float | None = None
    # multiplier on the learning rate of the saliency-score head; keeping it
    # below 1 stops the scores saturating before the class channels anchor
    sam_lr_scale: float = 1.0
    # "mixed": every step draws one batch per loss term and sums the losses;
    # "alternating": steps cycle through the terms one at a time
    batch_mode: str = "mixed"
    eval_interval: int = 200          # 0 disables periodic validation
    log_interval: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("iterations", "batch_size", "lr_halving_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        terms = self.loss_terms or VALID_TERMS[self.stage]
        bad = set(terms) - set(VALID_TERMS[self.stage])
        if bad or not terms:
            raise ValueError(f"stage {self.stage} supports loss terms {VALID_TERMS[self.stage]}, got {terms}")
        object.__setattr__(self, "loss_terms", tuple(terms))
        if self.batch_mode not in ("mixed", "alternating"):
            raise ValueError(f"batch_mode must be mixed or alternating, got {self.batch_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss_terms"] = tuple(d.get("loss_terms", ()))
        return TrainConfig(**d)


class _Stream:
    """In-memory (image, label) source yielding seeded augmented batches."""

    def __init__(self, records, label_kind: str, stream_id: int, input_size: int, num_classes: int):
        self.stream_id = stream_id
        self.input_size = input_size
        self.images = np.stack([data_mod.load_image(r.image_path) for r in records])
        if label_kind == data_mod.KIND_CATEGORY:
            self.labels = np.stack([r.category_vector(num_classes) for r in records])
            self.is_mask = False
        elif label_kind == data_mod.KIND_SALIENCY:
            self.labels = np.stack([data_mod.load_mask(r.payload, binary=True) for r in records])
            self.is_mask = True
        elif label_kind == data_mod.KIND_PSEUDO:
            self.labels = np.stack([data_mod.load_mask(r.payload) for r in records])
            self.is_mask = True
        else:
            raise data_mod.ManifestError(f"stream cannot train on label kind {label_kind!r}")

    def __len__(self):
        return len(self.images)

    def batch(self, rng: np.random.Generator, seed: int, iteration: int, batch_size: int):
        idx = rng.choice(len(self.images), size=batch_size, replace=False)
        imgs, labels = [], []
        for slot, i in enumerate(idx):
            label = self.labels[i] if self.is_mask else None
            img, lab = data_mod.augment(self.images[i], label,
                                        seed=(seed, iteration, self.stream_id, slot),
                                        out_size=self.input_size)
            imgs.append(img)
            labels.append(lab if self.is_mask else self.labels[i])
        return np.stack(imgs), np.stack(labels)


@dataclass
class TrainResult:
    final_checkpoint: str
    best_checkpoint: str | None
    first_loss: float
    last_loss: float
    best_miou: float | None
    history: list[dict] = field(default_factory=list)


def _load_stream(manifest: str | None, kind: str, sid: int, term: str,
                 input_size: int, num_classes: int) -> _Stream:
    if manifest is None:
        raise ValueError(f"loss term {term!r} requires a {kind} manifest")
    return _Stream(data_mod.load_manifest(manifest), kind, sid, input_size, num_classes)


def train(model_config: ModelConfig, config: TrainConfig, out_dir: str,
          dc_manifest: str | None = None, ds_manifest: str | None = None,
          pseudo_manifest: str | None = None, val_seg_manifest: str | None = None,
          resume_from: str | None = None, init_from: str | None = None,
          init_prefixes: tuple[str, ...] = ("block",)) -> TrainResult:
    """Run one training stage; writes final.ckpt, best.ckpt (if validating),
    and train_log.jsonl under out_dir.

    init_from warm-starts from another checkpoint: parameters whose name
    starts with one of init_prefixes and whose shape matches are copied (the
    pretrained-backbone role; heads stay freshly initialized). resume_from
    instead continues an interrupted run of this same config exactly.
    """
    if model_config.stage != config.stage:
        raise ValueError(f"model stage {model_config.stage} != train stage {config.stage}")
    os.makedirs(out_dir, exist_ok=True)

    streams: dict[str, _Stream] = {}
    if "class" in config.loss_terms:
        streams["class"] = _load_stream(dc_manifest, data_mod.KIND_CATEGORY, 0, "class",
                                        model_config.input_size, model_config.num_classes)
    if "saliency" in config.loss_terms:
        streams["saliency"] = _load_stream(ds_manifest, data_mod.KIND_SALIENCY, 1, "saliency",
                                           model_config.input_size, model_config.num_classes)
    if "pseudo" in config.loss_terms:
        streams["pseudo"] = _load_stream(pseudo_manifest, data_mod.KIND_PSEUDO, 2, "pseudo",
                                         model_config.input_size, model_config.num_classes)
    for term, stream in streams.items():
        if len(stream) < config.batch_size:
            raise ValueError(f"{term} set has {len(stream)} images, smaller than batch {config.batch_size}")

    val_records = data_mod.load_manifest(val_seg_manifest) if val_seg_manifest else None

    adam = Adam(config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    start_iter = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        net = ckpt.build_net()
        adam.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
        adam.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
        adam.t = ckpt.adam_t
        start_iter = ckpt.iteration
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
    else:
        net = SegSaliencyNet(model_config)
        if init_from is not None:
            donor = load_checkpoint(init_from)
            for name, arr in donor.params.items():
                if (name.startswith(init_prefixes) and name in net.params
                        and net.params[name].data.shape == arr.shape):
                    net.params[name].data[:] = arr

    log_path = os.path.join(out_dir, "train_log.jsonl")
    history: list[dict] = []
    first_loss = last_loss = float("nan")
    best_miou: float | None = None
    best_state: tuple | None = None
    t_start = time.monotonic()

    with open(log_path, "a" if resume_from else "w", encoding="utf-8") as log_fh:
        for it in range(start_iter, config.iterations):
            lr = lr_at(it, config.lr, config.lr_halving_interval)
            total = None
            terms_logged = {}
            if config.batch_mode == "alternating" and len(config.loss_terms) > 1:
                step_terms = (config.loss_terms[it % len(config.loss_terms)],)
            else:
                step_terms = config.loss_terms
            for term in step_terms:
                imgs, labels = streams[term].batch(rng, config.seed, it, config.batch_size)
                features = net.extract_features(Tensor(imgs))
                seg = net.segmentation_head(features)
                if term == "class":
                    probs = T.spatial_mean(T.take_channels(seg, model_config.num_classes))
                    part = config.class_weight * losses_mod.class_loss(probs, labels,
                                                                       config.presence_cap)
                    if config.sam_presence_weight > 0:
                        scores = net.saliency_scores(features)
                        part = part + config.sam_presence_weight * losses_mod.presence_loss(
                            scores, labels)
                elif term == "saliency":
                    sal = aggregate_saliency(seg, net.saliency_scores(features))
                    part = config.saliency_weight * losses_mod.saliency_loss(
                        sal, labels, config.pixel_reduction)
                else:
                    part = config.pseudo_weight * losses_mod.pseudo_seg_loss(
                        seg, labels, config.pixel_reduction)
                terms_logged[f"loss_{term}"] = part.item()
                total = part if total is None else total + part
            total.backward()
            if config.grad_clip_norm is not None:
                clip_gradients(net.params, config.grad_clip_norm)
            scales = {"sam.": config.sam_lr_scale} if config.sam_lr_scale != 1.0 else None
            adam.step(net.params, lr, iteration=it, lr_scales=scales)
            net.zero_grad()

            loss_value = total.item()
            total = None
            if it == start_iter:
                first_loss = loss_value
            last_loss = loss_value

            if it % config.log_interval == 0 or it == config.iterations - 1:
                rec = {"iteration": it, "lr": lr, "loss_total": loss_value,
                       "wall_time": round(time.monotonic() - t_start, 3), **terms_logged}
                history.append(rec)
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

            if (val_records is not None and config.eval_interval
                    and (it + 1) % config.eval_interval == 0):
                result = evaluate_segmentation(net, val_records)
                if best_miou is None or result.mean > best_miou:
                    best_miou = result.mean
                    best_state = ({k: p.data.copy() for k, p in net.params.items()},
                                  {k: m.copy() for k, m in adam.m.items()},
                                  {k: v.copy() for k, v in adam.v.items()}, adam.t, it + 1)

    final_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(final_path, model_config, net.params, adam,
                    iteration=config.iterations, rng_state=rng.bit_generator.state)

    best_path = None
    if best_state is not None:
        best_path = os.path.join(out_dir, "best.ckpt")
        params, m_state, v_state, t_state, it_state = best_state
        best_adam = Adam(config.beta1, config.beta2, config.eps)
        best_adam.m, best_adam.v, best_adam.t = m_state, v_state, t_state
        save_checkpoint(best_path, model_config,
                        {k: Tensor(v) for k, v in params.items()}, best_adam, iteration=it_state)
    return TrainResult(final_path, best_path, first_loss, last_loss, best_miou, history)


def train_stage1(model_config: ModelConfig, config: TrainConfig, out_dir: str,
                 dc_manifest: str | None, ds_manifest: str | None,
                 val_seg_manifest: str | None = None, resume_from: str | None = None) -> TrainResult:
    if config.stage != 1:
        raise ValueError("train_stage1 requires a stage-1 config")
    return train(model_config, config, out_dir, dc_manifest=dc_manifest,
                 ds_manifest=ds_manifest, val_seg_manifest=val_seg_manifest, resume_from=resume_from)


def train_stage2(model_config: ModelConfig, config: TrainConfig, out_dir: str,
                 pseudo_manifest: str | None, ds_manifest: str | None,
                 val_seg_manifest: str | None = None, resume_from: str | None = None) -> TrainResult:
    if config.stage != 2:
        raise ValueError("train_stage2 requires a stage-2 config")
    return train(model_config, config, out_dir, ds_manifest=ds_manifest,
                 pseudo_manifest=pseudo_manifest, val_seg_manifest=val_seg_manifest,
                 resume_from=resume_from)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _forward_images(net: SegSaliencyNet, images: np.ndarray, batch: int = 16):
    segs, sals = [], []
    with T.no_grad():
        for start in range(0, len(images), batch):
            seg, sal, _ = net.forward(Tensor(images[start:start + batch]))
            segs.append(seg.data)
            sals.append(sal.data[:, 0])
    return np.concatenate(segs), np.concatenate(sals)


def evaluate_segmentation(net: SegSaliencyNet, val_records) -> MiouResult:
    images = np.stack([data_mod.load_image(r.image_path) for r in val_records])
    gts = [data_mod.load_mask(r.payload) for r in val_records]
    segs, _ = _forward_images(net, images)
    preds = segs.argmax(axis=1)
    return miou(list(preds), gts, net.config.num_classes + 1)


def evaluate_saliency(net: SegSaliencyNet, val_records, crf_params: CrfParams | None = None):
    """Returns (mae, max_f, best_threshold, curve); optionally CRF-refines
    each map against the raw image first."""
    from .crf import refine_saliency

    images = np.stack([data_mod.load_image(r.image_path) for r in val_records])
    gts = [data_mod.load_mask(r.payload, binary=True) for r in val_records]
    _, sals = _forward_images(net, images)
    maps = []
    for i, rec in enumerate(val_records):
        sal = np.clip(sals[i], 0.0, 1.0)
        if crf_params is not None:
            raw = data_mod.load_image(rec.image_path, normalize=False)
            sal = refine_saliency(raw, sal, crf_params)
        maps.append(sal)
    mae_value = mae(maps, gts)
    max_f, threshold, curve = max_fmeasure(maps, gts)
    return mae_value, max_f, threshold, curve


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
], dtype=np.uint8)


@dataclass
class PredictResult:
    written: list[str]
    failures: list[tuple[str, str]]


def predict(checkpoint_path: str, image_paths: list[str], out_dir: str,
            apply_crf: bool = False, crf_params: CrfParams | None = None) -> PredictResult:
    """Write per-image label, saliency, and overlay PNGs.

    Images are bilinearly resized to the network input size for inference and
    outputs are nearest-resized back to each image's original size. Per-file
    failures are recorded and the run continues.
    """
    from .crf import refine_saliency

    ckpt = load_checkpoint(checkpoint_path)
    net = ckpt.build_net()
    size = net.config.input_size
    crf_params = crf_params or CrfParams()
    os.makedirs(out_dir, exist_ok=True)

    written: list[str] = []
    failures: list[tuple[str, str]] = []
    for path in image_paths:
        try:
            img = data_mod.load_image(path)
            raw = data_mod.load_image(path, normalize=False)
            orig_h, orig_w = img.shape[1:]
            if (orig_h, orig_w) != (size, size):
                img_in = data_mod.bilinear_resize(img, size, size)
                raw_in = data_mod.bilinear_resize(raw, size, size)
            else:
                img_in, raw_in = img, raw
            with T.no_grad():
                seg, sal, _ = net.forward(Tensor(img_in[None]))
            labels = seg.data[0].argmax(axis=0).astype(np.uint8)
            sal_map = np.clip(sal.data[0, 0], 0.0, 1.0)
            if apply_crf:
                sal_map = refine_saliency(raw_in, sal_map, crf_params)
            if (orig_h, orig_w) != (size, size):
                labels = data_mod.nearest_resize(labels, orig_h, orig_w)
                sal_map = data_mod.nearest_resize(sal_map, orig_h, orig_w)

            colors = np.zeros((orig_h, orig_w, 3), dtype=np.uint8)
            fg = labels != net.config.num_classes
            colors[fg] = PALETTE[labels[fg] % len(PALETTE)]
            base = raw.transpose(1, 2, 0)
            overlay = np.clip(0.55 * base + 0.45 * colors, 0, 255).astype(np.uint8)

            stem = os.path.splitext(os.path.basename(path))[0]
            label_path = os.path.join(out_dir, f"{stem}_label.png")
            sal_path = os.path.join(out_dir, f"{stem}_saliency.png")
            overlay_path = os.path.join(out_dir, f"{stem}_overlay.png")
            data_mod.save_mask(label_path, labels)
            data_mod.save_mask(sal_path, np.rint(sal_map * 255).astype(np.uint8))
            data_mod.save_image(overlay_path, overlay)
            written.extend([label_path, sal_path, overlay_path])
        except (OSError, ValueError, data_mod.ManifestError) as exc:
            failures.append((path, str(exc)))
    return PredictResult(written, failures)
