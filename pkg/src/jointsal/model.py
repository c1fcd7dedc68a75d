"""Joint segmentation + saliency network.

One shared convolutional feature extractor at 1/8 input resolution feeds
three heads: a stage-specific segmentation head producing a per-pixel class
distribution over C foreground classes plus background, a whole-map
convolution producing one learned saliency score per class, and a weighted
sum that collapses the class masks into a single saliency map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

UPSAMPLE_FACTOR = 8


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    stage: int = 1
    dilation_rates: tuple[int, ...] = (1, 2, 3, 4)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % UPSAMPLE_FACTOR != 0:
            raise ValueError(f"input_size must be divisible by {UPSAMPLE_FACTOR}, got {self.input_size}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if len(self.widths) != 5:
            raise ValueError(f"expected 5 backbone widths, got {self.widths}")
        if len(self.dilation_rates) != 4:
            raise ValueError(f"expected 4 stage-2 dilation rates, got {self.dilation_rates}")

    @property
    def feature_size(self) -> int:
        return self.input_size // UPSAMPLE_FACTOR

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["dilation_rates"] = tuple(d["dilation_rates"])
        return ModelConfig(**d)


# (dilation, stride-on-second-conv) per backbone block; blocks 1-3 halve the
# resolution, blocks 4-5 keep it and dilate instead
_BLOCK_PLAN = ((1, 2), (1, 2), (1, 2), (2, 1), (4, 1))


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # relu-gain bound: keeps activation variance roughly constant through the
    # ten conv layers, which a plain 1/fan_in bound does not (signal decays to
    # ~1e-6 by the last block and the net cannot train from scratch quickly)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _identity_upsample_kernel(channels: int, k: int) -> np.ndarray:
    w = np.zeros((channels, channels, k, k))
    for c in range(channels):
        w[c, c] = 1.0
    return w


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Seeded parameter dictionary; draw order is fixed by name order."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}

    def conv(name: str, cout: int, cin: int, k: int):
        params[f"{name}.weight"] = Tensor(_uniform_init(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    cin = 3
    for idx, width in enumerate(config.widths, start=1):
        conv(f"block{idx}.conv1", width, cin, 3)
        conv(f"block{idx}.conv2", width, width, 3)
        cin = width
    feat = config.widths[-1]
    k_out = config.num_classes + 1

    if config.stage == 1:
        conv("head.conv", k_out, feat, 1)
    else:
        for br in range(1, 5):
            conv(f"head.branch{br}", k_out, feat, 3)
    # upsampler starts as exact nearest-neighbor so initial outputs stay on the simplex
    params["head.up.weight"] = Tensor(_identity_upsample_kernel(k_out, UPSAMPLE_FACTOR), requires_grad=True)

    fs = config.feature_size
    conv("sam.conv", config.num_classes, feat, fs)
    return params


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(p.data.size for name, p in params.items() if name.startswith(prefix))


def aggregate_saliency(seg: Tensor, scores: Tensor) -> Tensor:
    """Saliency map as the score-weighted sum of the foreground class masks.

    seg is [B,C+1,H,W] (last channel background, excluded), scores is [B,C].
    """
    if seg.data.shape[1] != scores.data.shape[1] + 1:
        raise ShapeError(
            f"expected seg with {scores.data.shape[1] + 1} channels for {scores.data.shape[1]} "
            f"saliency scores, got {seg.data.shape}"
        )
    return T.channel_weighted_sum(seg, scores)


class SegSaliencyNet:
    """Stage-1 or stage-2 variant of the joint network, selected by config."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def extract_features(self, image: Tensor) -> Tensor:
        """[B,3,S,S] -> [B,D,S/8,S/8]; blocks 1-3 downsample, 4-5 dilate."""
        s = self.config.input_size
        if image.data.ndim != 4 or image.data.shape[1] != 3 or image.data.shape[2:] != (s, s):
            raise ShapeError(f"expected input [B,3,{s},{s}], got {image.data.shape}")
        x = image
        for idx, (dilation, stride) in enumerate(_BLOCK_PLAN, start=1):
            w1, b1 = self.params[f"block{idx}.conv1.weight"], self.params[f"block{idx}.conv1.bias"]
            w2, b2 = self.params[f"block{idx}.conv2.weight"], self.params[f"block{idx}.conv2.bias"]
            x = T.relu(T.conv2d(x, w1, b1, stride=1, dilation=dilation, padding=dilation))
            x = T.relu(T.conv2d(x, w2, b2, stride=stride, dilation=dilation, padding=dilation))
            # per-image channel normalization keeps the from-scratch stack trainable
            x = T.instance_norm(x)
        return x

    def _upsample_to_simplex(self, probs_low: Tensor) -> Tensor:
        up = T.conv_transpose2d(probs_low, self.params["head.up.weight"], stride=UPSAMPLE_FACTOR)
        return T.simplex_normalize(up)

    def stage1_head(self, features: Tensor) -> Tensor:
        if self.config.stage != 1:
            raise ValueError("stage1_head called on a stage-2 model")
        logits = T.conv2d(features, self.params["head.conv.weight"], self.params["head.conv.bias"])
        return self._upsample_to_simplex(T.channel_softmax(logits))

    def stage2_head(self, features: Tensor) -> Tensor:
        if self.config.stage != 2:
            raise ValueError("stage2_head called on a stage-1 model")
        logits = None
        for br, rate in enumerate(self.config.dilation_rates, start=1):
            w, b = self.params[f"head.branch{br}.weight"], self.params[f"head.branch{br}.bias"]
            branch = T.conv2d(features, w, b, dilation=rate, padding=rate)
            logits = branch if logits is None else T.add(logits, branch)
        return self._upsample_to_simplex(T.channel_softmax(logits))

    def segmentation_head(self, features: Tensor) -> Tensor:
        return self.stage1_head(features) if self.config.stage == 1 else self.stage2_head(features)

    def saliency_scores(self, features: Tensor) -> Tensor:
        """Whole-map convolution + sigmoid giving one score in (0,1) per class."""
        fs = self.config.feature_size
        if features.data.shape[2:] != (fs, fs):
            raise ShapeError(f"expected {fs}x{fs} features for the saliency score kernel, got {features.data.shape}")
        out = T.conv2d(features, self.params["sam.conv.weight"], self.params["sam.conv.bias"])
        return T.reshape(T.sigmoid(out), (features.data.shape[0], self.config.num_classes))

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (seg [B,C+1,S,S], saliency [B,1,S,S], class_probs [B,C])."""
        features = self.extract_features(image)
        seg = self.segmentation_head(features)
        scores = self.saliency_scores(features)
        saliency = aggregate_saliency(seg, scores)
        class_probs = T.spatial_mean(T.take_channels(seg, self.config.num_classes))
        return seg, saliency, class_probs
