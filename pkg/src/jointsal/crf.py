"""Fully connected CRF refinement via mean-field inference.

Pairwise energy uses a Potts label compatibility with two Gaussian kernels: a
spatial smoothness kernel and an appearance kernel over position + color.
Message passing is the exact pairwise sum (no lattice approximation): the
smoothness kernel factorizes into exact 1-d convolutions along each axis, the
appearance kernel is materialized as a dense N x N matrix per image. Kernels
are normalized symmetrically (D^-1/2 K D^-1/2) with self-connections removed.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 10
    smoothness_weight: float = 3.0
    smoothness_sigma: float = 3.0
    appearance_weight: float = 5.0
    appearance_sigma_spatial: float = 30.0
    appearance_sigma_color: float = 13.0
    # pairwise kernel matrices and their matmuls; float32 is ~4x faster on one
    # core and only perturbs refined probabilities at the 1e-5 level
    kernel_dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("smoothness_sigma", "appearance_sigma_spatial", "appearance_sigma_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.smoothness_weight < 0 or self.appearance_weight < 0:
            raise ValueError("pairwise weights must be >= 0")
        if self.kernel_dtype not in ("float32", "float64"):
            raise ValueError(f"kernel_dtype must be float32 or float64, got {self.kernel_dtype}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "CrfParams":
        return CrfParams(**d)


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, max-stabilized."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _axis_kernel(n: int, sigma: float) -> np.ndarray:
    d = np.arange(n, dtype=np.float64)
    return np.exp(-((d[:, None] - d[None, :]) ** 2) / (2.0 * sigma * sigma))


_position_cache: dict[tuple, np.ndarray] = {}


def _position_sq(h: int, w: int, sigma: float, dtype) -> np.ndarray:
    """|p_m - p_n|^2 / (2 sigma^2) for all pixel pairs, cached per geometry."""
    key = (h, w, float(sigma), np.dtype(dtype).str)
    if key not in _position_cache:
        yy, xx = np.mgrid[0:h, 0:w]
        pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        sq = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2) / (2.0 * sigma * sigma)
        while len(_position_cache) >= 4:
            _position_cache.pop(next(iter(_position_cache)))
        _position_cache[key] = sq.astype(dtype)
    return _position_cache[key]


class _SmoothnessKernel:
    """Zero-diagonal spatial Gaussian, applied exactly via separable 1-d blurs."""

    def __init__(self, h: int, w: int, sigma: float):
        self.h, self.w = h, w
        self.ky = _axis_kernel(h, sigma)
        self.kx = _axis_kernel(w, sigma)
        degree = self._apply_raw(np.ones((h * w, 1)))[:, 0] - 1.0
        self.scale = 1.0 / np.sqrt(np.maximum(degree, 1e-30))
        self.scale[degree <= 0] = 0.0

    def _apply_raw(self, q: np.ndarray) -> np.ndarray:
        k = q.shape[1]
        t = self.ky @ q.reshape(self.h, self.w * k)
        t = t.reshape(self.h, self.w, k).transpose(1, 0, 2).reshape(self.w, self.h * k)
        t = self.kx @ t
        return t.reshape(self.w, self.h, k).transpose(1, 0, 2).reshape(self.h * self.w, k)

    def message(self, q: np.ndarray) -> np.ndarray:
        s = self.scale[:, None]
        qs = q * s
        return s * (self._apply_raw(qs) - qs)


class _AppearanceKernel:
    """Zero-diagonal dense Gaussian over (position, color), one matrix per image."""

    def __init__(self, colors: np.ndarray, h: int, w: int, sigma_spatial: float,
                 sigma_color: float, dtype):
        c = colors.astype(dtype)
        # exp(-|dp|^2/2sa^2 - |dc|^2/2sc^2) built in one buffer:
        # |dc|^2 = |c_m|^2 + |c_n|^2 - 2 c_m.c_n via the gram matrix
        sq_norm = (c * c).sum(axis=1) / np.asarray(2.0 * sigma_color ** 2, dtype)
        buf = c @ c.T
        buf /= np.asarray(sigma_color ** 2, dtype)
        buf -= sq_norm[:, None]
        buf -= sq_norm[None, :]
        buf -= _position_sq(h, w, sigma_spatial, dtype)
        self.g = np.exp(buf, out=buf)
        # flush vanishing affinities: subnormal float32 entries would slow the
        # matmul by order of magnitude and contribute nothing to messages
        self.g[self.g < 1e-20] = 0.0
        np.fill_diagonal(self.g, 0.0)
        degree = self.g.sum(axis=1, dtype=np.float64)
        scale = 1.0 / np.sqrt(np.maximum(degree, 1e-30))
        scale[degree <= 0] = 0.0
        self.scale = scale.astype(dtype)[:, None]

    def message(self, q: np.ndarray) -> np.ndarray:
        qs = (q * self.scale).astype(self.g.dtype, copy=False)
        return (self.scale * (self.g @ qs)).astype(np.float64)


def densecrf_refine(image: np.ndarray, probs: np.ndarray, params: CrfParams) -> np.ndarray:
    """Mean-field refinement of per-pixel class scores against an image.

    image: [3,H,W] colors on the 0..255 scale (the color stddev is in these
    units); probs: [K,H,W] nonnegative per-pixel class scores, clamped to
    [1e-8, 1] and renormalized to form the unaries -log p. Returns a [K,H,W]
    per-pixel distribution.
    """
    probs = np.asarray(probs, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] < 2:
        raise ValueError(f"need [K,H,W] scores with K >= 2, got shape {probs.shape}")
    k, h, w = probs.shape
    if image.shape != (3, h, w):
        raise ValueError(f"image shape {image.shape} does not match scores {probs.shape}")
    if not np.isfinite(probs).all():
        raise ValueError("non-finite class scores")
    if not np.isfinite(image).all():
        raise ValueError("non-finite image")

    p = np.clip(probs, 1e-8, 1.0).reshape(k, -1).T
    p /= p.sum(axis=1, keepdims=True)
    unary = -np.log(p)

    q = _softmax_rows(-unary)
    w1, w2 = params.smoothness_weight, params.appearance_weight
    smooth = _SmoothnessKernel(h, w, params.smoothness_sigma) if w1 > 0 else None
    appear = None
    if w2 > 0:
        colors = image.reshape(3, -1).T
        appear = _AppearanceKernel(colors, h, w, params.appearance_sigma_spatial,
                                   params.appearance_sigma_color, np.dtype(params.kernel_dtype))

    for _ in range(params.iterations):
        m = np.zeros_like(q)
        if smooth is not None:
            m += w1 * smooth.message(q)
        if appear is not None:
            m += w2 * appear.message(q)
        # Potts compatibility: each label is penalized by the mass of all others
        pairwise = m.sum(axis=1, keepdims=True) - m
        q = _softmax_rows(-unary - pairwise)
    return q.T.reshape(k, h, w)


def refine_saliency(image: np.ndarray, saliency: np.ndarray, params: CrfParams) -> np.ndarray:
    """CRF refinement of a [H,W] saliency map in [0,1]; returns the salient-
    channel posterior."""
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.ndim == 3 and saliency.shape[0] == 1:
        saliency = saliency[0]
    if saliency.ndim != 2:
        raise ValueError(f"saliency map must be [H,W], got shape {saliency.shape}")
    if saliency.min() < 0 or saliency.max() > 1:
        raise ValueError("saliency map values must lie in [0,1]")
    scores = np.stack([saliency, 1.0 - saliency])
    return densecrf_refine(image, scores, params)[0]
