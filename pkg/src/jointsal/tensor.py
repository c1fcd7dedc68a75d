"""Dense float64 tensors with reverse-mode automatic differentiation.

Small numpy-backed engine: every operation records a backward closure on its
output, `backward()` on a scalar walks the graph in reverse topological order
and accumulates gradients additively. Reductions use numpy's fixed summation
order, so identical inputs give bit-identical outputs and gradients.
"""

from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        """Populate grad on every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _make(data, parents, backward) -> Tensor:
    """Wrap an op result; record the graph edge only when grads are wanted."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_pair(a, b):
    ta = isinstance(a, Tensor)
    tb = isinstance(b, Tensor)
    if ta and tb:
        if a.shape != b.shape:
            raise ShapeError(f"elementwise op on mismatched shapes {a.shape} and {b.shape}")
        return a, b
    if ta:
        return a, Tensor(np.full_like(a.data, float(b)))
    return Tensor(np.full_like(b.data, float(a))), b


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), _bwd)


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _make(a.data - b.data, (a, b), _bwd)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)

    def _bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _make(a.data * b.data, (a, b), _bwd)


def relu(x: Tensor) -> Tensor:
    def _bwd(g):
        x.accumulate_grad(g * (x.data > 0))

    return _make(np.maximum(x.data, 0.0), (x,), _bwd)


def sigmoid(x: Tensor) -> Tensor:
    # exp of -|x| only: saturates to 0/1 without overflow at large |x|
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def _bwd(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), _bwd)


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped to >= eps; gradient is 0 in the clamped region."""
    clamped = np.maximum(x.data, eps)

    def _bwd(g):
        x.accumulate_grad(np.where(x.data > eps, g / clamped, 0.0))

    return _make(np.log(clamped), (x,), _bwd)


def tsum(x: Tensor) -> Tensor:
    def _bwd(g):
        x.accumulate_grad(np.broadcast_to(g, x.data.shape))

    return _make(x.data.sum(), (x,), _bwd)


def reshape(x: Tensor, shape) -> Tensor:
    def _bwd(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), _bwd)


def spatial_mean(x: Tensor) -> Tensor:
    """[B,K,H,W] -> [B,K] arithmetic mean over the spatial axes."""
    if x.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects a 4-d tensor, got shape {x.shape}")
    hw = x.data.shape[2] * x.data.shape[3]

    def _bwd(g):
        x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / hw, x.data.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), _bwd)


def channel_softmax(x: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1 of a [B,K,H,W] tensor, max-stabilized."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_softmax expects a 4-d tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def _bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return _make(out_data, (x,), _bwd)


def take_channels(x: Tensor, count: int) -> Tensor:
    """First `count` channels of a [B,K,...] tensor; gradient zero elsewhere."""
    if count < 1 or count > x.data.shape[1]:
        raise ShapeError(f"cannot take {count} channels from shape {x.shape}")

    def _bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, :count] += g

    return _make(x.data[:, :count].copy(), (x,), _bwd)


def channel_weighted_sum(maps: Tensor, weights: Tensor) -> Tensor:
    """Collapse [B,K,H,W] to [B,1,H,W] as sum_i weights[b,i] * maps[b,i].

    `weights` is [B,C] with C <= K; channels beyond C (e.g. a trailing
    background channel) do not contribute and receive zero gradient.
    """
    if maps.data.ndim != 4 or weights.data.ndim != 2:
        raise ShapeError(f"channel_weighted_sum expects [B,K,H,W] and [B,C], got {maps.shape}, {weights.shape}")
    b, k = maps.data.shape[0], maps.data.shape[1]
    if weights.data.shape[0] != b or weights.data.shape[1] > k:
        raise ShapeError(f"weights {weights.shape} incompatible with maps {maps.shape}")
    c = weights.data.shape[1]
    out_data = np.einsum("bchw,bc->bhw", maps.data[:, :c], weights.data)[:, None]

    def _bwd(g):
        g0 = g[:, 0]
        if maps.requires_grad:
            if maps.grad is None:
                maps.grad = np.zeros_like(maps.data)
            maps.grad[:, :c] += g0[:, None] * weights.data[:, :, None, None]
        if weights.requires_grad:
            weights.accumulate_grad(np.einsum("bchw,bhw->bc", maps.data[:, :c], g0))

    return _make(out_data, (maps, weights), _bwd)


def simplex_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Clamp negatives to zero and renormalize axis 1 to a per-pixel distribution.

    Pixels whose clamped channel sum falls below eps get the uniform
    distribution (with zero gradient there).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"simplex_normalize expects a 4-d tensor, got shape {x.shape}")
    k = x.data.shape[1]
    r = np.maximum(x.data, 0.0)
    s = r.sum(axis=1, keepdims=True)
    safe = s > eps
    denom = np.where(safe, s, 1.0)
    out_data = np.where(safe, r / denom, 1.0 / k)

    def _bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        gr = np.where(safe, (g - dot) / denom, 0.0)
        x.accumulate_grad(gr * (x.data > 0))

    return _make(out_data, (x,), _bwd)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per (batch, channel) over the spatial axes.

    Parameter-free and batch-independent, so inference results do not depend
    on batch composition. Stabilizes from-scratch training of the plain conv
    backbone."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects a 4-d tensor, got shape {x.shape}")
    hw = x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = centered * inv

    def _bwd(g):
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gdot = (g * out_data).sum(axis=(2, 3), keepdims=True)
        x.accumulate_grad(inv * (g - gsum / hw - out_data * gdot / hw))

    return _make(out_data, (x,), _bwd)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest-neighbor upsampling; inference only."""
    if x.requires_grad:
        raise ValueError("nearest_upsample is not differentiable; use it only under no_grad")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    data = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    return Tensor(data)


def _conv_out_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    eff = dilation * (k - 1) + 1
    out = (size + 2 * padding - eff) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv output size {out} for input {size}, kernel {k}, "
            f"stride {stride}, dilation {dilation}, padding {padding}"
        )
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] plus bias [Cout]."""
    if dilation < 1 or stride < 1:
        raise ValueError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {b.data.shape} != ({cout},)")
    hout = _conv_out_size(h, kh, stride, dilation, padding)
    wout = _conv_out_size(wd, kw, stride, dilation, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # patches laid out [Cin,kh,kw,B,Hout,Wout] so the gemm view needs no copy
    xpm = xp.transpose(1, 0, 2, 3)
    patches = np.empty((cin, kh, kw, bsz, hout, wout), dtype=np.float64)
    hspan = (hout - 1) * stride + 1
    wspan = (wout - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patches[:, i, j] = xpm[:, :, i * dilation : i * dilation + hspan : stride,
                                   j * dilation : j * dilation + wspan : stride]
    cols = patches.reshape(cin * kh * kw, bsz * hout * wout)
    out2 = w.data.reshape(cout, -1) @ cols
    out2 += b.data[:, None]
    out_data = out2.reshape(cout, bsz, hout, wout).transpose(1, 0, 2, 3)

    def _bwd(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=1))
        if w.requires_grad:
            w.accumulate_grad((g2 @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            gcols = w.data.reshape(cout, -1).T @ g2
            gpatches = gcols.reshape(cin, kh, kw, bsz, hout, wout)
            gxp = np.zeros_like(xp)
            gxpm = gxp.transpose(1, 0, 2, 3)
            for i in range(kh):
                for j in range(kw):
                    gxpm[:, :, i * dilation : i * dilation + hspan : stride,
                         j * dilation : j * dilation + wspan : stride] += gpatches[:, i, j]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x.accumulate_grad(gxp)

    return _make(out_data, (x, w, b), _bwd)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution of [B,Cin,H,W] with [Cin,Cout,kh,kw].

    Output spatial size is (H-1)*stride + kh; with kh = kw = stride this is an
    exact stride-factor upsampling.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.data.shape
    cin_k, cout, kh, kw = w.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    hout = (h - 1) * stride + kh
    wout = (wd - 1) * stride + kw
    hspan = (h - 1) * stride + 1
    wspan = (wd - 1) * stride + 1

    out_data = np.zeros((bsz, cout, hout, wout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, w.data[:, :, i, j], axes=([1], [0]))
            out_data[:, :, i : i + hspan : stride, j : j + wspan : stride] += contrib.transpose(0, 3, 1, 2)

    def _bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gs = g[:, :, i : i + hspan : stride, j : j + wspan : stride]
                    gx += np.tensordot(gs, w.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
            x.accumulate_grad(gx)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(kh):
                for j in range(kw):
                    gs = g[:, :, i : i + hspan : stride, j : j + wspan : stride]
                    gw[:, :, i, j] = np.tensordot(x.data, gs, axes=([0, 2, 3], [0, 2, 3]))
            w.accumulate_grad(gw)

    return _make(out_data, (x, w), _bwd)
