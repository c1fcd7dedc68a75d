"""Central finite-difference gradient checking for the tensor engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def _central_diff(f: Callable[[], Tensor], flat: np.ndarray, idx: int, h: float) -> float:
    orig = flat[idx]
    flat[idx] = orig + h
    fp = f().item()
    flat[idx] = orig - h
    fm = f().item()
    flat[idx] = orig
    return (fp - fm) / (2.0 * h)


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                       indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of the scalar f() w.r.t. x, perturbing x in place.

    `indices` restricts the check to a subset of flat coordinates; the
    returned array is dense with unchecked entries set to nan.
    """
    flat = x.data.reshape(-1)
    grad = np.full(flat.size, np.nan)
    coords = range(flat.size) if indices is None else indices
    for idx in coords:
        grad[idx] = _central_diff(f, flat, idx, h)
    return grad.reshape(x.data.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - n| / max(|a|, |n|, floor) over the coordinates checked in n."""
    mask = ~np.isnan(numeric)
    if not mask.any():
        return 0.0
    a = analytic[mask]
    n = numeric[mask]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(build: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords_per_param: int | None = None,
                    rng: np.random.Generator | None = None,
                    skip_kinks: bool = False) -> float:
    """Compare backward() gradients of build() against finite differences.

    Returns the worst relative error over all checked coordinates. `build`
    must construct the scalar loss from scratch on every call (it is invoked
    repeatedly with perturbed parameter values).

    With skip_kinks, each coordinate's difference quotient is recomputed at
    h/2; coordinates where the two estimates disagree sit on a relu-style
    kink, where central differences are not a valid derivative estimate, and
    are excluded (at most 30% may be excluded). The consistency test uses
    only finite-difference information, so a wrong analytic gradient at a
    smooth coordinate is always still detected.
    """
    for p in params:
        p.zero_grad()
    loss = build()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    checked = 0
    skipped = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_param, replace=False)
        else:
            coords = range(flat.size)
        for idx in coords:
            fd = _central_diff(build, flat, idx, h)
            if skip_kinks:
                fd_half = _central_diff(build, flat, idx, h / 2)
                if abs(fd - fd_half) > max(1e-3 * max(abs(fd), abs(fd_half)), 1e-7):
                    skipped += 1
                    continue
            checked += 1
            denom = max(abs(aflat[idx]), abs(fd), 1e-4)
            worst = max(worst, abs(aflat[idx] - fd) / denom)
    if checked == 0 or skipped > 0.3 * (checked + skipped):
        raise RuntimeError(f"too many kink-adjacent coordinates ({skipped} of {checked + skipped})")
    return worst
