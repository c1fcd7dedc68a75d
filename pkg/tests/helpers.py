"""Shared test oracles."""

import numpy as np


def naive_conv2d(x, w, b, stride=1, dilation=1, padding=0):
    """Nested-loop cross-correlation, no vectorization shared with the engine."""
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hout = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wout = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((bsz, cout, hout, wout))
    for n in range(bsz):
        for co in range(cout):
            for y in range(hout):
                for xx in range(wout):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, ci, y * stride + i * dilation, xx * stride + j * dilation] * w[co, ci, i, j]
                    out[n, co, y, xx] = acc + b[co]
    return out


def naive_conv_transpose2d(x, w, stride):
    """Scatter-add transposed convolution oracle."""
    bsz, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    out = np.zeros((bsz, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for n in range(bsz):
        for ci in range(cin):
            for y in range(h):
                for xx in range(wd):
                    for co in range(cout):
                        for i in range(kh):
                            for j in range(kw):
                                out[n, co, y * stride + i, xx * stride + j] += x[n, ci, y, xx] * w[ci, co, i, j]
    return out
