"""Layer forward/backward passes for the from-scratch 3-D convnet.

Every operation returns ``(y, cache)``; the matching ``*_backward`` consumes
the cache plus the upstream gradient and returns input/parameter gradients.
Tensors are plain numpy arrays, channels-last: ``(N, W, H, D, C)`` while
spatial, ``(N, F)`` after flattening.  All arithmetic happens in the input
dtype (float64 in tests, float32 allowed for training).

Conventions: convolution is cross-correlation (no kernel flip); ``same``
padding puts the extra zero on the high side of each axis; max-pool drops
partial windows and routes gradient to the first (lowest linear index)
maximum of each window.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError
from .netspec import same_padding


class InvalidTargetError(DataError):
    code = "invalid_target"


MSLE_CLAMP = -1.0 + 1e-6


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------

def conv3d(x, w, b, stride=1, padding="same"):
    """Cross-correlate ``x`` (N,W,H,D,Cin) with ``w`` (k,k,k,Cin,Cout) + bias."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D (N,W,H,D,C), got {x.shape}")
    k = w.shape[0]
    if w.shape[:3] != (k, k, k):
        raise ShapeError(f"conv3d kernel must be cubic, got {w.shape[:3]}")
    if w.shape[3] != x.shape[4]:
        raise ShapeError(
            f"channel mismatch: input axis 4 has {x.shape[4]}, kernel axis 3 has {w.shape[3]}"
        )
    if b.shape != (w.shape[4],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[4]},)")
    if padding not in ("same", "valid"):
        raise ShapeError(f"unknown padding '{padding}'")

    s = stride
    spatial = x.shape[1:4]
    if padding == "same":
        pads = [same_padding(d, k, s) for d in spatial]
        out_sp = [-(-d // s) for d in spatial]
    else:
        if k > min(spatial):
            raise ShapeError(f"kernel {k} exceeds spatial dims {spatial} (valid padding)")
        pads = [(0, 0)] * 3
        out_sp = [(d - k) // s + 1 for d in spatial]

    if any(p != (0, 0) for p in pads):
        n_, W_, H_, D_, c_ = x.shape
        xp = np.zeros(
            (n_, W_ + sum(pads[0]), H_ + sum(pads[1]), D_ + sum(pads[2]), c_),
            dtype=x.dtype,
        )
        xp[
            :, pads[0][0] : pads[0][0] + W_, pads[1][0] : pads[1][0] + H_,
            pads[2][0] : pads[2][0] + D_, :,
        ] = x
    else:
        xp = x
    n, cin, cout = x.shape[0], x.shape[4], w.shape[4]

    # im2col via sliding windows + one big GEMM; the transpose puts taps in
    # (i, j, l, ci) order so the kernel matrix is a plain reshape of w
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    v = v[
        :, : (out_sp[0] - 1) * s + 1 : s, : (out_sp[1] - 1) * s + 1 : s,
        : (out_sp[2] - 1) * s + 1 : s,
    ]
    m = n * out_sp[0] * out_sp[1] * out_sp[2]
    cols2 = np.ascontiguousarray(v.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(
        m, k * k * k * cin
    )
    w2 = w.reshape(k * k * k * cin, cout)
    y = (cols2 @ w2 + b).reshape(n, *out_sp, cout)
    cache = (cols2, xp.shape, x.shape, w, s, pads, tuple(out_sp))
    return y, cache


def conv3d_backward(cache, dy, need_dx=True):
    """``need_dx=False`` skips the input gradient (first layer of a model)."""
    cols2, xp_shape, x_shape, w, s, pads, out_sp = cache
    k, cin, cout = w.shape[0], w.shape[3], w.shape[4]
    m = cols2.shape[0]
    dy2 = np.ascontiguousarray(dy).reshape(m, cout)
    db = dy2.sum(axis=0)
    dw = np.dot(cols2.T, dy2).reshape(w.shape)
    if not need_dx:
        return None, dw, db
    dcols = (dy2 @ w.reshape(k * k * k * cin, cout).T).reshape(
        dy.shape[0], *out_sp, k, k, k, cin
    )
    dxp = np.zeros(xp_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[
                    :,
                    i : i + (out_sp[0] - 1) * s + 1 : s,
                    j : j + (out_sp[1] - 1) * s + 1 : s,
                    l : l + (out_sp[2] - 1) * s + 1 : s,
                    :,
                ] += dcols[:, :, :, :, i, j, l, :]
    dx = dxp[
        :,
        pads[0][0] : pads[0][0] + x_shape[1],
        pads[1][0] : pads[1][0] + x_shape[2],
        pads[2][0] : pads[2][0] + x_shape[3],
        :,
    ]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def elu(x):
    """ELU with alpha=1: x for x>0, exp(x)-1 otherwise."""
    # expm1 only sees the clamped-negative part, so large activations can't overflow
    y = np.expm1(np.minimum(x, 0))
    y += np.maximum(x, 0)
    return y, (x, y)


def elu_backward(cache, dy):
    x, y = cache
    out = y + 1
    out *= dy
    np.copyto(out, dy, where=x > 0)
    return out


# ---------------------------------------------------------------------------
# Squeeze-and-excitation
# ---------------------------------------------------------------------------

def se_block(x, w1, w2):
    """Channel gating: sigmoid(relu(mean_c(x) @ w1) @ w2) scales each channel.

    ``w1`` is (C, C/r), ``w2`` is (C/r, C); no biases.
    """
    c = x.shape[4]
    if w1.shape[0] != c or w2.shape[1] != c or w1.shape[1] != w2.shape[0]:
        raise ShapeError(
            f"SE weight shapes {w1.shape}, {w2.shape} do not match {c} channels"
        )
    if c % w1.shape[1] != 0:
        raise ShapeError(f"SE reduced width {w1.shape[1]} must divide {c} channels")
    z = x.mean(axis=(1, 2, 3))  # (N, C)
    h_pre = z @ w1
    h = np.maximum(h_pre, 0)
    g = _sigmoid(h @ w2)  # (N, C)
    y = x * g[:, None, None, None, :]
    return y, (x, z, h_pre, h, g, w1, w2)


def se_block_backward(cache, dy):
    x, z, h_pre, h, g, w1, w2 = cache
    n_spatial = x.shape[1] * x.shape[2] * x.shape[3]
    dg = (dy * x).sum(axis=(1, 2, 3))
    dx = dy * g[:, None, None, None, :]
    ds = dg * g * (1 - g)  # sigmoid'
    dh = ds @ w2.T
    dw2 = h.T @ ds
    dh_pre = dh * (h_pre > 0)
    dw1 = z.T @ dh_pre
    dz = dh_pre @ w1.T
    dx += dz[:, None, None, None, :] / n_spatial
    return dx, dw1, dw2


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def maxpool3d(x, window, stride=None):
    """Per-window maximum with floor semantics (partial windows dropped)."""
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}")
    s = window if stride is None else stride
    w = window
    spatial = x.shape[1:4]
    if w > min(spatial):
        raise ShapeError(f"pool window {w} exceeds spatial dims {spatial}")
    out_sp = [(d - w) // s + 1 for d in spatial]
    windows = np.lib.stride_tricks.sliding_window_view(x, (w, w, w), axis=(1, 2, 3))
    windows = windows[
        :, : (out_sp[0] - 1) * s + 1 : s, : (out_sp[1] - 1) * s + 1 : s,
        : (out_sp[2] - 1) * s + 1 : s,
    ]
    flat = windows.reshape(*windows.shape[:5], w * w * w)
    arg = np.argmax(flat, axis=-1)  # first max = lowest linear index
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (x.shape, x.dtype, w, s, arg, tuple(out_sp))
    return y, cache


def maxpool3d_backward(cache, dy):
    x_shape, dtype, w, s, arg, out_sp = cache
    n, W, H, D, c = x_shape
    ax, ay, az = np.unravel_index(arg, (w, w, w))
    ox = np.arange(out_sp[0])[None, :, None, None, None]
    oy = np.arange(out_sp[1])[None, None, :, None, None]
    oz = np.arange(out_sp[2])[None, None, None, :, None]
    nn = np.arange(n)[:, None, None, None, None]
    cc = np.arange(c)[None, None, None, None, :]
    # scatter-add via bincount on flattened indices (overlapping windows may
    # route several gradients to one input voxel)
    flat = (((nn * W + ox * s + ax) * H + oy * s + ay) * D + oz * s + az) * c + cc
    dx = np.bincount(flat.ravel(), weights=dy.ravel(), minlength=n * W * H * D * c)
    return dx.reshape(x_shape).astype(dy.dtype, copy=False)


# ---------------------------------------------------------------------------
# Dense / dropout / flatten
# ---------------------------------------------------------------------------

def dense(x, w, b):
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input width {x.shape[1]} != weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    y = x @ w + b
    return y, (x, w)


def dense_backward(cache, dy):
    x, w = cache
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def dropout(x, rate, training, rng=None, mask=None):
    """Inverted dropout: zero with probability ``rate``, scale by 1/(1-rate).

    Identity at inference.  Pass ``mask`` to fix the pattern (gradient
    checks); otherwise a seeded ``rng`` supplies it during training.
    """
    if not (0.0 <= rate < 1.0):
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if mask is None:
        if rng is None:
            raise ShapeError("training-mode dropout needs an rng or explicit mask")
        mask = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    y = x * mask * scale
    return y, (mask, scale)


def dropout_backward(cache, dy):
    if cache is None:
        return dy
    mask, scale = cache
    return dy * mask * scale


def flatten(x):
    return np.ascontiguousarray(x).reshape(x.shape[0], -1), x.shape


def flatten_backward(cache, dy):
    return dy.reshape(cache)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def msle_loss(pred, target):
    """Mean squared logarithmic error and its gradient w.r.t. ``pred``.

    L = mean((log1p(t) - log1p(p))^2) over every entry.  Predictions are
    clamped to MSLE_CLAMP before the log so early training cannot produce
    NaNs; targets must be nonnegative.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if np.any(target < 0):
        raise InvalidTargetError("msle targets must be nonnegative")
    clamped = pred < MSLE_CLAMP
    p = np.where(clamped, MSLE_CLAMP, pred)
    diff = np.log1p(target) - np.log1p(p)
    loss = float(np.mean(diff * diff))
    grad = -2.0 * diff / ((1.0 + p) * pred.size)
    grad = np.where(clamped, 0.0, grad).astype(pred.dtype)
    return loss, grad
