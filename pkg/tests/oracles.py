"""Independent naive reference implementations used as test oracles.

Nothing here imports from the package's layer code: loops are explicit,
padding arithmetic is re-derived and scalars go through ``math``.  Slow on
purpose.
"""

import math

import numpy as np


def same_pad_amounts(dim, k, s):
    out = math.ceil(dim / s)
    total = max(0, (out - 1) * s + k - dim)
    low = total // 2
    return low, total - low


def conv3d_naive(x, w, b, stride=1, padding="same"):
    n, W, H, D, cin = x.shape
    k = w.shape[0]
    cout = w.shape[4]
    s = stride
    if padding == "same":
        (plx, phx), (ply, phy), (plz, phz) = (
            same_pad_amounts(W, k, s),
            same_pad_amounts(H, k, s),
            same_pad_amounts(D, k, s),
        )
        xp = np.zeros((n, W + plx + phx, H + ply + phy, D + plz + phz, cin), x.dtype)
        xp[:, plx : plx + W, ply : ply + H, plz : plz + D, :] = x
        ow, oh, od = math.ceil(W / s), math.ceil(H / s), math.ceil(D / s)
    else:
        xp = x
        ow, oh, od = (W - k) // s + 1, (H - k) // s + 1, (D - k) // s + 1
    y = np.zeros((n, ow, oh, od, cout), dtype=x.dtype)
    for nn in range(n):
        for ox in range(ow):
            for oy in range(oh):
                for oz in range(od):
                    for co in range(cout):
                        acc = b[co]
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    for ci in range(cin):
                                        acc = acc + (
                                            xp[nn, ox * s + i, oy * s + j, oz * s + l, ci]
                                            * w[i, j, l, ci, co]
                                        )
                        y[nn, ox, oy, oz, co] = acc
    return y


def maxpool3d_naive(x, window, stride=None):
    s = window if stride is None else stride
    n, W, H, D, c = x.shape
    ow, oh, od = (W - window) // s + 1, (H - window) // s + 1, (D - window) // s + 1
    y = np.zeros((n, ow, oh, od, c), dtype=x.dtype)
    for nn in range(n):
        for ox in range(ow):
            for oy in range(oh):
                for oz in range(od):
                    for cc in range(c):
                        best = -math.inf
                        for i in range(window):
                            for j in range(window):
                                for l in range(window):
                                    v = x[nn, ox * s + i, oy * s + j, oz * s + l, cc]
                                    if v > best:
                                        best = v
                        y[nn, ox, oy, oz, cc] = best
    return y


def se_naive(x, w1, w2):
    n, W, H, D, c = x.shape
    cr = w1.shape[1]
    y = np.zeros_like(x)
    for nn in range(n):
        z = [0.0] * c
        for ci in range(c):
            acc = 0.0
            for i in range(W):
                for j in range(H):
                    for l in range(D):
                        acc += x[nn, i, j, l, ci]
            z[ci] = acc / (W * H * D)
        h = [0.0] * cr
        for r in range(cr):
            acc = 0.0
            for ci in range(c):
                acc += z[ci] * w1[ci, r]
            h[r] = max(acc, 0.0)
        g = [0.0] * c
        for ci in range(c):
            acc = 0.0
            for r in range(cr):
                acc += h[r] * w2[r, ci]
            g[ci] = 1.0 / (1.0 + math.exp(-acc))
        for ci in range(c):
            y[nn, :, :, :, ci] = x[nn, :, :, :, ci] * g[ci]
    return y


def msle_naive(pred, target):
    p = pred.ravel()
    t = target.ravel()
    total = 0.0
    for pi, ti in zip(p, t):
        d = math.log1p(ti) - math.log1p(max(pi, -1 + 1e-6))
        total += d * d
    return total / p.size


def adam_scalar(theta, g_seq, alpha=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam recurrence; returns theta after applying each g in g_seq."""
    m = 0.0
    v = 0.0
    t = 0
    for g in g_seq:
        t += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - alpha * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def central_difference(f, x, step=1e-5):
    """Numeric gradient of scalar-valued f w.r.t. every entry of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_err(analytic, numeric):
    """max |a-n| / max(1, |a|, |n|) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def project_scalar(P, X):
    """Homogeneous 3x4 projection of one 3-D point, plain Python arithmetic."""
    x = P[0][0] * X[0] + P[0][1] * X[1] + P[0][2] * X[2] + P[0][3]
    y = P[1][0] * X[0] + P[1][1] * X[1] + P[1][2] * X[2] + P[1][3]
    wz = P[2][0] * X[0] + P[2][1] * X[1] + P[2][2] * X[2] + P[2][3]
    return x / wz, y / wz


def homography_scalar(H, p):
    x = H[0][0] * p[0] + H[0][1] * p[1] + H[0][2]
    y = H[1][0] * p[0] + H[1][1] * p[1] + H[1][2]
    w = H[2][0] * p[0] + H[2][1] * p[1] + H[2][2]
    return x / w, y / w
