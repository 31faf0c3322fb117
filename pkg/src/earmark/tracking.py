"""Frame-to-frame motion tracking for the overlay.

Harris corners with parabolic subpixel refinement feed 11x11 zero-mean
unit-norm patch descriptors; matches are mutual nearest neighbours passing
a 0.8 ratio test; a seeded RANSAC with 4-point normalized DLT hypotheses
and symmetric transfer scoring estimates the inter-frame homography; the
cumulative frame-0 -> frame-t transform is the composition, renormalized to
H[2][2] = 1.  Hypothesis sampling runs over a canonical ordering of the
pairs (lexicographic, then one seeded shuffle), so results do not depend on
input pair order.

Losing track (too few pairs or inliers) flips the state to Lost and keeps
the last good cumulative transform; there is no automatic re-registration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EarmarkError, NumericError

PATCH = 11  # descriptor patch side; keypoints need PATCH//2 + 1 px of border
HARRIS_K = 0.06

STATUS_TRACKING = "Tracking"
STATUS_LOST = "Lost"


class TrackingFailure(EarmarkError):
    code = "tracking_failure"
    exit_code = 3


@dataclass(frozen=True)
class Frame:
    """Grayscale video frame; ``data`` is (H, W) float64 in [0, 1]."""

    data: np.ndarray
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"frame data must be 2-D, got {self.data.shape}")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @classmethod
    def from_uint8(cls, arr, index=0, timestamp=0.0):
        return cls(data=np.asarray(arr, dtype=np.float64) / 255.0,
                   index=index, timestamp=timestamp)


@dataclass(frozen=True)
class FeatureSet:
    keypoints: np.ndarray  # (n, 3): x, y, corner score
    descriptors: np.ndarray  # (n, PATCH*PATCH), zero-mean unit-norm

    def __len__(self):
        return len(self.keypoints)


@dataclass(frozen=True)
class TrackerConfig:
    max_features: int = 400
    nms_radius: int = 4
    ratio: float = 0.8
    threshold_px: float = 2.0
    confidence: float = 0.995
    max_iters: int = 1000
    seed: int = 0
    min_inliers: int = 8


@dataclass(frozen=True)
class TrackState:
    """Cumulative homography from the registered initial frame."""

    H: np.ndarray  # 3x3, H[2][2] = 1
    inliers: int = 0
    mean_residual_px: float = 0.0
    status: str = STATUS_TRACKING
    frame_index: int = 0

    def __post_init__(self):
        if abs(np.linalg.det(self.H)) <= 1e-12:
            raise NumericError("cumulative homography is singular")

    @classmethod
    def identity(cls):
        return cls(H=np.eye(3))


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def _blur3(img):
    """Two passes of the separable [1 2 1]/4 binomial kernel."""
    out = img
    for _ in range(2):
        p = np.pad(out, 1, mode="edge")
        out = (p[:-2] + 2 * p[1:-1] + p[2:]) / 4.0
        out = (out[:, :-2] + 2 * out[:, 1:-1] + out[:, 2:]) / 4.0
    return out


def _max_filter(img, radius):
    out = img
    for axis in (0, 1):
        acc = out.copy()
        for shift in range(1, radius + 1):
            acc = np.maximum(acc, np.roll(out, shift, axis=axis))
            acc = np.maximum(acc, np.roll(out, -shift, axis=axis))
        out = acc
    return out


def detect_features(frame: Frame, max_n=400, nms_radius=4) -> FeatureSet:
    """Harris corners + normalized patch descriptors; deterministic."""
    img = frame.data
    h, w = img.shape
    if h < 32 or w < 32:
        raise DataError(f"frame too small for tracking: {w}x{h}")
    ix = np.zeros_like(img)
    iy = np.zeros_like(img)
    ix[:, 1:-1] = (img[:, 2:] - img[:, :-2]) / 2.0
    iy[1:-1, :] = (img[2:, :] - img[:-2, :]) / 2.0
    a = _blur3(ix * ix)
    b = _blur3(iy * iy)
    c = _blur3(ix * iy)
    r = a * b - c * c - HARRIS_K * (a + b) ** 2

    margin = PATCH // 2 + 2
    mask = np.zeros_like(r, dtype=bool)
    mask[margin:-margin, margin:-margin] = True
    peak = r.max() if r.size else 0.0
    if peak <= 0:
        return FeatureSet(
            keypoints=np.zeros((0, 3)), descriptors=np.zeros((0, PATCH * PATCH))
        )
    is_peak = (r >= _max_filter(r, nms_radius)) & mask & (r > 1e-4 * peak)
    ys, xs = np.nonzero(is_peak)
    scores = r[ys, xs]
    # strongest first; ties broken by (y, x) so ordering is total
    order = np.lexsort((xs, ys, -scores))[: max_n]
    ys, xs, scores = ys[order], xs[order], scores[order]

    kps = []
    descs = []
    half = PATCH // 2
    for x, y, s in zip(xs, ys, scores):
        # per-axis parabolic refinement on the Harris response
        denom_x = r[y, x - 1] - 2 * r[y, x] + r[y, x + 1]
        denom_y = r[y - 1, x] - 2 * r[y, x] + r[y + 1, x]
        dx = 0.5 * (r[y, x - 1] - r[y, x + 1]) / denom_x if denom_x != 0 else 0.0
        dy = 0.5 * (r[y - 1, x] - r[y + 1, x]) / denom_y if denom_y != 0 else 0.0
        dx = float(np.clip(dx, -0.5, 0.5))
        dy = float(np.clip(dy, -0.5, 0.5))
        patch = img[y - half : y + half + 1, x - half : x + half + 1].ravel()
        d = patch - patch.mean()
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue  # constant patch carries no signal
        kps.append((x + dx, y + dy, s))
        descs.append(d / norm)
    if not kps:
        return FeatureSet(
            keypoints=np.zeros((0, 3)), descriptors=np.zeros((0, PATCH * PATCH))
        )
    return FeatureSet(keypoints=np.array(kps), descriptors=np.array(descs))


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def match_features(a: FeatureSet, b: FeatureSet, ratio=0.8):
    """Mutual nearest neighbours on descriptor dot product + ratio test.

    Returns an (m, 2) int array of (index in a, index in b) pairs.
    """
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=int)
    sim = a.descriptors @ b.descriptors.T  # unit norm: distance^2 = 2 - 2 sim
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    pairs = []
    for ia, ib in enumerate(nn_ab):
        if nn_ba[ib] != ia:
            continue
        if sim.shape[1] >= 2:
            row = sim[ia]
            best = row[ib]
            second = np.max(np.delete(row, ib)) if sim.shape[1] > 1 else -1.0
            d1 = math.sqrt(max(0.0, 2.0 - 2.0 * best))
            d2 = math.sqrt(max(0.0, 2.0 - 2.0 * second))
            if d2 > 0 and d1 / d2 > ratio:
                continue
        pairs.append((ia, ib))
    return np.array(pairs, dtype=int).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Homography estimation
# ---------------------------------------------------------------------------

def _normalize_2d(pts):
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    if rms < 1e-12:
        raise NumericError("all points coincide")
    s = np.sqrt(2.0) / rms
    T = np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    return homog @ T.T, T


def _dlt_homography(src, dst):
    """Least-squares homography src -> dst (Hartley-normalized DLT)."""
    sn, Ts = _normalize_2d(src)
    dn, Td = _normalize_2d(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    for i in range(n):
        x, y, _ = sn[i]
        u, v, _ = dn[i]
        A[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        A[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        raise NumericError("homography normalization failed")
    return H / H[2, 2]


def apply_homography(H, point):
    h = H @ np.array([point[0], point[1], 1.0])
    if abs(h[2]) < 1e-12:
        raise NumericError(f"point {tuple(point)} maps to infinity")
    return float(h[0] / h[2]), float(h[1] / h[2])


def _transfer_errors(H, H_inv, src, dst):
    """Symmetric transfer error per pair: mean of forward/backward distances."""
    sh = np.hstack([src, np.ones((len(src), 1))]) @ H.T
    fwd = np.linalg.norm(sh[:, :2] / sh[:, 2:3] - dst, axis=1)
    dh = np.hstack([dst, np.ones((len(dst), 1))]) @ H_inv.T
    bwd = np.linalg.norm(dh[:, :2] / dh[:, 2:3] - src, axis=1)
    return 0.5 * (fwd + bwd)


def ransac_homography(src, dst, threshold_px=2.0, confidence=0.995,
                      max_iters=1000, seed=0):
    """Robust src -> dst homography.

    Returns (H with H[2][2]=1, boolean inlier mask over the input order).
    Raises TrackingFailure with fewer than 4 pairs or fewer than 4 inliers.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n != len(dst):
        raise DataError(f"pair count mismatch: {n} vs {len(dst)}")
    if n < 4:
        raise TrackingFailure(f"need at least 4 pairs, got {n}")

    # canonical ordering then one seeded shuffle: permutation invariance
    canon = np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))
    rng = np.random.default_rng(seed)
    shuffled = canon[rng.permutation(n)]
    s = src[shuffled]
    d = dst[shuffled]

    best_mask = None
    best_count = 0
    best_err = np.inf
    iters_needed = max_iters
    it = 0
    while it < min(iters_needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            H = _dlt_homography(s[idx], d[idx])
            H_inv = np.linalg.inv(H)
        except (NumericError, np.linalg.LinAlgError):
            continue
        errs = _transfer_errors(H, H_inv, s, d)
        mask = errs < threshold_px
        count = int(mask.sum())
        mean_err = float(errs[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count = count
            best_mask = mask
            best_err = mean_err
            w = count / n
            if w > 0:
                denom = math.log(max(1e-12, 1.0 - w**4))
                if denom < 0:
                    iters_needed = math.ceil(math.log(1.0 - confidence) / denom)
    if best_mask is None or best_count < 4:
        raise TrackingFailure(f"only {best_count} inliers, need >= 4")

    # least-squares refit on all inliers, then rescore once
    H = _dlt_homography(s[best_mask], d[best_mask])
    errs = _transfer_errors(H, np.linalg.inv(H), s, d)
    final_mask_shuffled = errs < threshold_px
    if int(final_mask_shuffled.sum()) >= 4:
        H = _dlt_homography(s[final_mask_shuffled], d[final_mask_shuffled])
    else:
        final_mask_shuffled = best_mask

    mask_out = np.zeros(n, dtype=bool)
    mask_out[shuffled] = final_mask_shuffled
    return H, mask_out


# ---------------------------------------------------------------------------
# Subpixel displacement refinement
# ---------------------------------------------------------------------------

def _sample_bilinear(img, xs, ys):
    """Vectorized bilinear lookup; coordinates are clamped to the image."""
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def lk_refine(prev_img, next_img, points, initial_dst, half=5, iters=8):
    """Lucas-Kanade refinement of per-point displacements.

    ``points`` are positions in the previous frame, ``initial_dst`` their
    predicted positions in the next frame.  Measuring against the previous
    frame's own patch cancels any detector localization bias.  Returns
    (refined dst, converged mask).
    """
    n = len(points)
    grid = np.arange(-half, half + 1, dtype=np.float64)
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    px = points[:, 0][:, None, None] + gx[None]
    py = points[:, 1][:, None, None] + gy[None]
    T = _sample_bilinear(prev_img, px, py)
    # template gradients via central differences inside the patch
    tx = np.zeros_like(T)
    ty = np.zeros_like(T)
    tx[:, :, 1:-1] = (T[:, :, 2:] - T[:, :, :-2]) / 2.0
    ty[:, 1:-1, :] = (T[:, 2:, :] - T[:, :-2, :]) / 2.0
    a11 = np.sum(tx * tx, axis=(1, 2))
    a12 = np.sum(tx * ty, axis=(1, 2))
    a22 = np.sum(ty * ty, axis=(1, 2))
    det = a11 * a22 - a12 * a12
    ok = det > 1e-9
    d = initial_dst - points
    for _ in range(iters):
        qx = points[:, 0][:, None, None] + d[:, 0][:, None, None] + gx[None]
        qy = points[:, 1][:, None, None] + d[:, 1][:, None, None] + gy[None]
        I = _sample_bilinear(next_img, qx, qy)
        e = T - I
        b1 = np.sum(tx * e, axis=(1, 2))
        b2 = np.sum(ty * e, axis=(1, 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ux = np.where(ok, (a22 * b1 - a12 * b2) / det, 0.0)
            uy = np.where(ok, (a11 * b2 - a12 * b1) / det, 0.0)
        d = d + np.stack([ux, uy], axis=1)
    refined = points + d
    moved = np.linalg.norm(refined - initial_dst, axis=1)
    ok = ok & (moved < 2.0)  # diverged tracks are dropped
    return refined, ok


# ---------------------------------------------------------------------------
# State transition
# ---------------------------------------------------------------------------

def advance(state: TrackState, prev: Frame, nxt: Frame,
            config: TrackerConfig = TrackerConfig()) -> TrackState:
    """Pure transition: estimate prev -> nxt motion and compose it.

    On failure the cumulative transform is retained and status flips to
    Lost.  ``state`` is never mutated.
    """
    if state.status != STATUS_TRACKING:
        raise DataError("cannot advance a Lost track; re-register first")
    try:
        fa = detect_features(prev, config.max_features, config.nms_radius)
        fb = detect_features(nxt, config.max_features, config.nms_radius)
        pairs = match_features(fa, fb, config.ratio)
        if len(pairs) < 4:
            raise TrackingFailure(f"only {len(pairs)} matches")
        src = fa.keypoints[pairs[:, 0], :2]
        dst = fb.keypoints[pairs[:, 1], :2]
        H_step, mask = ransac_homography(
            src, dst, config.threshold_px, config.confidence,
            config.max_iters, config.seed,
        )
        inliers = int(mask.sum())
        if inliers < config.min_inliers:
            raise TrackingFailure(f"only {inliers} inliers, need {config.min_inliers}")
        # detector subpixel estimates carry pixel-locking bias; re-measuring
        # each inlier displacement against the previous frame's own patch is
        # what keeps 100+ frame compositions drift-free
        pred = np.array([apply_homography(H_step, p) for p in src[mask]])
        refined, ok = lk_refine(prev.data, nxt.data, src[mask], pred)
        if int(ok.sum()) >= max(4, config.min_inliers // 2):
            H_step = _dlt_homography(src[mask][ok], refined[ok])
    except TrackingFailure:
        return TrackState(
            H=state.H.copy(), inliers=0, mean_residual_px=float("inf"),
            status=STATUS_LOST, frame_index=nxt.index,
        )
    errs = _transfer_errors(H_step, np.linalg.inv(H_step), src[mask], dst[mask])
    H_cum = H_step @ state.H
    H_cum = H_cum / H_cum[2, 2]
    return TrackState(
        H=H_cum, inliers=inliers, mean_residual_px=float(errs.mean()),
        status=STATUS_TRACKING, frame_index=nxt.index,
    )
