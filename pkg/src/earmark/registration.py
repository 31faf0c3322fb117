"""Camera resection from 2D-3D correspondences and overlay projection.

The camera is a 3x4 homogeneous projection from CT millimetre coordinates to
pixels, estimated by the direct linear transform on at least six
correspondences: both point sets are Hartley-normalized (centroid to origin,
RMS radius sqrt(2) / sqrt(3)), the 2n x 12 system's smallest right singular
vector gives the matrix, and the result is de-normalized.  Matrices are
stored with unit Frobenius norm and sign fixed so the third row is positive
at the correspondence centroid (points in front of the camera).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, InsufficientPointsError, NumericError

# relative singular-value floor below which a point set counts as flat/collinear
_DEGENERACY_RTOL = 1e-9


@dataclass(frozen=True)
class Correspondence:
    name: str
    X: tuple[float, float, float]  # CT millimetres
    u: float
    v: float


@dataclass(frozen=True)
class CameraMatrix:
    """3x4 projection, ||P||_F = 1, third row positive at the scene centroid."""

    P: np.ndarray

    def __post_init__(self):
        if self.P.shape != (3, 4):
            raise NumericError(f"camera matrix must be 3x4, got {self.P.shape}")

    def flat(self):
        return [float(x) for x in self.P.ravel()]

    @classmethod
    def from_flat(cls, values):
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size != 12:
            raise NumericError(f"camera matrix needs 12 numbers, got {arr.size}")
        return cls(P=arr.reshape(3, 4))


def _normalize_points(pts):
    """Translate centroid to origin, scale RMS radius to sqrt(dim).

    Returns (normalized homogeneous points, similarity transform T).
    """
    pts = np.asarray(pts, dtype=np.float64)
    dim = pts.shape[1]
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    if rms < 1e-12:
        raise DegeneracyError("all points coincide")
    scale = np.sqrt(dim) / rms
    T = np.eye(dim + 1)
    T[:dim, :dim] *= scale
    T[:dim, dim] = -scale * centroid
    homog = np.hstack([pts, np.ones((len(pts), 1))])
    return homog @ T.T, T


def _check_not_degenerate(pts3, pts2):
    """Coplanar 3-D points or collinear 2-D points make the DLT ambiguous."""
    c3 = pts3 - pts3.mean(axis=0)
    s3 = np.linalg.svd(c3, compute_uv=False)
    if s3[2] < _DEGENERACY_RTOL * max(s3[0], 1e-30) or s3[2] < 1e-9:
        raise DegeneracyError("3-D points are (nearly) coplanar")
    c2 = pts2 - pts2.mean(axis=0)
    s2 = np.linalg.svd(c2, compute_uv=False)
    if s2[1] < _DEGENERACY_RTOL * max(s2[0], 1e-30) or s2[1] < 1e-9:
        raise DegeneracyError("2-D points are (nearly) collinear")


def dlt_resect(corrs: list[Correspondence]):
    """Estimate the camera from >= 6 correspondences.

    Returns (CameraMatrix, per-point pixel residuals in input order).
    """
    if len(corrs) < 6:
        raise InsufficientPointsError(
            f"resection needs at least 6 correspondences, got {len(corrs)}"
        )
    X = np.array([c.X for c in corrs], dtype=np.float64)
    x = np.array([[c.u, c.v] for c in corrs], dtype=np.float64)
    _check_not_degenerate(X, x)

    Xn, T3 = _normalize_points(X)
    xn, T2 = _normalize_points(x)

    n = len(corrs)
    A = np.zeros((2 * n, 12))
    for i in range(n):
        Xi = Xn[i]
        u, v = xn[i, 0], xn[i, 1]
        A[2 * i, 4:8] = -Xi
        A[2 * i, 8:12] = v * Xi
        A[2 * i + 1, 0:4] = Xi
        A[2 * i + 1, 8:12] = -u * Xi
    _, s, vt = np.linalg.svd(A)
    # a near-equal trailing pair means the nullspace is not unique
    if s[-2] < 1e-9 * max(s[0], 1e-30):
        raise DegeneracyError("DLT system is rank deficient")
    Pn = vt[-1].reshape(3, 4)

    P = np.linalg.inv(T2) @ Pn @ T3
    P = P / np.linalg.norm(P)
    centroid = np.append(X.mean(axis=0), 1.0)
    if P[2] @ centroid < 0:
        P = -P
    cam = CameraMatrix(P=P)
    residuals = [
        float(np.hypot(*(np.array(project_point(cam, c.X)) - (c.u, c.v))))
        for c in corrs
    ]
    return cam, residuals


def project_point(cam: CameraMatrix, X):
    """Pixel (u, v) of one 3-D millimetre point."""
    h = cam.P @ np.array([X[0], X[1], X[2], 1.0])
    if abs(h[2]) < 1e-12:
        raise NumericError(f"point {tuple(X)} projects to infinity")
    return float(h[0] / h[2]), float(h[1] / h[2])


def clip_segment(p0, p1, width, height):
    """Liang-Barsky clip of a 2-D segment to [0, width-1] x [0, height-1].

    Returns (q0, q1) or None when fully outside.
    """
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x0 - 0.0),
        (dx, (width - 1) - x0),
        (-dy, y0 - 0.0),
        (dy, (height - 1) - y0),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    # untouched parameters return the original endpoints bit-exactly
    q0 = (x0, y0) if t0 == 0.0 else (x0 + t0 * dx, y0 + t0 * dy)
    q1 = (x1, y1) if t1 == 1.0 else (x0 + t1 * dx, y0 + t1 * dy)
    return q0, q1


def project_axis(cam: CameraMatrix, apex, base, frame_dims):
    """Project the apex-base axis and clip it to the frame rectangle.

    Returns a pair of 2-D endpoints, or None if the segment lies outside.
    """
    p0 = project_point(cam, apex)
    p1 = project_point(cam, base)
    return clip_segment(p0, p1, frame_dims[0], frame_dims[1])
