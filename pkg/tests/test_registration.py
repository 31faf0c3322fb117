"""DLT resection and projection: synthetic-camera oracles and degeneracy."""

import numpy as np
import pytest

from earmark.errors import DegeneracyError, InsufficientPointsError, NumericError
from earmark.registration import (
    CameraMatrix,
    Correspondence,
    clip_segment,
    dlt_resect,
    project_axis,
    project_point,
)

from oracles import project_scalar


def random_camera(rng):
    """Finite camera K[R|t] with points guaranteed in front."""
    f = rng.uniform(400, 1200)
    cx, cy = rng.uniform(200, 400, 2)
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    # random rotation via QR of a Gaussian matrix
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    R = q * np.sign(np.diag(r))
    if np.linalg.det(R) < 0:
        R[:, 2] *= -1
    t = rng.uniform(-5, 5, 3)
    t[2] = rng.uniform(60, 120)  # push the scene in front of the camera
    return K @ np.hstack([R, t[:, None]])


def synthetic_corrs(rng, P, n=6, spread=20.0):
    pts = rng.uniform(-spread, spread, (n, 3))
    corrs = []
    for i, X in enumerate(pts):
        h = P @ np.append(X, 1.0)
        corrs.append(
            Correspondence(name=f"p{i}", X=tuple(X), u=h[0] / h[2], v=h[1] / h[2])
        )
    return corrs


class TestDltResect:
    def test_recovers_camera_up_to_scale(self, rng):
        for _ in range(20):
            P = random_camera(rng)
            corrs = synthetic_corrs(rng, P, n=6)
            cam, residuals = dlt_resect(corrs)
            assert max(residuals) < 1e-6
            # up-to-scale equality against the normalized ground truth
            Pn = P / np.linalg.norm(P)
            if np.sum(Pn * cam.P) < 0:
                Pn = -Pn
            assert np.max(np.abs(cam.P - Pn)) < 1e-8

    def test_canonical_camera_pixel(self):
        P = np.hstack([np.eye(3), np.zeros((3, 1))])
        cam = CameraMatrix(P=P / np.linalg.norm(P))
        u, v = project_point(cam, (1.0, 2.0, 5.0))
        assert (u, v) == pytest.approx((0.2, 0.4), abs=1e-15)

    def test_insufficient_points(self, rng):
        P = random_camera(rng)
        corrs = synthetic_corrs(rng, P, n=5)
        with pytest.raises(InsufficientPointsError):
            dlt_resect(corrs)

    def test_coplanar_points_degenerate(self, rng):
        P = random_camera(rng)
        pts = rng.uniform(-20, 20, (6, 3))
        pts[:, 2] = 3.0  # all on one plane
        corrs = []
        for i, X in enumerate(pts):
            h = P @ np.append(X, 1.0)
            corrs.append(Correspondence(f"p{i}", tuple(X), h[0] / h[2], h[1] / h[2]))
        with pytest.raises(DegeneracyError):
            dlt_resect(corrs)

    def test_normalization_invariance_2d(self, rng):
        """Similarity-transformed 2-D points reproject identically."""
        P = random_camera(rng)
        corrs = synthetic_corrs(rng, P, n=8)
        cam, _ = dlt_resect(corrs)
        # shift+scale the 2D points: a new but equivalent problem
        s, tx, ty = 3.0, 40.0, -25.0
        corrs2 = [
            Correspondence(c.name, c.X, s * c.u + tx, s * c.v + ty) for c in corrs
        ]
        cam2, _ = dlt_resect(corrs2)
        for c in corrs:
            u1, v1 = project_point(cam, c.X)
            u2, v2 = project_point(cam2, c.X)
            assert abs((s * u1 + tx) - u2) < 1e-9
            assert abs((s * v1 + ty) - v2) < 1e-9

    def test_normalization_invariance_3d(self, rng):
        """Similarity-transformed 3-D points reproject identically."""
        P = random_camera(rng)
        corrs = synthetic_corrs(rng, P, n=8)
        cam, _ = dlt_resect(corrs)
        s, t = 2.5, np.array([120.0, -60.0, 35.0])
        corrs2 = [
            Correspondence(c.name, tuple(s * np.array(c.X) + t), c.u, c.v)
            for c in corrs
        ]
        cam2, _ = dlt_resect(corrs2)
        for c in corrs:
            u1, v1 = project_point(cam, c.X)
            u2, v2 = project_point(cam2, tuple(s * np.array(c.X) + t))
            assert abs(u1 - u2) < 1e-9
            assert abs(v1 - v2) < 1e-9

    def test_normalized_beats_unnormalized_on_noise(self, rng):
        """Hartley normalization never loses to the raw DLT (statistically)."""

        def raw_dlt(corrs):
            n = len(corrs)
            A = np.zeros((2 * n, 12))
            for i, c in enumerate(corrs):
                Xi = np.append(c.X, 1.0)
                A[2 * i, 4:8] = -Xi
                A[2 * i, 8:12] = c.v * Xi
                A[2 * i + 1, 0:4] = Xi
                A[2 * i + 1, 8:12] = -c.u * Xi
            _, _, vt = np.linalg.svd(A)
            return vt[-1].reshape(3, 4)

        def rms_residual(P, corrs):
            tot = 0.0
            for c in corrs:
                h = P @ np.append(c.X, 1.0)
                tot += (h[0] / h[2] - c.u) ** 2 + (h[1] / h[2] - c.v) ** 2
            return np.sqrt(tot / len(corrs))

        wins = 0
        trials = 100
        for _ in range(trials):
            P = random_camera(rng)
            # scanner-frame coordinates sit far from the origin, which is
            # exactly where the raw DLT's conditioning collapses
            offset = np.array([500.0, 300.0, 800.0])
            pts = offset + rng.uniform(-20, 20, (8, 3))
            noisy = []
            for i, X in enumerate(pts):
                h = P @ np.append(X, 1.0)
                noisy.append(
                    Correspondence(
                        f"p{i}",
                        tuple(X),
                        h[0] / h[2] + rng.normal(0, 0.5),
                        h[1] / h[2] + rng.normal(0, 0.5),
                    )
                )
            cam, _ = dlt_resect(noisy)
            if rms_residual(cam.P, noisy) <= rms_residual(raw_dlt(noisy), noisy) + 1e-9:
                wins += 1
        assert wins >= 95


class TestProjectPoint:
    def test_principal_ray(self):
        P = np.hstack([np.eye(3), np.zeros((3, 1))])
        cam = CameraMatrix(P=P / np.linalg.norm(P))
        assert project_point(cam, (0, 0, 1)) == (0.0, 0.0)

    def test_scale_invariance(self, rng):
        P = random_camera(rng)
        cam1 = CameraMatrix(P=P / np.linalg.norm(P))
        cam7 = CameraMatrix(P=7 * P / np.linalg.norm(7 * P))
        X = tuple(rng.uniform(-10, 10, 3))
        assert project_point(cam1, X) == project_point(cam7, X)

    def test_matches_scalar_oracle(self, rng):
        for _ in range(50):
            P = random_camera(rng)
            cam = CameraMatrix(P=P / np.linalg.norm(P))
            X = tuple(rng.uniform(-10, 10, 3))
            u, v = project_point(cam, X)
            uo, vo = project_scalar(cam.P.tolist(), X)
            assert abs(u - uo) < 1e-12 and abs(v - vo) < 1e-12

    def test_point_at_camera_plane(self):
        P = np.hstack([np.eye(3), np.zeros((3, 1))])
        cam = CameraMatrix(P=P / np.linalg.norm(P))
        with pytest.raises(NumericError):
            project_point(cam, (1.0, 1.0, 0.0))


class TestClipAxis:
    def test_inside_segment_unchanged(self):
        q = clip_segment((5.0, 5.0), (20.0, 30.0), 64, 64)
        assert q == ((5.0, 5.0), (20.0, 30.0))

    def test_fully_outside_left(self):
        assert clip_segment((-30.0, 5.0), (-2.0, 10.0), 64, 64) is None

    def test_one_endpoint_clipped_on_border(self):
        q = clip_segment((-10.0, 10.0), (10.0, 10.0), 64, 64)
        (x0, y0), (x1, y1) = q
        assert abs(x0 - 0.0) < 1e-9 and y0 == 10.0
        assert (x1, y1) == (10.0, 10.0)

    def test_parametric_clip_oracle(self, rng):
        """Clipped endpoints sit on the rectangle border within 1e-9."""
        w = h = 100
        for _ in range(200):
            p0 = tuple(rng.uniform(-80, 180, 2))
            p1 = tuple(rng.uniform(-80, 180, 2))
            q = clip_segment(p0, p1, w, h)
            if q is None:
                continue
            for (x, y), orig in zip(q, (p0, p1)):
                assert -1e-9 <= x <= w - 1 + 1e-9
                assert -1e-9 <= y <= h - 1 + 1e-9
                inside = 0 <= orig[0] <= w - 1 and 0 <= orig[1] <= h - 1
                if inside:
                    assert (x, y) == orig
                else:
                    on_border = (
                        abs(x) < 1e-9
                        or abs(x - (w - 1)) < 1e-9
                        or abs(y) < 1e-9
                        or abs(y - (h - 1)) < 1e-9
                    )
                    assert on_border

    def test_project_axis_end_to_end(self, rng):
        P = random_camera(rng)
        cam = CameraMatrix(P=P / np.linalg.norm(P))
        apex = tuple(rng.uniform(-5, 5, 3))
        base = tuple(rng.uniform(-5, 5, 3))
        seg = project_axis(cam, apex, base, (2000, 2000))
        if seg is not None:
            p0 = project_point(cam, apex)
            p1 = project_point(cam, base)
            inside0 = 0 <= p0[0] <= 1999 and 0 <= p0[1] <= 1999
            inside1 = 0 <= p1[0] <= 1999 and 0 <= p1[1] <= 1999
            if inside0 and inside1:
                assert seg == (p0, p1)
