"""Ground-truthed planar scenarios for registration/tracking tests.

A scenario is a procedurally textured plane observed through a known
camera, moved by a smooth similarity trajectory (translation, rotation
about the frame centre, zoom).  Frame t is the base texture warped through
the cumulative ground-truth homography G_t plus per-frame sensor noise, so
the exact expected overlay position at every frame is computable from the
emitted ground-truth file.

On disk: a frame directory (``frame_%06d.pgm``) plus ``ground_truth.json``
holding the camera (12 numbers row-major), per-frame homographies (9
numbers row-major, H[2][2]=1), the six registration pick pixels, and the
seven landmark positions in millimetres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import LANDMARK_NAMES, REGISTRATION_LANDMARKS
from .errors import DataError
from .imgio import write_frame_dir
from .registration import CameraMatrix, project_point

# documented trajectory limits (per frame)
MAX_STEP_TRANSLATION_PX = 5.0
MAX_STEP_ROTATION_DEG = 2.0
MAX_STEP_ZOOM = 0.02

TEXTURE_MARGIN = 64


@dataclass(frozen=True)
class ScenarioParams:
    frame_count: int = 120  # the two-minute run at 1 fps
    frame_size: tuple[int, int] = (256, 256)  # (width, height)
    translation_amplitude_px: float = 22.0
    rotation_amplitude_deg: float = 9.0
    zoom_amplitude: float = 0.05
    noise_sd: float = 0.004  # in [0, 1] intensity units

    def validate(self):
        if self.frame_count < 2:
            raise DataError("frame_count must be >= 2")
        steps = self.frame_count - 1
        # sinusoid max per-frame delta = amplitude * 2*pi / period
        step_t = self.translation_amplitude_px * 2 * math.pi / steps
        step_r = self.rotation_amplitude_deg * 2 * math.pi / steps
        step_z = self.zoom_amplitude * 2 * math.pi / steps
        if step_t > MAX_STEP_TRANSLATION_PX:
            raise DataError(f"per-frame translation {step_t:.2f}px exceeds "
                            f"{MAX_STEP_TRANSLATION_PX}px")
        if step_r > MAX_STEP_ROTATION_DEG:
            raise DataError(f"per-frame rotation {step_r:.2f} deg exceeds "
                            f"{MAX_STEP_ROTATION_DEG} deg")
        if step_z > MAX_STEP_ZOOM:
            raise DataError(f"per-frame zoom {step_z:.4f} exceeds {MAX_STEP_ZOOM}")


@dataclass(frozen=True)
class Scenario:
    params: ScenarioParams
    camera: CameraMatrix
    landmarks_mm: dict[str, tuple[float, float, float]]
    pick_pixels: dict[str, tuple[float, float]]  # six registration landmarks
    homographies: np.ndarray  # (T, 3, 3) cumulative ground truth
    frames: np.ndarray  # (T, H, W) uint8
    seed: int


def make_texture(rng, height, width):
    """Corner-rich texture: smooth field plus sharp speckle, in [0.1, 0.9]."""
    smooth = rng.random((height, width))
    for _ in range(3):
        p = np.pad(smooth, 1, mode="edge")
        smooth = (p[:-2] + 2 * p[1:-1] + p[2:]) / 4.0
        smooth = (smooth[:, :-2] + 2 * smooth[:, 1:-1] + smooth[:, 2:]) / 4.0
    speckle = rng.random((height, width))
    blocks = (speckle > 0.5).astype(np.float64)
    # soften the speckle edges to ~2 px: aliased edges bias subpixel tracking
    p = np.pad(blocks, 1, mode="edge")
    blocks = (p[:-2] + 2 * p[1:-1] + p[2:]) / 4.0
    blocks = (blocks[:, :-2] + 2 * blocks[:, 1:-1] + blocks[:, 2:]) / 4.0
    tex = 0.45 * smooth + 0.55 * blocks
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    return 0.1 + 0.8 * tex


def warp_bilinear(tex, H_inv, out_shape, offset):
    """Sample ``tex`` at H_inv(frame pixel) + offset, clamped to the edges."""
    h, w = out_shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = H_inv[2, 0] * xs + H_inv[2, 1] * ys + H_inv[2, 2]
    sx = (H_inv[0, 0] * xs + H_inv[0, 1] * ys + H_inv[0, 2]) / denom + offset
    sy = (H_inv[1, 0] * xs + H_inv[1, 1] * ys + H_inv[1, 2]) / denom + offset
    sx = np.clip(sx, 0.0, tex.shape[1] - 1.0)
    sy = np.clip(sy, 0.0, tex.shape[0] - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, tex.shape[1] - 1)
    y1 = np.minimum(y0 + 1, tex.shape[0] - 1)
    fx = sx - x0
    fy = sy - y0
    top = tex[y0, x0] * (1 - fx) + tex[y0, x1] * fx
    bot = tex[y1, x0] * (1 - fx) + tex[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _similarity_about(center, theta, scale, tx, ty):
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[scale * c, -scale * s, 0.0], [scale * s, scale * c, 0.0], [0, 0, 1.0]])
    T1 = np.array([[1, 0, -center[0]], [0, 1, -center[1]], [0, 0, 1.0]])
    T2 = np.array([[1, 0, center[0] + tx], [0, 1, center[1] + ty], [0, 0, 1.0]])
    return T2 @ R @ T1


def _camera_for(landmarks_mm, frame_size, rng):
    """A camera whose projections of all landmarks land well inside the frame."""
    pts = np.array([landmarks_mm[n] for n in LANDMARK_NAMES])
    centroid = pts.mean(axis=0)
    spread = max(np.max(np.linalg.norm(pts - centroid, axis=1)), 1.0)
    w, h = frame_size
    for _ in range(100):
        depth = rng.uniform(8.0, 12.0) * spread
        f = 0.28 * min(w, h) * depth / spread
        # small random tilt keeps the geometry generic (non-fronto-parallel)
        ax, ay = rng.uniform(-0.25, 0.25, 2)
        Rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)],
                       [0, math.sin(ax), math.cos(ax)]])
        Ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0],
                       [-math.sin(ay), 0, math.cos(ay)]])
        R = Rx @ Ry
        C = centroid - R.T @ np.array([0.0, 0.0, depth])
        t = -R @ C
        K = np.array([[f, 0, w / 2.0], [0, f, h / 2.0], [0, 0, 1.0]])
        P = K @ np.hstack([R, t[:, None]])
        cam = CameraMatrix(P=P / np.linalg.norm(P))
        uv = [project_point(cam, landmarks_mm[n]) for n in LANDMARK_NAMES]
        if all(0.12 * w < u < 0.88 * w and 0.12 * h < v < 0.88 * h for u, v in uv):
            return cam
    raise DataError("could not place a camera seeing all landmarks")


def generate_scenario(seed, landmarks_mm, params: ScenarioParams = ScenarioParams()):
    """Render the full scenario; deterministic per seed."""
    params.validate()
    rng = np.random.default_rng(seed)
    w, h = params.frame_size
    cam = _camera_for(landmarks_mm, params.frame_size, rng)
    picks = {n: project_point(cam, landmarks_mm[n]) for n in REGISTRATION_LANDMARKS}

    tex = make_texture(rng, h + 2 * TEXTURE_MARGIN, w + 2 * TEXTURE_MARGIN)
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    T = params.frame_count
    phases = rng.uniform(0, 2 * math.pi, 4)
    omega = 2 * math.pi / (T - 1)

    homographies = np.zeros((T, 3, 3))
    frames = np.zeros((T, h, w), dtype=np.uint8)
    for t in range(T):
        # sin(x) - sin(phase) so that G_0 is exactly the identity
        tx = params.translation_amplitude_px * (
            math.sin(omega * t + phases[0]) - math.sin(phases[0])
        )
        ty = params.translation_amplitude_px * (
            math.sin(omega * t + phases[1]) - math.sin(phases[1])
        )
        th = math.radians(params.rotation_amplitude_deg) * (
            math.sin(omega * t + phases[2]) - math.sin(phases[2])
        )
        sc = 1.0 + params.zoom_amplitude * (
            math.sin(omega * t + phases[3]) - math.sin(phases[3])
        )
        G = _similarity_about(center, th, sc, tx, ty)
        homographies[t] = G / G[2, 2]
        img = warp_bilinear(tex, np.linalg.inv(G), (h, w), TEXTURE_MARGIN)
        img = img + rng.normal(0.0, params.noise_sd, img.shape)
        frames[t] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)

    return Scenario(
        params=params,
        camera=cam,
        landmarks_mm={n: tuple(map(float, landmarks_mm[n])) for n in LANDMARK_NAMES},
        pick_pixels={n: (float(u), float(v)) for n, (u, v) in picks.items()},
        homographies=homographies,
        frames=frames,
        seed=seed,
    )


def save_scenario(scenario: Scenario, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_frame_dir(out_dir / "frames", scenario.frames)
    doc = {
        "seed": scenario.seed,
        "frame_count": scenario.params.frame_count,
        "frame_size": list(scenario.params.frame_size),
        "noise_sd": scenario.params.noise_sd,
        "camera": scenario.camera.flat(),
        "landmarks_mm": {n: list(v) for n, v in scenario.landmarks_mm.items()},
        "pick_pixels": {n: list(v) for n, v in scenario.pick_pixels.items()},
        "homographies": [Hm.ravel().tolist() for Hm in scenario.homographies],
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_ground_truth(path):
    doc = json.loads(Path(path).read_text())
    doc["camera"] = CameraMatrix.from_flat(doc["camera"])
    doc["homographies"] = np.array(
        [np.array(hm).reshape(3, 3) for hm in doc["homographies"]]
    )
    return doc
