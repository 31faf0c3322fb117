"""Rasterize the cochlear axis and landmark dots onto video frames.

Rasterization is defined by a center-distance test: a pixel is painted iff
its center lies within width/2 of the ideal segment (respectively within
the dot radius of the dot center).  Dots are drawn after the axis so they
sit on top.  Everything off-frame is clipped by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageFormatError


@dataclass(frozen=True)
class OverlaySpec:
    axis_color: tuple[int, int, int] = (255, 0, 0)
    axis_width: float = 2.0
    dot_color: tuple[int, int, int] = (255, 255, 0)
    dot_radius: float = 3.0

    def __post_init__(self):
        if self.axis_width < 1 or self.dot_radius < 1:
            raise ImageFormatError("axis width and dot radius must be >= 1")


def _to_rgb(frame) -> np.ndarray:
    f = np.asarray(frame)
    if f.ndim == 2:
        if f.dtype != np.uint8:  # grayscale in [0, 1]
            f = np.clip(np.rint(f * 255.0), 0, 255).astype(np.uint8)
        return np.repeat(f[:, :, None], 3, axis=2)
    if f.ndim == 3 and f.shape[2] == 3 and f.dtype == np.uint8:
        return f.copy()
    raise ImageFormatError(f"frame must be (H, W) gray or (H, W, 3) uint8, got {f.shape}")


def _paint_disk(img, center, radius, color):
    h, w, _ = img.shape
    cx, cy = center
    x0 = max(0, int(np.floor(cx - radius)))
    x1 = min(w - 1, int(np.ceil(cx + radius)))
    y0 = max(0, int(np.floor(cy - radius)))
    y1 = min(h - 1, int(np.ceil(cy + radius)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    img[y0 : y1 + 1, x0 : x1 + 1][mask] = color


def _paint_segment(img, p0, p1, width, color):
    h, w, _ = img.shape
    half = width / 2.0
    x0 = max(0, int(np.floor(min(p0[0], p1[0]) - half)))
    x1 = min(w - 1, int(np.ceil(max(p0[0], p1[0]) + half)))
    y0 = max(0, int(np.floor(min(p0[1], p1[1]) - half)))
    y1 = min(h - 1, int(np.ceil(max(p0[1], p1[1]) + half)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    ax, ay = p0
    dx, dy = p1[0] - ax, p1[1] - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        t = np.zeros_like(xs, dtype=np.float64)
    else:
        t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / seg2, 0.0, 1.0)
    dist2 = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2
    mask = dist2 <= half * half
    img[y0 : y1 + 1, x0 : x1 + 1][mask] = color


def render_overlay(frame, segment=None, dots=(), spec: OverlaySpec | None = None):
    """Grayscale frame -> RGB with the axis segment and landmark dots.

    ``segment`` is a pair of 2-D pixel points or None; ``dots`` a list of
    2-D pixel points.  Returns (H, W, 3) uint8.
    """
    spec = spec or OverlaySpec()
    img = _to_rgb(frame)
    if segment is not None:
        _paint_segment(img, segment[0], segment[1], spec.axis_width, spec.axis_color)
    for dot in dots:
        _paint_disk(img, dot, spec.dot_radius, spec.dot_color)
    return img
