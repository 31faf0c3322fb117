"""CT volume data model: laterality, ROI cropping and voxel/mm coordinate math.

Volumes are anisotropic int16 grids indexed ``data[x, y, z]`` with per-axis
voxel spacing in millimetres.  Left-ear scans are mirrored along x into a
right-ear canonical frame before any learning happens; landmark coordinates
are continuous (sub-voxel) throughout.

On disk a volume is a pair of files sharing one stem:

* ``<stem>.raw``  -- little-endian int16 voxels, x-fastest order
* ``<stem>.json`` -- sidecar with dims, spacing, laterality, id, the seven
  landmarks and an optional crop offset
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import LANDMARK_NAMES
from .errors import (
    InvalidAnnotationError,
    MetadataError,
    MissingLandmarkError,
    RoiExcludesLandmarkError,
    SizeMismatchError,
)

LATERALITIES = ("Left", "Right")

DEFAULT_ROI_SIZE = (200, 200, 100)

MAX_SPACING_MM = 10.0


FLIP_AXES = ("x", "y", "z")


@dataclass(frozen=True)
class Volume:
    """One CT scan.  ``data`` has shape ``(W, H, D)`` and dtype int16.

    ``flip_axis`` names the left-right image axis used by laterality
    normalization; x is the convention, the sidecar may override it.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    laterality: str
    id: str
    crop_offset: tuple[int, int, int] | None = None
    flip_axis: str = "x"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise MetadataError(f"volume data must be 3-D, got {self.data.ndim}-D")
        if any(d <= 0 for d in self.data.shape):
            raise MetadataError(f"nonpositive volume dims {self.data.shape}")
        if self.data.dtype != np.int16:
            raise MetadataError(f"volume dtype must be int16, got {self.data.dtype}")
        if len(self.spacing) != 3 or any(
            not (0.0 < s < MAX_SPACING_MM) for s in self.spacing
        ):
            raise MetadataError(
                f"spacing must be three values in (0, {MAX_SPACING_MM}) mm, "
                f"got {self.spacing}"
            )
        if self.laterality not in LATERALITIES:
            raise MetadataError(f"laterality must be one of {LATERALITIES}")
        if self.flip_axis not in FLIP_AXES:
            raise MetadataError(f"flip_axis must be one of {FLIP_AXES}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LandmarkSet:
    """The seven named landmarks as continuous voxel coordinates."""

    coords: dict[str, tuple[float, float, float]]

    def __post_init__(self):
        missing = [n for n in LANDMARK_NAMES if n not in self.coords]
        if missing:
            raise MissingLandmarkError(f"missing landmark(s): {', '.join(missing)}")
        extra = [n for n in self.coords if n not in LANDMARK_NAMES]
        if extra:
            raise MetadataError(f"unknown landmark(s): {', '.join(extra)}")

    def as_array(self) -> np.ndarray:
        """(7, 3) float64 array in canonical landmark order."""
        return np.array([self.coords[n] for n in LANDMARK_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "LandmarkSet":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (len(LANDMARK_NAMES), 3):
            raise MetadataError(f"landmark array must be (7, 3), got {arr.shape}")
        return cls({n: tuple(arr[i]) for i, n in enumerate(LANDMARK_NAMES)})

    def __getitem__(self, name):
        return self.coords[name]


@dataclass(frozen=True)
class RoiSpec:
    """Integer-corner crop box; defaults to the 200x200x100 network input."""

    corner: tuple[int, int, int]
    size: tuple[int, int, int] = DEFAULT_ROI_SIZE

    def validate_for(self, dims):
        if any(c < 0 for c in self.corner):
            raise MetadataError(f"ROI corner must be nonnegative, got {self.corner}")
        if any(s < 1 for s in self.size):
            raise MetadataError(f"ROI size must be positive, got {self.size}")
        if any(c + s > d for c, s, d in zip(self.corner, self.size, dims)):
            raise MetadataError(
                f"ROI corner {self.corner} + size {self.size} exceeds dims {dims}"
            )


def check_landmarks_inside(lm: LandmarkSet, dims) -> None:
    """Raise if any landmark falls outside ``[0, dim-1]`` on any axis."""
    for name, xyz in lm.coords.items():
        for axis, (c, d) in enumerate(zip(xyz, dims)):
            if not (0.0 <= c <= d - 1):
                raise InvalidAnnotationError(
                    f"landmark {name} axis {axis} = {c} outside [0, {d - 1}]"
                )


def flip_to_right(v: Volume, lm: LandmarkSet) -> tuple[Volume, LandmarkSet]:
    """Mirror a left-ear scan into the right-ear canonical frame.

    Right-ear inputs are returned unchanged.  The mirror runs along the
    volume's ``flip_axis`` (x unless the sidecar says otherwise): that
    coordinate c becomes (dim-1) - c.
    """
    check_landmarks_inside(lm, v.dims)
    if v.laterality == "Right":
        return v, lm
    axis = FLIP_AXES.index(v.flip_axis)
    extent = v.dims[axis]
    flipped = np.ascontiguousarray(np.flip(v.data, axis=axis))
    new_coords = {}
    for name, xyz in lm.coords.items():
        c = list(xyz)
        c[axis] = (extent - 1) - c[axis]
        new_coords[name] = tuple(c)
    return replace(v, data=flipped, laterality="Right"), LandmarkSet(new_coords)


def crop_roi(v: Volume, lm: LandmarkSet, roi: RoiSpec) -> tuple[Volume, LandmarkSet]:
    """Extract the ROI sub-volume and translate landmarks into it.

    The crop corner is stored on the returned volume so predictions can be
    mapped back with :func:`map_back_to_case`.
    """
    roi.validate_for(v.dims)
    check_landmarks_inside(lm, v.dims)
    cx, cy, cz = roi.corner
    sx, sy, sz = roi.size
    outside = [
        name
        for name, xyz in lm.coords.items()
        if not all(c <= p <= c + s - 1 for p, c, s in zip(xyz, roi.corner, roi.size))
    ]
    if outside:
        raise RoiExcludesLandmarkError(sorted(outside))
    sub = np.ascontiguousarray(v.data[cx : cx + sx, cy : cy + sy, cz : cz + sz])
    new_coords = {
        name: (x - cx, y - cy, z - cz) for name, (x, y, z) in lm.coords.items()
    }
    return replace(v, data=sub, crop_offset=roi.corner), LandmarkSet(new_coords)


def map_back_to_case(
    coords: np.ndarray,
    crop_offset: tuple[int, int, int] | None,
    flipped: bool,
    original_width: int,
    flip_axis: str = "x",
) -> np.ndarray:
    """Undo ROI translation and (optional) laterality mirroring.

    ``coords`` is (..., 3) in ROI voxel coordinates of the right-lateral
    frame; ``original_width`` is the full-volume extent along the flip
    axis.  The result is in the original case's voxel frame.
    """
    out = np.array(coords, dtype=np.float64)
    if crop_offset is not None:
        out = out + np.asarray(crop_offset, dtype=np.float64)
    if flipped:
        axis = FLIP_AXES.index(flip_axis)
        out[..., axis] = (original_width - 1) - out[..., axis]
    return out


def physical_distance_mm(a, b, spacing) -> float:
    """Euclidean distance in millimetres between two voxel coordinates."""
    if any(s <= 0 for s in spacing):
        raise MetadataError(f"spacing must be positive, got {spacing}")
    d = [s * (ai - bi) for s, ai, bi in zip(spacing, a, b)]
    return float(np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _sidecar_paths(path):
    stem = Path(path)
    if stem.suffix in (".raw", ".json"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".raw"), stem.with_suffix(".json")


def save_volume(path, v: Volume, lm: LandmarkSet) -> None:
    """Write ``<stem>.raw`` + ``<stem>.json``; round-trips bit-exactly."""
    raw_path, json_path = _sidecar_paths(path)
    check_landmarks_inside(lm, v.dims)
    # x-fastest payload order: index = x + W*(y + H*z)
    payload = np.ascontiguousarray(v.data.transpose(2, 1, 0)).astype("<i2")
    raw_path.write_bytes(payload.tobytes())
    meta = {
        "id": v.id,
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "laterality": v.laterality,
        "flip_axis": v.flip_axis,
        "crop_offset": list(v.crop_offset) if v.crop_offset is not None else None,
        "landmarks": {n: list(lm.coords[n]) for n in LANDMARK_NAMES},
    }
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_volume(path) -> tuple[Volume, LandmarkSet]:
    """Read a volume + landmark pair written by :func:`save_volume`."""
    raw_path, json_path = _sidecar_paths(path)
    try:
        meta = json.loads(json_path.read_text())
    except FileNotFoundError:
        raise MetadataError(f"sidecar not found: {json_path}")
    except json.JSONDecodeError as e:
        raise MetadataError(f"malformed sidecar {json_path}: {e}")
    for key in ("id", "dims", "spacing", "laterality", "landmarks"):
        if key not in meta:
            raise MetadataError(f"sidecar missing field '{key}'")
    dims = tuple(int(d) for d in meta["dims"])
    if len(dims) != 3:
        raise MetadataError(f"dims must have three entries, got {meta['dims']}")
    expected = dims[0] * dims[1] * dims[2] * 2
    blob = raw_path.read_bytes()
    if len(blob) != expected:
        raise SizeMismatchError(
            f"{raw_path}: payload is {len(blob)} bytes, expected {expected} "
            f"for dims {dims}"
        )
    grid = np.frombuffer(blob, dtype="<i2").reshape(dims[2], dims[1], dims[0])
    data = np.ascontiguousarray(grid.transpose(2, 1, 0)).astype(np.int16)
    offset = meta.get("crop_offset")
    v = Volume(
        data=data,
        spacing=tuple(float(s) for s in meta["spacing"]),
        laterality=meta["laterality"],
        id=str(meta["id"]),
        crop_offset=tuple(int(c) for c in offset) if offset is not None else None,
        flip_axis=meta.get("flip_axis", "x"),
    )
    lm_raw = meta["landmarks"]
    missing = [n for n in LANDMARK_NAMES if n not in lm_raw]
    if missing:
        raise MissingLandmarkError(f"sidecar missing landmark(s): {', '.join(missing)}")
    lm = LandmarkSet({n: tuple(float(c) for c in lm_raw[n]) for n in lm_raw})
    check_landmarks_inside(lm, v.dims)
    return v, lm


def load_annotations(path) -> dict[str, LandmarkSet]:
    """Standalone landmark file: JSON mapping case id -> {name: [x, y, z]}."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MetadataError(f"malformed annotation file {path}: {e}")
    out = {}
    for case_id, table in raw.items():
        out[case_id] = LandmarkSet(
            {n: tuple(float(c) for c in xyz) for n, xyz in table.items()}
        )
    return out
