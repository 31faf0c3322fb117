"""Synthetic ear-CT cases: seven Gaussian blob structures on a noisy field.

Each case places the seven landmarks by jittering a canonical right-ear
constellation (global shift + scale plus per-landmark jitter), renders one
anisotropic Gaussian blob of distinct amplitude per landmark, adds a smooth
background field and voxel noise, and quantizes to int16.  A configurable
fraction of cases is mirrored into left-ear geometry before being emitted,
so the laterality-normalization path gets exercised end to end.

Everything is driven by one seeded Generator: a fixed seed reproduces the
dataset bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import LANDMARK_NAMES
from .errors import DataError
from .volume import LandmarkSet, Volume

# canonical right-ear constellation, in fractions of the volume dims
TEMPLATE_FRACTIONS = {
    "RWN": (0.42, 0.46, 0.50),
    "INCUS_TIP": (0.58, 0.36, 0.62),
    "UMBO": (0.64, 0.58, 0.42),
    "MALLEUS_SHORT": (0.50, 0.66, 0.58),
    "PYRAMID_TIP": (0.34, 0.64, 0.38),
    "COCHLEA_APEX": (0.30, 0.34, 0.58),
    "COCHLEA_BASE": (0.46, 0.26, 0.38),
}

# distinct, well-separated amplitudes let the network tell structures apart
BLOB_AMPLITUDES = {
    "RWN": 1400.0,
    "INCUS_TIP": 1750.0,
    "UMBO": 2100.0,
    "MALLEUS_SHORT": 2450.0,
    "PYRAMID_TIP": 2800.0,
    "COCHLEA_APEX": 3150.0,
    "COCHLEA_BASE": 3500.0,
}

BLOB_SIGMA_FRACTIONS = (0.055, 0.055, 0.08)  # of (W, H, D); anisotropic in mm


@dataclass(frozen=True)
class SynthConfig:
    n_cases: int = 40
    dims: tuple[int, int, int] = (32, 32, 16)
    spacing: tuple[float, float, float] = (0.3, 0.3, 0.6)
    left_fraction: float = 0.575  # 23 of 40, the clinical mix
    seed: int = 0
    # jitter scales are fractions of each dim
    global_shift_frac: tuple[float, float, float] = (0.06, 0.06, 0.05)
    local_jitter_frac: tuple[float, float, float] = (0.035, 0.035, 0.03)
    scale_range: tuple[float, float] = (0.94, 1.06)
    noise_sd: float = 25.0
    background: float = -600.0
    min_separation_vox: float = 3.0
    max_retries: int = 25


@dataclass(frozen=True)
class SynthCase:
    volume: Volume
    landmarks: LandmarkSet
    patient_id: str

    @property
    def case_id(self) -> str:
        return self.volume.id


def render_blob_field(dims, center, sigmas, amplitude):
    """Continuous anisotropic Gaussian sampled at voxel centers."""
    xs = np.arange(dims[0], dtype=np.float64)
    ys = np.arange(dims[1], dtype=np.float64)
    zs = np.arange(dims[2], dtype=np.float64)
    dx = ((xs - center[0]) / sigmas[0]) ** 2
    dy = ((ys - center[1]) / sigmas[1]) ** 2
    dz = ((zs - center[2]) / sigmas[2]) ** 2
    return amplitude * np.exp(
        -0.5 * (dx[:, None, None] + dy[None, :, None] + dz[None, None, :])
    )


def _draw_landmarks(rng, cfg):
    dims = np.asarray(cfg.dims, dtype=np.float64)
    lo, hi = cfg.scale_range
    for _ in range(cfg.max_retries):
        scale = rng.uniform(lo, hi)
        shift = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.global_shift_frac) * dims
        center = dims / 2.0
        coords = {}
        for name in LANDMARK_NAMES:
            base = np.asarray(TEMPLATE_FRACTIONS[name]) * dims
            jitter = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.local_jitter_frac) * dims
            pos = center + scale * (base - center) + shift + jitter
            coords[name] = pos
        arr = np.array([coords[n] for n in LANDMARK_NAMES])
        margin = 2.0
        inside = np.all(arr >= margin) and np.all(arr <= dims - 1 - margin)
        dists = np.linalg.norm(arr[:, None, :] - arr[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if inside and dists.min() >= cfg.min_separation_vox:
            return {n: tuple(coords[n]) for n in LANDMARK_NAMES}
    raise DataError(
        f"could not place landmarks {cfg.min_separation_vox} voxels apart "
        f"after {cfg.max_retries} attempts"
    )


def _smooth_background(rng, dims, amplitude=120.0):
    """Low-frequency field: tiny random grid upsampled by separable repeats."""
    coarse = rng.normal(0.0, 1.0, (4, 4, 4))
    reps = [int(np.ceil(d / 4)) for d in dims]
    up = np.repeat(np.repeat(np.repeat(coarse, reps[0], 0), reps[1], 1), reps[2], 2)
    return amplitude * up[: dims[0], : dims[1], : dims[2]]


def generate_case(rng, cfg, case_id, laterality):
    """One case in the requested laterality (mirrored after rendering)."""
    coords = _draw_landmarks(rng, cfg)
    dims = cfg.dims
    sig_scale = rng.uniform(0.9, 1.1)
    sigmas = tuple(f * d * sig_scale for f, d in zip(BLOB_SIGMA_FRACTIONS, dims))
    grid = np.full(dims, cfg.background, dtype=np.float64)
    grid += _smooth_background(rng, dims)
    for name in LANDMARK_NAMES:
        grid += render_blob_field(dims, coords[name], sigmas, BLOB_AMPLITUDES[name])
    grid += rng.normal(0.0, cfg.noise_sd, dims)
    data = np.clip(np.rint(grid), -32768, 32767).astype(np.int16)
    lm = LandmarkSet(coords)
    v = Volume(data=data, spacing=cfg.spacing, laterality="Right", id=case_id)
    if laterality == "Left":
        flipped = np.ascontiguousarray(data[::-1, :, :])
        w = dims[0]
        lm = LandmarkSet(
            {n: ((w - 1) - x, y, z) for n, (x, y, z) in lm.coords.items()}
        )
        v = Volume(
            data=flipped, spacing=cfg.spacing, laterality="Left", id=case_id
        )
    return v, lm


def synth_generate(cfg: SynthConfig) -> list[SynthCase]:
    """Deterministic dataset of ``cfg.n_cases`` cases with patient grouping.

    Patients are assigned so the case:patient ratio matches the 40:25
    clinical layout (the first patients contribute two ears each).
    """
    if any(d < 16 for d in cfg.dims):
        raise DataError(f"dims must be >= 16 per axis, got {cfg.dims}")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_cases
    n_left = int(round(n * cfg.left_fraction))
    laterality = ["Left"] * n_left + ["Right"] * (n - n_left)
    rng.shuffle(laterality)

    n_patients = max(1, int(np.ceil(n * 25 / 40)))
    n_pairs = n - n_patients
    patient_of_case = []
    for p in range(n_patients):
        patient_of_case.append(p)
        if p < n_pairs:
            patient_of_case.append(p)
    patient_of_case = patient_of_case[:n]

    cases = []
    for i in range(n):
        case_id = f"case_{i:03d}"
        v, lm = generate_case(rng, cfg, case_id, laterality[i])
        cases.append(
            SynthCase(volume=v, landmarks=lm, patient_id=f"patient_{patient_of_case[i]:03d}")
        )
    return cases


def save_dataset(cases: list[SynthCase], out_dir, extra_meta=None) -> None:
    """Write every case plus a dataset.json manifest with patient grouping."""
    import json
    from pathlib import Path

    from .volume import save_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "cases": [
            {
                "id": c.case_id,
                "patient": c.patient_id,
                "laterality": c.volume.laterality,
            }
            for c in cases
        ],
    }
    if extra_meta:
        manifest.update(extra_meta)
    for c in cases:
        save_volume(out_dir / c.case_id, c.volume, c.landmarks)
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(in_dir) -> list[SynthCase]:
    import json
    from pathlib import Path

    from .volume import load_volume

    in_dir = Path(in_dir)
    try:
        manifest = json.loads((in_dir / "dataset.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no dataset.json in {in_dir}")
    cases = []
    for entry in manifest["cases"]:
        v, lm = load_volume(in_dir / entry["id"])
        cases.append(SynthCase(volume=v, landmarks=lm, patient_id=entry["patient"]))
    return cases
