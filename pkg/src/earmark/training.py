"""Cross-validation training: fold planning, preprocessing, the train loop.

Preprocessing normalizes every case into the network frame: mirror left
ears to right, crop the ROI, min-max scale intensities to [0, 1].  Targets
are the 21 ROI-voxel coordinates in canonical landmark order.  The recorded
(crop offset, flip flag, original width) triple maps predictions back into
each case's native frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DivergenceError
from .layers import msle_loss
from .model import ModelParams, backward, forward, init_params
from .netspec import NetworkSpec, default_netspec, parse_netspec
from .optim import AdamState, adam_step
from .synthdata import SynthCase
from .volume import RoiSpec, crop_roi, flip_to_right, map_back_to_case


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3500
    batch_size: int = 5
    learning_rate: float = 0.0005
    dropout: float = 0.2  # rate in the default architecture's D layer
    seed: int = 0
    netspec_text: str | None = None  # None: reference architecture for the dims
    dtype: str = "float32"
    k_folds: int = 5

    def resolve_spec(self, dims) -> NetworkSpec:
        if self.netspec_text is not None:
            return parse_netspec(self.netspec_text)
        return default_netspec((*dims, 1), dropout=self.dropout)


@dataclass(frozen=True)
class FoldPlan:
    """Patient-grouped partition of case ids into k folds."""

    k: int
    fold_of_case: dict[str, int]
    patients_per_fold: tuple[tuple[str, ...], ...]

    def cases_in_fold(self, f):
        return sorted(cid for cid, ff in self.fold_of_case.items() if ff == f)

    def to_json(self):
        return {
            "k": self.k,
            "fold_of_case": dict(sorted(self.fold_of_case.items())),
            "patients_per_fold": [list(p) for p in self.patients_per_fold],
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            k=d["k"],
            fold_of_case={k: int(v) for k, v in d["fold_of_case"].items()},
            patients_per_fold=tuple(tuple(p) for p in d["patients_per_fold"]),
        )


def make_folds(cases: list[SynthCase], k: int = 5, seed: int = 0) -> FoldPlan:
    """Deal patients round-robin into k folds; both ears stay together."""
    patients = {}
    for c in cases:
        patients.setdefault(c.patient_id, []).append(c.case_id)
    if len(patients) < k:
        raise DataError(f"need at least {k} patients, got {len(patients)}")
    order = sorted(patients)
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    fold_of_case = {}
    per_fold = [[] for _ in range(k)]
    for i, pid in enumerate(order):
        f = i % k
        per_fold[f].append(pid)
        for cid in patients[pid]:
            fold_of_case[cid] = f
    return FoldPlan(
        k=k,
        fold_of_case=fold_of_case,
        patients_per_fold=tuple(tuple(sorted(p)) for p in per_fold),
    )


@dataclass(frozen=True)
class PreparedCase:
    """Network-frame input plus the bookkeeping to invert the mapping."""

    case_id: str
    x: np.ndarray  # (W, H, D, 1) float in [0, 1]
    target: np.ndarray  # (21,) ROI voxel coordinates
    crop_offset: tuple[int, int, int]
    flipped: bool
    original_width: int  # full-volume extent along the flip axis
    flip_axis: str
    spacing: tuple[float, float, float]
    original_landmarks: np.ndarray  # (7, 3) native-frame ground truth


def preprocess_case(case: SynthCase, roi: RoiSpec | None = None,
                    dtype=np.float32) -> PreparedCase:
    v, lm = case.volume, case.landmarks
    original = lm.as_array()
    flipped = v.laterality == "Left"
    v, lm = flip_to_right(v, lm)
    if roi is None:
        roi = RoiSpec(corner=(0, 0, 0), size=v.dims)
    width = v.dims[{"x": 0, "y": 1, "z": 2}[v.flip_axis]]
    v, lm = crop_roi(v, lm, roi)
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi > lo:
        data = (data - lo) / (hi - lo)
    else:
        data = np.zeros_like(data)
    return PreparedCase(
        case_id=case.case_id,
        x=data[..., None].astype(dtype),
        target=lm.as_array().ravel(),
        crop_offset=v.crop_offset,
        flipped=flipped,
        original_width=width,
        flip_axis=v.flip_axis,
        spacing=case.volume.spacing,
        original_landmarks=original,
    )


def predictions_to_native(pred_21, prepared: PreparedCase) -> np.ndarray:
    """(21,) network output -> (7, 3) coordinates in the case's own frame."""
    coords = np.asarray(pred_21, dtype=np.float64).reshape(7, 3)
    return map_back_to_case(
        coords, prepared.crop_offset, prepared.flipped, prepared.original_width,
        prepared.flip_axis,
    )


def train_fold(prepared: list[PreparedCase], config: TrainConfig,
               spec: NetworkSpec, fold_seed: int):
    """Train one model on the given cases.

    Returns (params, epoch losses, final Adam state).
    """
    dtype = np.dtype(config.dtype).type
    params = init_params(spec, seed=fold_seed, dtype=dtype)
    state = AdamState.fresh(params.tensors, alpha=config.learning_rate)
    rng = np.random.default_rng(fold_seed)

    xs = np.stack([p.x for p in prepared]).astype(dtype)
    ts = np.stack([p.target for p in prepared]).astype(dtype)
    n = len(prepared)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred, caches = forward(params, xs[idx], training=True, rng=rng)
            loss, dpred = msle_loss(pred, ts[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            grads = backward(params, caches, dpred)
            new_tensors, state = adam_step(params.tensors, grads, state)
            params = ModelParams(spec=params.spec, tensors=new_tensors, seed=params.seed)
            total += loss * len(idx)
        losses.append(total / n)
    return params, losses, state


@dataclass(frozen=True)
class FoldResult:
    params: ModelParams
    losses: list[float]
    test_cases: list[PreparedCase]
    adam: AdamState | None = None


def train_cv(cases: list[SynthCase], plan: FoldPlan, config: TrainConfig,
             roi: RoiSpec | None = None, log=None, workers: int = 1):
    """Train one model per fold on the complementary folds.

    Folds are independent, so ``workers > 1`` trains them in parallel
    processes; per-fold seeding makes the results identical either way.
    Returns {fold: FoldResult}.
    """
    dims = cases[0].volume.dims if roi is None else roi.size
    spec = config.resolve_spec(dims)
    if spec.output_units != 21:
        raise DataError(
            f"landmark training needs a 21-unit output layer, got "
            f"{spec.output_units}"
        )
    prepared = {c.case_id: preprocess_case(c, roi, np.dtype(config.dtype).type)
                for c in cases}
    jobs = []
    for f in range(plan.k):
        train_ids = [cid for cid, ff in sorted(plan.fold_of_case.items()) if ff != f]
        if log:
            log(f"fold {f}: training on {len(train_ids)} cases, "
                f"testing on {len(plan.cases_in_fold(f))}")
        jobs.append(([prepared[cid] for cid in train_ids], config, spec,
                     config.seed + f))

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            trained = list(pool.map(_train_fold_job, jobs))
    else:
        trained = [_train_fold_job(job) for job in jobs]

    results = {}
    for f, (params, losses, state) in enumerate(trained):
        if log:
            log(f"fold {f}: loss {losses[0]:.6f} -> {losses[-1]:.6f}")
        results[f] = FoldResult(
            params=params, losses=losses,
            test_cases=[prepared[cid] for cid in plan.cases_in_fold(f)],
            adam=state,
        )
    return results


def _train_fold_job(job):
    prepared, config, spec, fold_seed = job
    return train_fold(prepared, config, spec, fold_seed=fold_seed)
