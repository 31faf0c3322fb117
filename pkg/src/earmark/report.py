"""Per-landmark error reports in the seven-column tabular layout.

The overall row pools every per-case, per-landmark error: its mean is the
mean of that flat set and its spread is the population SD of the same set
(not the mean of the per-landmark columns).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import LANDMARK_NAMES
from .errors import DataError
from .model import ModelParams, predict
from .training import FoldPlan, PreparedCase, predictions_to_native
from .volume import physical_distance_mm

SHORT_NAMES = {
    "RWN": "R",
    "INCUS_TIP": "I",
    "UMBO": "U",
    "MALLEUS_SHORT": "S",
    "PYRAMID_TIP": "P",
    "COCHLEA_APEX": "A",
    "COCHLEA_BASE": "B",
}


@dataclass(frozen=True)
class EvalReport:
    """Raw per-case errors plus the derived per-landmark and overall stats."""

    errors_mm: dict[str, dict[str, float]]  # case id -> landmark -> mm
    errors_vox: dict[str, dict[str, float]]

    def _column(self, name):
        return np.array([self.errors_mm[c][name] for c in sorted(self.errors_mm)])

    def per_landmark(self):
        out = {}
        for name in LANDMARK_NAMES:
            col = self._column(name)
            out[name] = (float(col.mean()), float(col.std()))
        return out

    def overall(self):
        flat = np.array(
            [self.errors_mm[c][n] for c in sorted(self.errors_mm) for n in LANDMARK_NAMES]
        )
        return float(flat.mean()), float(flat.std())

    def overall_vox(self):
        flat = np.array(
            [self.errors_vox[c][n] for c in sorted(self.errors_vox) for n in LANDMARK_NAMES]
        )
        return float(flat.mean()), float(flat.std())

    def render_text(self) -> str:
        per = self.per_landmark()
        mean, sd = self.overall()
        header = ["Landmark    "] + [f"{SHORT_NAMES[n]:>6}" for n in LANDMARK_NAMES]
        header.append("  Overall")
        row_m = ["Error (mm)  "] + [f"{per[n][0]:6.2f}" for n in LANDMARK_NAMES]
        row_m.append(f"  {mean:7.2f}")
        row_s = ["SD (mm)     "] + [f"{per[n][1]:6.2f}" for n in LANDMARK_NAMES]
        row_s.append(f"  {sd:7.2f}")
        return "\n".join("".join(r) for r in (header, row_m, row_s))

    def to_json(self) -> str:
        per = self.per_landmark()
        mean, sd = self.overall()
        vmean, vsd = self.overall_vox()
        doc = {
            "per_landmark": {
                n: {"mean_mm": per[n][0], "sd_mm": per[n][1]} for n in LANDMARK_NAMES
            },
            "overall": {"mean_mm": mean, "sd_mm": sd},
            "overall_voxels": {"mean_vox": vmean, "sd_vox": vsd},
            "per_case_mm": {c: self.errors_mm[c] for c in sorted(self.errors_mm)},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_raw_errors(cls, errors_mm, errors_vox=None):
        if errors_vox is None:
            errors_vox = {c: {n: 0.0 for n in row} for c, row in errors_mm.items()}
        return cls(errors_mm=errors_mm, errors_vox=errors_vox)


def evaluate_cv(results, plan: FoldPlan) -> EvalReport:
    """Score every case in its held-out fold; errors in native coordinates.

    ``results`` maps fold -> FoldResult (anything with .params/.test_cases).
    """
    seen = set()
    errors_mm = {}
    errors_vox = {}
    for f, fold in results.items():
        for prep in fold.test_cases:
            if prep.case_id in seen:
                raise DataError(f"case {prep.case_id} appears in two folds")
            seen.add(prep.case_id)
            errors_mm[prep.case_id], errors_vox[prep.case_id] = score_case(
                fold.params, prep
            )
    expected = set(plan.fold_of_case)
    if seen != expected:
        missing = sorted(expected - seen)
        raise DataError(f"cases never evaluated: {missing}")
    return EvalReport(errors_mm=errors_mm, errors_vox=errors_vox)


def score_case(params: ModelParams, prep: PreparedCase):
    """Per-landmark mm and voxel errors for one case."""
    pred = predict(params, prep.x[None].astype(params.tensors[next(iter(params.tensors))].dtype))
    native = predictions_to_native(pred[0], prep)
    mm = {}
    vox = {}
    for i, name in enumerate(LANDMARK_NAMES):
        gt = prep.original_landmarks[i]
        mm[name] = physical_distance_mm(native[i], gt, prep.spacing)
        vox[name] = float(np.linalg.norm(native[i] - gt))
    return mm, vox
