"""Fold planning, preprocessing and train-loop behaviour."""

import numpy as np
import pytest

from earmark.errors import DataError
from earmark.synthdata import SynthCase, SynthConfig, synth_generate
from earmark.training import (
    TrainConfig,
    make_folds,
    preprocess_case,
    predictions_to_native,
    train_cv,
    train_fold,
)
from earmark.volume import RoiSpec

TINY_TRAIN_SPEC = "I(16,16,16,1) C(f=4,k=3) P(2) FC(32) O(21)"


@pytest.fixture(scope="module")
def small_cases():
    return synth_generate(SynthConfig(n_cases=10, dims=(16, 16, 16), seed=21))


class TestMakeFolds:
    def test_25_patients_balanced(self):
        cases = synth_generate(SynthConfig(n_cases=40, seed=1))
        plan = make_folds(cases, k=5, seed=0)
        assert all(len(p) == 5 for p in plan.patients_per_fold)
        # both ears of a patient share a fold
        by_patient = {}
        for c in cases:
            by_patient.setdefault(c.patient_id, set()).add(plan.fold_of_case[c.case_id])
        assert all(len(folds) == 1 for folds in by_patient.values())

    def test_partition_covers_all_cases_once(self, small_cases):
        plan = make_folds(small_cases, k=5, seed=3)
        ids = [cid for f in range(5) for cid in plan.cases_in_fold(f)]
        assert sorted(ids) == sorted(c.case_id for c in small_cases)

    def test_one_ear_per_patient(self):
        cases = synth_generate(SynthConfig(n_cases=5, dims=(16, 16, 16), seed=4))
        # 5 cases -> ceil(5*25/40)=4 patients; regroup manually to 5 singles
        cases = [
            SynthCase(volume=c.volume, landmarks=c.landmarks, patient_id=f"p{i}")
            for i, c in enumerate(cases)
        ]
        plan = make_folds(cases, k=5, seed=0)
        assert sorted(len(p) for p in plan.patients_per_fold) == [1, 1, 1, 1, 1]

    def test_deterministic(self, small_cases):
        a = make_folds(small_cases, k=5, seed=9)
        b = make_folds(small_cases, k=5, seed=9)
        assert a == b

    def test_too_few_patients(self, small_cases):
        merged = [
            SynthCase(volume=c.volume, landmarks=c.landmarks, patient_id="p0")
            for c in small_cases
        ]
        with pytest.raises(DataError):
            make_folds(merged, k=5, seed=0)

    def test_roundtrip_json(self, small_cases):
        plan = make_folds(small_cases, k=5, seed=1)
        from earmark.training import FoldPlan

        assert FoldPlan.from_json(plan.to_json()) == plan


class TestPreprocess:
    def test_input_normalized_to_unit_range(self, small_cases):
        prep = preprocess_case(small_cases[0])
        assert prep.x.min() == 0.0
        assert prep.x.max() == 1.0
        assert prep.x.shape == (16, 16, 16, 1)

    def test_left_case_flip_tracked(self, small_cases):
        left = next(c for c in small_cases if c.volume.laterality == "Left")
        prep = preprocess_case(left)
        assert prep.flipped
        native = predictions_to_native(prep.target, prep)
        np.testing.assert_allclose(native, left.landmarks.as_array(), atol=1e-9)

    def test_right_case_identity(self, small_cases):
        right = next(c for c in small_cases if c.volume.laterality == "Right")
        prep = preprocess_case(right)
        assert not prep.flipped
        np.testing.assert_allclose(
            prep.target.reshape(7, 3), right.landmarks.as_array(), atol=0
        )

    def test_roi_crop_offsets_roundtrip(self, small_cases):
        case = small_cases[0]
        # choose a corner that still contains all landmarks
        arr = (
            case.landmarks.as_array()
            if case.volume.laterality == "Right"
            else np.abs(
                case.landmarks.as_array() - np.array([case.volume.dims[0] - 1, 0, 0])
            )
        )
        lo = np.clip(np.floor(arr.min(axis=0)) - 1, 0, None).astype(int)
        roi = RoiSpec(corner=tuple(lo), size=tuple(d - c for d, c in zip((16, 16, 16), lo)))
        prep = preprocess_case(case, roi=roi)
        native = predictions_to_native(prep.target, prep)
        np.testing.assert_allclose(native, case.landmarks.as_array(), atol=1e-9)


class TestTrainFold:
    def test_zero_learning_rate_freezes_params(self, small_cases):
        cfg = TrainConfig(epochs=3, learning_rate=0.0, seed=1,
                          netspec_text=TINY_TRAIN_SPEC, dtype="float64")
        spec = cfg.resolve_spec((16, 16, 16))
        prepared = [preprocess_case(c, dtype=np.float64) for c in small_cases[:4]]
        from earmark.model import init_params

        before = init_params(spec, seed=cfg.seed, dtype=np.float64)
        params, losses, _ = train_fold(prepared, cfg, spec, fold_seed=cfg.seed)
        for k in before.tensors:
            np.testing.assert_array_equal(params.tensors[k], before.tensors[k])
        assert losses[0] == pytest.approx(losses[-1], rel=1e-12)

    def test_single_case_overfit(self, small_cases):
        cfg = TrainConfig(epochs=200, batch_size=5, learning_rate=0.002, seed=2,
                          netspec_text=TINY_TRAIN_SPEC)
        spec = cfg.resolve_spec((16, 16, 16))
        prepared = [preprocess_case(small_cases[0])]
        params, losses, _ = train_fold(prepared, cfg, spec, fold_seed=2)
        assert losses[-1] < 0.01 * losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_epoch(self, small_cases):
        from earmark.errors import DivergenceError

        cfg = TrainConfig(epochs=30, learning_rate=1e12, seed=0,
                          netspec_text=TINY_TRAIN_SPEC)
        spec = cfg.resolve_spec((16, 16, 16))
        prepared = [preprocess_case(c) for c in small_cases[:2]]
        with pytest.raises(DivergenceError, match="epoch"):
            train_fold(prepared, cfg, spec, fold_seed=0)

    def test_loss_curve_deterministic(self, small_cases):
        cfg = TrainConfig(epochs=4, seed=5, netspec_text=TINY_TRAIN_SPEC)
        spec = cfg.resolve_spec((16, 16, 16))
        prepared = [preprocess_case(c) for c in small_cases[:6]]
        _, a, _ = train_fold(prepared, cfg, spec, fold_seed=5)
        _, b, _ = train_fold(prepared, cfg, spec, fold_seed=5)
        assert a == b


class TestTrainCv:
    def test_smoke_and_partition(self, small_cases):
        cfg = TrainConfig(epochs=2, seed=3, netspec_text=TINY_TRAIN_SPEC)
        plan = make_folds(small_cases, k=5, seed=3)
        results = train_cv(small_cases, plan, cfg)
        assert set(results) == set(range(5))
        tested = [p.case_id for f in results.values() for p in f.test_cases]
        assert sorted(tested) == sorted(c.case_id for c in small_cases)

    def test_rejects_non_21_output(self, small_cases):
        cfg = TrainConfig(epochs=1, seed=3, netspec_text="I(16,16,16,1) O(10)")
        plan = make_folds(small_cases, k=5, seed=3)
        with pytest.raises(DataError, match="21"):
            train_cv(small_cases, plan, cfg)

    def test_parallel_folds_match_sequential(self, small_cases):
        cfg = TrainConfig(epochs=2, seed=3, netspec_text=TINY_TRAIN_SPEC)
        plan = make_folds(small_cases, k=5, seed=3)
        seq = train_cv(small_cases, plan, cfg, workers=1)
        par = train_cv(small_cases, plan, cfg, workers=2)
        for f in range(5):
            assert seq[f].losses == par[f].losses
            for k in seq[f].params.tensors:
                np.testing.assert_array_equal(seq[f].params.tensors[k],
                                              par[f].params.tensors[k])
