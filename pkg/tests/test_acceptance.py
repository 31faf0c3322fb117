"""Acceptance suite: one test per release criterion, stated tolerances pinned.

Run with ``pytest tests/test_acceptance.py -v -s`` to get one line per
criterion.  The desk-scale cross-validation run (criterion 3) takes several
minutes; everything else is fast.
"""

import json
import time

import numpy as np
import pytest

from earmark import LANDMARK_NAMES, layers
from earmark.errors import DegeneracyError, NetspecError
from earmark.model import backward, forward, init_params, load_checkpoint
from earmark.netspec import default_netspec, format_shape_table, infer_shapes, parse_netspec, serialize
from earmark.optim import AdamState, adam_step
from earmark.registration import Correspondence, dlt_resect, project_point
from earmark.synthcam import ScenarioParams, generate_scenario, save_scenario
from earmark.synthdata import SynthConfig, synth_generate
from earmark.tracking import Frame, TrackState, advance, apply_homography, ransac_homography
from earmark.volume import LandmarkSet, Volume, flip_to_right, load_volume, save_volume

from oracles import central_difference, conv3d_naive, max_rel_err, maxpool3d_naive, se_naive
from test_registration import random_camera, synthetic_corrs


def report(line):
    print(f"\n[acceptance] {line}")


# ---------------------------------------------------------------------------
# Criterion 1: gradient integrity (each layer type + full tiny model), < 2 min
# ---------------------------------------------------------------------------

def test_criterion_gradient_integrity():
    t0 = time.time()
    rng = np.random.default_rng(100)
    failures = []

    def check(name, forward_fn, arrays, step=1e-5):
        y, backward_fn = forward_fn(*arrays)
        proj = rng.standard_normal(y.shape)
        grads = backward_fn(proj)
        for label, arr, grad in zip("xwb", arrays, grads):
            if grad is None:
                continue
            num = central_difference(
                lambda: float(np.sum(forward_fn(*arrays)[0] * proj)), arr, step=step
            )
            err = max_rel_err(grad, num)
            if err >= 1e-4:
                failures.append(f"{name}/{label}: {err:.2e}")

    x = rng.standard_normal((2, 4, 4, 3, 2))
    w = rng.standard_normal((3, 3, 3, 2, 3))
    b = rng.standard_normal(3)
    check("conv3d", lambda x, w, b: (lambda out: (out[0], lambda dy: layers.conv3d_backward(out[1], dy)))(layers.conv3d(x, w, b)), [x, w, b])

    xe = rng.standard_normal((4, 33)) + 0.05
    check("elu", lambda x: (lambda out: (out[0], lambda dy: (layers.elu_backward(out[1], dy),)))(layers.elu(x)), [xe])

    xs = rng.standard_normal((2, 3, 3, 2, 4))
    w1 = rng.standard_normal((4, 2))
    w2 = rng.standard_normal((2, 4))
    check("se_block", lambda x, w1, w2: (lambda out: (out[0], lambda dy: layers.se_block_backward(out[1], dy)))(layers.se_block(x, w1, w2)), [xs, w1, w2])

    xp = rng.permutation(np.arange(2 * 4 * 4 * 4 * 2, dtype=np.float64)).reshape(2, 4, 4, 4, 2)
    check("maxpool3d", lambda x: (lambda out: (out[0], lambda dy: (layers.maxpool3d_backward(out[1], dy),)))(layers.maxpool3d(x, 2)), [xp])

    xd = rng.standard_normal((3, 6))
    wd = rng.standard_normal((6, 4))
    bd = rng.standard_normal(4)
    check("dense", lambda x, w, b: (lambda out: (out[0], lambda dy: layers.dense_backward(out[1], dy)))(layers.dense(x, w, b)), [xd, wd, bd])

    xdr = rng.standard_normal((3, 20))
    mask = rng.random((3, 20)) >= 0.2
    check("dropout", lambda x: (lambda out: (out[0], lambda dy: (layers.dropout_backward(out[1], dy),)))(layers.dropout(x, 0.2, True, mask=mask)), [xdr])

    pred = rng.uniform(0.5, 10, (2, 21))
    target = rng.uniform(0, 10, (2, 21))
    _, g = layers.msle_loss(pred, target)
    num = central_difference(lambda: layers.msle_loss(pred, target)[0], pred, 1e-5)
    if max_rel_err(g, num) >= 1e-4:
        failures.append(f"msle: {max_rel_err(g, num):.2e}")

    # full tiny model (margin-filtered test point; see test_model for the why)
    from test_model import TINY_SPEC, _MaskReplay, _pool_margins

    spec = parse_netspec(TINY_SPEC)
    params = init_params(spec, seed=7)
    params.tensors["5.out.b"][:] = 3.0
    masks = [np.random.default_rng(99).random((1, 10)) >= 0.2]
    xin = target_full = None
    for seed in range(500):
        drng = np.random.default_rng(seed)
        cand = drng.uniform(0, 1, (1, 6, 6, 6, 1))
        gap, hm, shift = _pool_margins(params, cand)
        if gap > 5 * shift and hm > 20 * shift:
            p, _ = forward(params, cand, training=True, rng=_MaskReplay(masks))
            if float(p.min()) > 0.5:
                xin, target_full = cand, drng.uniform(0, 5, (1, 21))
                break
    assert xin is not None

    def loss_fn():
        p, _ = forward(params, xin, training=True, rng=_MaskReplay(masks))
        return layers.msle_loss(p, target_full)[0]

    p, caches = forward(params, xin, training=True, rng=_MaskReplay(masks))
    _, dp = layers.msle_loss(p, target_full)
    grads = backward(params, caches, dp)
    for name in sorted(params.tensors):
        num = central_difference(loss_fn, params.tensors[name], step=1e-3)
        err = max_rel_err(grads[name], num)
        if err >= 1e-4:
            failures.append(f"model/{name}: {err:.2e}")

    elapsed = time.time() - t0
    assert not failures, failures
    assert elapsed < 120, f"gradient suite took {elapsed:.0f}s"
    report(f"PASS gradient integrity (all layers + full model, {elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# Criterion 2: oracle equivalence on 200 randomized shapes <= 6x6x6x4
# ---------------------------------------------------------------------------

def test_criterion_oracle_equivalence():
    rng = np.random.default_rng(200)
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(1, 3))
        W, H, D = (int(rng.integers(2, 7)) for _ in range(3))
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        x = rng.standard_normal((n, W, H, D, cin))

        k = int(rng.integers(1, min(W, H, D) + 1))
        k = min(k, 3)
        stride = int(rng.integers(1, 3))
        padding = ("same", "valid")[int(rng.integers(0, 2))]
        w = rng.standard_normal((k, k, k, cin, cout))
        b = rng.standard_normal(cout)
        y, _ = layers.conv3d(x, w, b, stride=stride, padding=padding)
        worst = max(worst, float(np.max(np.abs(y - conv3d_naive(x, w, b, stride, padding)))))

        window = int(rng.integers(1, min(W, H, D) + 1))
        ps = int(rng.integers(1, window + 1))
        y, _ = layers.maxpool3d(x, window, ps)
        worst = max(worst, float(np.max(np.abs(y - maxpool3d_naive(x, window, ps)))))

        if cin % 2 == 0:
            w1 = rng.standard_normal((cin, cin // 2))
            w2 = rng.standard_normal((cin // 2, cin))
            y, _ = layers.se_block(x, w1, w2)
            worst = max(worst, float(np.max(np.abs(y - se_naive(x, w1, w2)))))
    assert worst < 1e-12, worst
    report(f"PASS oracle equivalence (200 shapes, worst |diff| = {worst:.2e})")


# ---------------------------------------------------------------------------
# Criterion 3 + 4: desk-scale cross-validation, then flip equivariance
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_scale_run(tmp_path_factory):
    from earmark.cli import main

    root = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    assert main(["synth", "--out", str(root / "ds"), "--cases", "40",
                 "--dims", "32,32,16", "--spacing", "0.3,0.3,0.6",
                 "--seed", "7"]) == 0
    assert main(["train", "--data", str(root / "ds"), "--out", str(root / "run"),
                 "--epochs", "300", "--batch-size", "5", "--lr", "0.0005",
                 "--folds", "5", "--seed", "7"]) == 0
    assert main(["eval", "--data", str(root / "ds"), "--run", str(root / "run")]) == 0
    elapsed = time.time() - t0
    return root, elapsed


def test_criterion_desk_scale_training(desk_scale_run):
    root, elapsed = desk_scale_run
    doc = json.loads((root / "run" / "report.json").read_text())
    mean_vox = doc["overall_voxels"]["mean_vox"]
    mean_mm = doc["overall"]["mean_mm"]
    assert mean_vox < 2.0, f"mean voxel error {mean_vox}"
    assert mean_mm < 0.7, f"mean mm error {mean_mm}"
    # training loss dropped by >= 90 % in every fold
    for f in range(5):
        log = (root / "run" / f"loss_fold_{f}.log").read_text().splitlines()
        first = float(log[0].split()[1])
        last = float(log[-1].split()[1])
        assert last <= 0.1 * first, f"fold {f}: {first} -> {last}"
    # Table-1 schema: seven landmark columns plus the overall column
    table = (root / "run" / "report.txt").read_text()
    for col in ("R", "I", "U", "S", "P", "A", "B", "Overall"):
        assert col in table.split("\n")[0]
    assert elapsed < 900, f"desk-scale run took {elapsed:.0f}s"
    report(
        f"PASS desk-scale CV (mean {mean_vox:.3f} vox / {mean_mm:.3f} mm, "
        f"{elapsed:.0f}s)"
    )


def test_criterion_flip_equivariance(desk_scale_run):
    from earmark.report import score_case
    from earmark.synthdata import SynthCase, load_dataset
    from earmark.training import preprocess_case

    root, _ = desk_scale_run
    cases = load_dataset(root / "ds")
    params, _ = load_checkpoint(root / "run" / "fold_0.ckpt")
    checked = 0
    for left in (c for c in cases if c.volume.laterality == "Left"):
        fv, flm = flip_to_right(left.volume, left.landmarks)
        twin = SynthCase(volume=fv, landmarks=flm, patient_id=left.patient_id)
        mm_l, _ = score_case(params, preprocess_case(left, dtype=np.float64))
        mm_t, _ = score_case(params, preprocess_case(twin, dtype=np.float64))
        for name in LANDMARK_NAMES:
            assert abs(mm_l[name] - mm_t[name]) < 1e-9
        checked += 1
        if checked == 5:
            break
    assert checked == 5
    report("PASS flip equivariance (5 left cases, mm errors equal within 1e-9)")


# ---------------------------------------------------------------------------
# Criterion 5: DLT exactness + degeneracy detection
# ---------------------------------------------------------------------------

def test_criterion_dlt_exactness():
    rng = np.random.default_rng(500)
    worst = 0.0
    for _ in range(100):
        P = random_camera(rng)
        corrs = synthetic_corrs(rng, P, n=6)
        _, residuals = dlt_resect(corrs)
        worst = max(worst, max(residuals))
    assert worst < 1e-6, worst

    degenerate = 0
    for _ in range(20):
        P = random_camera(rng)
        pts = rng.uniform(-20, 20, (6, 3))
        pts[:, 2] = 5.0
        corrs = []
        for i, X in enumerate(pts):
            h = P @ np.append(X, 1.0)
            corrs.append(Correspondence(f"p{i}", tuple(X), h[0] / h[2], h[1] / h[2]))
        try:
            dlt_resect(corrs)
        except DegeneracyError:
            degenerate += 1
    assert degenerate == 20
    report(f"PASS DLT exactness (100 cameras, worst residual {worst:.2e} px; "
           f"20/20 coplanar sets rejected)")


# ---------------------------------------------------------------------------
# Criterion 6: RANSAC robustness, 200 trials with 30 % outliers
# ---------------------------------------------------------------------------

def test_criterion_ransac_robustness():
    rng = np.random.default_rng(600)
    successes = 0
    trials = 200
    for trial in range(trials):
        H_true = np.array([
            [1.0 + rng.uniform(-0.08, 0.08), rng.uniform(-0.04, 0.04), rng.uniform(-15, 15)],
            [rng.uniform(-0.04, 0.04), 1.0 + rng.uniform(-0.08, 0.08), rng.uniform(-15, 15)],
            [rng.uniform(-2e-5, 2e-5), rng.uniform(-2e-5, 2e-5), 1.0],
        ])
        n_in, n_out = 42, 18
        src_in = rng.uniform(20, 230, (n_in, 2))
        dst_in = np.array([apply_homography(H_true, p) for p in src_in])
        src_out = rng.uniform(20, 230, (n_out, 2))
        dst_out = []
        for p in src_out:
            while True:
                q = rng.uniform(0, 250, 2)
                if np.linalg.norm(q - apply_homography(H_true, p)) > 5.0:
                    dst_out.append(q)
                    break
        src = np.vstack([src_in, src_out])
        dst = np.vstack([dst_in, np.array(dst_out)])
        try:
            H, mask = ransac_homography(src, dst, threshold_px=2.0,
                                        confidence=0.995, max_iters=1000,
                                        seed=trial)
        except Exception:
            continue
        if mask[n_in:].any():
            continue
        errs = [np.linalg.norm(np.array(apply_homography(H, p)) - d)
                for p, d in zip(src_in, dst_in)]
        if max(errs) < 0.5:
            successes += 1
    assert successes >= 0.99 * trials, f"{successes}/{trials}"
    report(f"PASS RANSAC robustness ({successes}/{trials} trials clean)")


# ---------------------------------------------------------------------------
# Criterion 7: tracking persistence over the 120-frame scenario
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tracked_scenario(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenario")
    case = synth_generate(SynthConfig(n_cases=1, seed=3))[0]
    sp = case.volume.spacing
    lm_mm = {n: tuple(c * s for c, s in zip(xyz, sp))
             for n, xyz in case.landmarks.coords.items()}
    scenario = generate_scenario(42, lm_mm, ScenarioParams(frame_count=120))
    save_scenario(scenario, root)
    save_volume(root / "case", case.volume, case.landmarks)
    return root, case, scenario


def test_criterion_tracking_persistence(tracked_scenario):
    root, case, scenario = tracked_scenario
    frames = [Frame.from_uint8(f, index=i) for i, f in enumerate(scenario.frames)]
    state = TrackState.identity()
    for i in range(1, len(frames)):
        state = advance(state, frames[i - 1], frames[i])
        assert state.status == "Tracking", f"lost at frame {i}"
    G = scenario.homographies[-1]
    apex = project_point(scenario.camera, scenario.landmarks_mm["COCHLEA_APEX"])
    base = project_point(scenario.camera, scenario.landmarks_mm["COCHLEA_BASE"])
    drifts = []
    for p in (apex, base):
        est = apply_homography(state.H, p)
        true = apply_homography(G, p)
        drifts.append(float(np.hypot(est[0] - true[0], est[1] - true[1])))
    assert max(drifts) < 2.0, drifts
    report(f"PASS tracking persistence (120 frames, axis drift "
           f"{max(drifts):.3f} px)")


def test_criterion_tracking_goldens_bitwise(tracked_scenario, tmp_path):
    from earmark.cli import main

    root, _case, _scenario = tracked_scenario
    picks = tmp_path / "picks.txt"
    gt = json.loads((root / "ground_truth.json").read_text())
    picks.write_text("\n".join(
        f"{n} {u!r} {v!r}" for n, (u, v) in gt["pick_pixels"].items()
    ))
    assert main(["register", "--picks", str(picks), "--case", str(root / "case"),
                 "--out", str(tmp_path / "camera.txt")]) == 0
    digests = []
    for attempt in ("a", "b"):
        out = tmp_path / f"run_{attempt}"
        assert main(["track", "--frames", str(root / "frames"),
                     "--camera", str(tmp_path / "camera.txt"),
                     "--case", str(root / "case"), "--out", str(out)]) == 0
        import hashlib

        h = hashlib.sha256()
        for ppm in sorted(out.glob("overlay_*.ppm")):
            h.update(ppm.read_bytes())
        digests.append(h.hexdigest())
    assert digests[0] == digests[1]
    report(f"PASS overlay goldens bitwise stable (sha256 {digests[0][:12]}...)")


# ---------------------------------------------------------------------------
# Criterion 8: parser fixpoint, malformed corpus, default shape table
# ---------------------------------------------------------------------------

def test_criterion_parser():
    # 1000 random valid specs: parse(serialize(.)) is the identity
    from test_netspec import network_specs

    from hypothesis import given, settings, HealthCheck

    count = 0

    @settings(max_examples=1000, deadline=None,
              suppress_health_check=list(HealthCheck))
    @given(network_specs())
    def fixpoint(spec):
        nonlocal count
        text = serialize(spec)
        assert parse_netspec(text) == spec
        count += 1

    fixpoint()
    assert count >= 1000

    malformed = [
        "", "C(f=4) O(21)", "I(8,8,8,1)", "I(8,8,8,1) I(4,4,4,1) O(3)",
        "I(8,8,8,1) Q(3) O(3)", "I(8,8,8,1) C(f=4,z=2) O(3)",
        "I(8,8,8,1) C(k=3) O(3)", "I(8,8,8,1) C(f=4,f=5) O(3)",
        "I(8,8,8,1) C(f=x) O(3)", "I(8,8,8,1) C(f=-2) O(3)",
        "I(8,8,8,1) C(f=4,p=mirror) O(3)", "I(8,8,8,1) D(1.5) O(3)",
        "I(8,8,8,1) D(0.2) O(21) FC(5)", "I(8,8,8,1) O(3) O(3)",
        "I(8,8,8,1) SE(r=4) O(3)", "I(8,8,8,2) C(f=3) SE(r=2) O(3)",
        "I(8,8,8,1) FC(4) C(f=2) O(3)", "I(4,4,4,1) C(f=2,k=5,p=valid) O(3)",
        "I(4,4,4,1) P(8) O(3)", "I(8,8,8,1) %%% O(3)",
    ]
    assert len(malformed) == 20
    for text in malformed:
        with pytest.raises(NetspecError) as exc:
            parse_netspec(text)
        lines = text.split("\n") if text else [""]
        assert 1 <= exc.value.line <= len(lines)
        assert exc.value.col >= 1

    # hand-derived shape table for the canonical input
    spec = default_netspec((200, 200, 100, 1))
    rows = infer_shapes(spec)
    assert rows[-4] == ("P", (12, 12, 6, 64))
    assert rows[-3] == ("FC", (256,))
    assert rows[-1] == ("O", (21,))
    assert "12x12x6x64" in format_shape_table(spec)
    report("PASS parser (1000 fixpoints, 20 malformed diagnostics, shape table)")


# ---------------------------------------------------------------------------
# Criterion 9: MSLE / Adam unit fixtures
# ---------------------------------------------------------------------------

def test_criterion_msle_adam_fixtures():
    loss, _ = layers.msle_loss(np.array([[np.e - 1.0]]), np.array([[0.0]]))
    assert abs(loss - 1.0) < 1e-12

    params = {"t": np.array([0.0])}
    state = AdamState.fresh(params, alpha=0.0005)
    new_params, _ = adam_step(params, {"t": np.array([1.0])}, state)
    expected = -0.0005 * (1.0 / (1.0 + 1e-8))
    assert abs(new_params["t"][0] - expected) < 1e-15
    report("PASS MSLE/Adam unit fixtures (1e-12 / 1e-15)")


# ---------------------------------------------------------------------------
# Criterion 10: formats round-trip bitwise
# ---------------------------------------------------------------------------

def test_criterion_formats(tmp_path):
    from earmark.imgio import decode_ppm, encode_ppm

    rng = np.random.default_rng(1000)
    data = rng.integers(-1000, 3000, size=(9, 7, 5), dtype=np.int16)
    v = Volume(data=data, spacing=(0.156, 0.156, 0.1), laterality="Left", id="fmt")
    lm = LandmarkSet({n: (1.0 + i, 2.0, 3.0) for i, n in enumerate(LANDMARK_NAMES)})
    save_volume(tmp_path / "fmt", v, lm)
    v2, lm2 = load_volume(tmp_path / "fmt")
    save_volume(tmp_path / "fmt2", v2, lm2)
    assert (tmp_path / "fmt.raw").read_bytes() == (tmp_path / "fmt2.raw").read_bytes()
    assert (tmp_path / "fmt.json").read_bytes() == (tmp_path / "fmt2.json").read_bytes()

    img = rng.integers(0, 256, (11, 13, 3), dtype=np.uint8)
    assert np.array_equal(decode_ppm(encode_ppm(img)), img)
    fixture = encode_ppm(np.zeros((1, 1, 3), dtype=np.uint8))
    assert fixture == b"P6\n1 1\n255\n\x00\x00\x00"
    report("PASS formats (volume + PPM bitwise, 1x1 PPM fixture byte-exact)")


# ---------------------------------------------------------------------------
# Criterion 11: service flow over HTTP
# ---------------------------------------------------------------------------

def test_criterion_service_flow(tracked_scenario):
    from fastapi.testclient import TestClient

    from earmark.service import create_app

    root, case, scenario = tracked_scenario
    # service data layout: cases/ + sequences/
    data_root = root / "service_root"
    (data_root / "cases").mkdir(parents=True, exist_ok=True)
    save_volume(data_root / "cases" / case.case_id, case.volume, case.landmarks)
    seq = data_root / "sequences" / "scn"
    seq.mkdir(parents=True, exist_ok=True)
    import shutil

    if not (seq / "frames").exists():
        shutil.copytree(root / "frames", seq / "frames")

    client = TestClient(create_app(data_root))
    sid = client.post(
        "/sessions", json={"case": case.case_id, "frames": "scn"}
    ).json()["id"]

    r = client.put(f"/sessions/{sid}/picks/COCHLEA_BASE", json={"u": 10, "v": 10})
    assert r.status_code == 400
    assert r.json()["error"]["code"] == "reserved_test_landmark"

    for name, (u, v) in scenario.pick_pixels.items():
        assert client.put(
            f"/sessions/{sid}/picks/{name}", json={"u": u, "v": v}
        ).status_code == 200
    body = client.post(f"/sessions/{sid}/register").json()
    assert body["rms_px"] < 1e-6
    assert all(v < 1e-6 for v in body["residuals_px"].values())

    a = client.get(f"/sessions/{sid}/frames/4/overlay")
    b = client.get(f"/sessions/{sid}/frames/4/overlay")
    assert a.status_code == 200
    assert a.content == b.content
    assert a.headers["X-Track-Status"] == "Tracking"
    report(f"PASS service flow (rms {body['rms_px']:.2e} px, overlay fetches "
           f"byte-identical)")
