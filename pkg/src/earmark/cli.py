"""Command-line entry point exposing the whole pipeline.

Subcommands: synth, train, eval, predict, register, track, serve,
netspec-check.  Every run that writes outputs drops a ``manifest.json``
(resolved flags, seed, version) into its output directory before any work
starts; re-running with ``--from-manifest manifest.json`` reproduces the
outputs bitwise in single-threaded mode.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical/degeneracy
error.  Failures print one machine-parsable line to stderr:
``ERROR[<category>] <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"ERROR[usage] usage: {message}", file=sys.stderr)
        raise SystemExit(1)


def _triple(text, cast):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got '{text}'")
    return tuple(cast(p) for p in parts)


def build_parser() -> _Parser:
    p = _Parser(
        prog="earmark",
        description="Ear-CT landmark regression and AR overlay toolkit",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        allow_abbrev=False,
    )
    p.add_argument("--version", action="version", version=f"earmark {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(
            name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads (1 = deterministic)")
        sp.add_argument("--from-manifest", type=Path, default=None,
                        help="re-run with the flags recorded in a manifest.json")
        return sp

    sp = add("synth", "generate a synthetic ear-CT dataset")
    sp.add_argument("--out", type=Path, required=True, help="output dataset directory")
    sp.add_argument("--cases", type=int, default=40, help="number of ears")
    sp.add_argument("--dims", type=lambda s: _triple(s, int), default=(32, 32, 16),
                    help="volume dims W,H,D")
    sp.add_argument("--spacing", type=lambda s: _triple(s, float), default=(0.3, 0.3, 0.6),
                    help="voxel spacing mm sx,sy,sz")
    sp.add_argument("--left-fraction", type=float, default=0.575,
                    help="fraction of left ears")
    sp.add_argument("--seed", type=int, default=0, help="generator seed")

    sp = add("train", "run k-fold cross-validation training")
    sp.add_argument("--data", type=Path, required=True, help="dataset directory (from synth)")
    sp.add_argument("--out", type=Path, required=True, help="run output directory")
    sp.add_argument("--config", type=Path, default=None,
                    help="JSON file of flag values; explicit flags override it")
    sp.add_argument("--epochs", type=int, default=3500, help="training epochs")
    sp.add_argument("--batch-size", type=int, default=5, help="cases per step")
    sp.add_argument("--lr", type=float, default=0.0005, help="Adam learning rate")
    sp.add_argument("--dropout", type=float, default=0.2,
                    help="dropout rate in the default architecture")
    sp.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    sp.add_argument("--netspec", type=str, default=None,
                    help="architecture text (default: reference net for the dims)")
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                    help="training precision")
    sp.add_argument("--seed", type=int, default=0, help="global seed")

    sp = add("eval", "evaluate fold checkpoints on their held-out cases")
    sp.add_argument("--data", type=Path, required=True, help="dataset directory")
    sp.add_argument("--run", type=Path, required=True, help="training run directory")
    sp.add_argument("--out", type=Path, default=None,
                    help="report directory (default: the run directory)")

    sp = add("predict", "run one checkpoint on one case")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--case", type=Path, required=True, help="case file stem")
    sp.add_argument("--annotations", type=Path, default=None,
                    help="standalone landmark file (JSON keyed by case id); "
                         "adds per-landmark mm errors against it")

    sp = add("register", "estimate the camera from a correspondence file")
    sp.add_argument("--picks", type=Path, required=True,
                    help="text file: NAME x_mm y_mm z_mm u v (or NAME u v with --case)")
    sp.add_argument("--case", type=Path, default=None,
                    help="case stem supplying 3-D landmark positions")
    sp.add_argument("--out", type=Path, default=None, help="write camera file here")

    sp = add("track", "track a frame sequence and write overlay frames")
    sp.add_argument("--config", type=Path, default=None,
                    help="JSON file of flag values; explicit flags override it")
    sp.add_argument("--frames", type=Path, required=True,
                    help="frame directory or .emsq stream file")
    sp.add_argument("--camera", type=Path, required=True, help="camera file (12 numbers)")
    sp.add_argument("--case", type=Path, required=True, help="case stem (landmarks)")
    sp.add_argument("--out", type=Path, required=True, help="overlay output directory")
    sp.add_argument("--ransac-threshold", type=float, default=2.0,
                    help="inlier threshold px")
    sp.add_argument("--ransac-confidence", type=float, default=0.995,
                    help="RANSAC confidence")
    sp.add_argument("--ransac-max-iters", type=int, default=1000,
                    help="RANSAC iteration cap")
    sp.add_argument("--seed", type=int, default=0, help="RANSAC seed")

    sp = add("serve", "start the interactive registration/overlay service")
    sp.add_argument("--data-root", type=Path,
                    default=os.environ.get("EARMARK_DATA_ROOT", "."),
                    help="directory holding cases/ and sequences/")
    sp.add_argument("--host", default=os.environ.get("EARMARK_HOST", "127.0.0.1"))
    sp.add_argument("--port", type=int,
                    default=int(os.environ.get("EARMARK_PORT", "8800")))
    sp.add_argument("--ui-dir", type=Path, default=None,
                    help="built frontend to serve at /")

    sp = add("netspec-check", "parse an architecture and print its shape table")
    sp.add_argument("--spec", type=str, default=None, help="architecture text")
    sp.add_argument("--file", type=Path, default=None, help="file holding the text")

    return p


def _write_manifest(out_dir: Path, args, argv):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "from_manifest"
    }
    manifest = {
        "tool": "earmark",
        "version": __version__,
        "command": args.command,
        "argv": [str(a) for a in argv],
        "resolved": resolved,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommand bodies (heavy imports stay inside so --threads applies first)
# ---------------------------------------------------------------------------

def cmd_synth(args, argv):
    from .synthdata import SynthConfig, save_dataset, synth_generate

    _write_manifest(args.out, args, argv)
    cfg = SynthConfig(
        n_cases=args.cases, dims=tuple(args.dims), spacing=tuple(args.spacing),
        left_fraction=args.left_fraction, seed=args.seed,
    )
    cases = synth_generate(cfg)
    save_dataset(
        cases, args.out,
        extra_meta={"seed": args.seed, "dims": list(args.dims),
                    "spacing": list(args.spacing)},
    )
    lefts = sum(1 for c in cases if c.volume.laterality == "Left")
    print(f"wrote {len(cases)} cases ({lefts} left, {len(cases) - lefts} right) "
          f"to {args.out}")
    return 0


def cmd_train(args, argv):
    from .netspec import serialize
    from .synthdata import load_dataset
    from .training import TrainConfig, make_folds, train_cv
    from .model import save_checkpoint

    _write_manifest(args.out, args, argv)
    cases = load_dataset(args.data)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
        dropout=args.dropout, seed=args.seed, netspec_text=args.netspec,
        dtype=args.dtype, k_folds=args.folds,
    )
    plan = make_folds(cases, k=cfg.k_folds, seed=cfg.seed)
    (args.out / "foldplan.json").write_text(json.dumps(plan.to_json(), indent=2))
    spec = cfg.resolve_spec(cases[0].volume.dims)
    (args.out / "config.json").write_text(json.dumps(
        {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
         "learning_rate": cfg.learning_rate, "dropout": cfg.dropout,
         "seed": cfg.seed, "dtype": cfg.dtype, "k_folds": cfg.k_folds,
         "netspec": serialize(spec)}, indent=2, sort_keys=True))
    results = train_cv(cases, plan, cfg, log=lambda m: print(m, flush=True),
                       workers=max(1, args.threads))
    for f, fold in results.items():
        save_checkpoint(args.out / f"fold_{f}.ckpt", fold.params.astype("float64"),
                        fold.adam)
        with open(args.out / f"loss_fold_{f}.log", "w") as fh:
            for epoch, loss in enumerate(fold.losses):
                fh.write(f"{epoch} {loss:.9g}\n")
    print(f"wrote {len(results)} fold checkpoints to {args.out}")
    return 0


def cmd_eval(args, argv):
    from .model import load_checkpoint
    from .report import evaluate_cv
    from .synthdata import load_dataset
    from .training import FoldPlan, FoldResult, preprocess_case
    from .errors import DataError

    out_dir = args.out or args.run
    cases = load_dataset(args.data)
    plan = FoldPlan.from_json(json.loads((args.run / "foldplan.json").read_text()))
    if args.out is not None:  # keep the training run's own manifest intact
        _write_manifest(out_dir, args, argv)
    prepared = {c.case_id: preprocess_case(c) for c in cases}
    results = {}
    for f in range(plan.k):
        ckpt = args.run / f"fold_{f}.ckpt"
        if not ckpt.exists():
            raise DataError(f"missing checkpoint for fold {f}: {ckpt}")
        params, _ = load_checkpoint(ckpt)
        results[f] = FoldResult(
            params=params, losses=[],
            test_cases=[prepared[cid] for cid in plan.cases_in_fold(f)],
        )
    report = evaluate_cv(results, plan)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.render_text() + "\n")
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    print(report.render_text())
    return 0


def cmd_predict(args, argv):
    import numpy as np

    from . import LANDMARK_NAMES
    from .errors import DataError
    from .model import load_checkpoint, predict
    from .synthdata import SynthCase
    from .training import predictions_to_native, preprocess_case
    from .volume import load_annotations, load_volume, physical_distance_mm

    params, _ = load_checkpoint(args.checkpoint)
    volume, landmarks = load_volume(args.case)
    prep = preprocess_case(
        SynthCase(volume=volume, landmarks=landmarks, patient_id="?"),
        dtype=np.float64,
    )
    pred = predict(params, prep.x[None].astype(np.float64))
    native = predictions_to_native(pred[0], prep)
    doc = {
        "case": volume.id,
        "landmarks": {n: [float(c) for c in native[i]]
                      for i, n in enumerate(LANDMARK_NAMES)},
    }
    if args.annotations is not None:
        table = load_annotations(args.annotations)
        if volume.id not in table:
            raise DataError(f"{args.annotations} has no entry for case '{volume.id}'")
        reference = table[volume.id]
        doc["error_mm"] = {
            n: physical_distance_mm(native[i], reference[n], volume.spacing)
            for i, n in enumerate(LANDMARK_NAMES)
        }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def _read_picks(path, case_path):
    from .errors import DataError
    from .registration import Correspondence
    from .volume import load_volume

    landmarks_mm = None
    if case_path is not None:
        volume, landmarks = load_volume(case_path)
        sp = volume.spacing
        landmarks_mm = {
            n: tuple(c * s for c, s in zip(xyz, sp))
            for n, xyz in landmarks.coords.items()
        }
    corrs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 6:
            name, x, y, z, u, v = parts
            X = (float(x), float(y), float(z))
        elif len(parts) == 3:
            name, u, v = parts
            if landmarks_mm is None:
                raise DataError(
                    f"{path}:{lineno}: 'NAME u v' form needs --case for 3-D positions"
                )
            if name not in landmarks_mm:
                raise DataError(f"{path}:{lineno}: unknown landmark '{name}'")
            X = landmarks_mm[name]
        else:
            raise DataError(
                f"{path}:{lineno}: expected 'NAME x y z u v' or 'NAME u v'"
            )
        corrs.append(Correspondence(name=name, X=X, u=float(u), v=float(v)))
    return corrs


def cmd_register(args, argv):
    import numpy as np

    from .registration import dlt_resect

    corrs = _read_picks(args.picks, args.case)
    camera, residuals = dlt_resect(corrs)
    lines = [" ".join(repr(x) for x in camera.flat()[i : i + 4]) for i in (0, 4, 8)]
    camera_text = "\n".join(lines) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(camera_text)
    print("camera:")
    print(camera_text, end="")
    rms = float(np.sqrt(np.mean(np.square(residuals))))
    for c, r in zip(corrs, residuals):
        print(f"residual {c.name}: {r:.9g} px")
    print(f"rms: {rms:.9g} px")
    return 0


def cmd_track(args, argv):
    import numpy as np

    from . import REGISTRATION_LANDMARKS
    from .imgio import encode_ppm, read_frame_dir, read_frame_stream
    from .overlay import OverlaySpec, render_overlay
    from .registration import CameraMatrix, clip_segment, project_point
    from .tracking import (
        STATUS_TRACKING,
        Frame,
        TrackerConfig,
        TrackState,
        advance,
        apply_homography,
    )
    from .volume import load_volume

    _write_manifest(args.out, args, argv)
    numbers = [float(t) for t in args.camera.read_text().split()]
    camera = CameraMatrix.from_flat(numbers)
    volume, landmarks = load_volume(args.case)
    sp = volume.spacing
    lm_mm = {
        n: tuple(c * s for c, s in zip(xyz, sp))
        for n, xyz in landmarks.coords.items()
    }
    frames = (read_frame_stream(args.frames) if args.frames.is_file()
              else read_frame_dir(args.frames))
    h, w = frames.shape[1:3]
    config = TrackerConfig(
        threshold_px=args.ransac_threshold, confidence=args.ransac_confidence,
        max_iters=args.ransac_max_iters, seed=args.seed,
    )
    apex = project_point(camera, lm_mm["COCHLEA_APEX"])
    base = project_point(camera, lm_mm["COCHLEA_BASE"])
    dots0 = [project_point(camera, lm_mm[n]) for n in REGISTRATION_LANDMARKS]

    state = TrackState.identity()
    log_lines = []
    for i in range(len(frames)):
        if i > 0 and state.status == STATUS_TRACKING:
            state = advance(
                state,
                Frame.from_uint8(frames[i - 1], index=i - 1),
                Frame.from_uint8(frames[i], index=i),
                config,
            )
        H = state.H
        segment = clip_segment(
            apply_homography(H, apex), apply_homography(H, base), w, h
        )
        dots = [apply_homography(H, d) for d in dots0]
        img = render_overlay(frames[i], segment=segment, dots=dots, spec=OverlaySpec())
        (args.out / f"overlay_{i:06d}.ppm").write_bytes(encode_ppm(img))
        log_lines.append(f"{i} {state.status} {state.inliers}")
    (args.out / "track.log").write_text("\n".join(log_lines) + "\n")
    print(f"wrote {len(frames)} overlay frames to {args.out} "
          f"(final status {state.status})")
    return 0


def cmd_serve(args, argv):
    from .service import run_server

    run_server(args.data_root, host=args.host, port=args.port, ui_dir=args.ui_dir)
    return 0


def cmd_netspec_check(args, argv):
    from .errors import DataError
    from .netspec import format_shape_table, parse_netspec, serialize

    if (args.spec is None) == (args.file is None):
        raise DataError("give exactly one of --spec or --file")
    text = args.spec if args.spec is not None else args.file.read_text()
    spec = parse_netspec(text)
    print(format_shape_table(spec))
    print(f"canonical: {serialize(spec)}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "register": cmd_register,
    "track": cmd_track,
    "serve": cmd_serve,
    "netspec-check": cmd_netspec_check,
}

_CATEGORY = {1: "usage", 2: "data", 3: "numeric"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.from_manifest is not None:
        recorded = json.loads(Path(args.from_manifest).read_text())
        argv = [str(a) for a in recorded["argv"]]
        args = parser.parse_args(argv)

    if getattr(args, "config", None) is not None:
        config = json.loads(Path(args.config).read_text())
        valid = set(vars(args))
        for key, value in config.items():
            dest = key.replace("-", "_")
            if dest not in valid:
                print(f"ERROR[usage] usage: unknown config key '{key}'", file=sys.stderr)
                return 1
            if f"--{dest.replace('_', '-')}" not in argv:  # flags win
                setattr(args, dest, value)

    threads = str(max(1, args.threads))
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)

    from .errors import EarmarkError

    try:
        return COMMANDS[args.command](args, argv)
    except EarmarkError as e:
        category = _CATEGORY.get(e.exit_code, "data")
        print(f"ERROR[{category}] {e.code}: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"ERROR[data] file_not_found: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
