"""Session-oriented HTTP/JSON API for interactive registration and playback.

Endpoints (all JSON unless an image type is stated):

* ``POST /sessions``                     body {"case": id, "frames": path}
* ``GET /sessions/{sid}``                full session state
* ``PUT /sessions/{sid}/picks/{name}``   body {"u": px, "v": px}
* ``DELETE /sessions/{sid}/picks/{name}``
* ``POST /sessions/{sid}/register``
* ``GET /sessions/{sid}/frames/{n}/raw``     image bytes (?format=ppm|png)
* ``GET /sessions/{sid}/frames/{n}/overlay`` image bytes + X-Track-Status,
  X-Inlier-Count, X-Revision headers

Errors come back as ``{"error": {"code": ..., "message": ...}}``.  Geometry
numbers serialize through Python float repr: the shortest decimal that
round-trips the exact double (never more than 17 significant digits).

Sessions are independent; within one session mutations are serialized by a
lock and tracking advances lazily with frame requests, checkpointing every
30 frames so seeking backwards replays from the nearest checkpoint instead
of from zero.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from . import REGISTRATION_LANDMARKS
from .errors import DegeneracyError, EarmarkError
from .imgio import encode_image, read_frame_dir, read_frame_stream
from .overlay import OverlaySpec, render_overlay
from .registration import (
    CameraMatrix,
    Correspondence,
    clip_segment,
    dlt_resect,
    project_point,
)
from .tracking import (
    STATUS_TRACKING,
    Frame,
    TrackerConfig,
    TrackState,
    advance,
    apply_homography,
)
from .volume import load_volume

CHECKPOINT_EVERY = 30

MEDIA_TYPES = {"ppm": "image/x-portable-pixmap", "png": "image/png"}


class ServiceError(EarmarkError):
    def __init__(self, code, message, status=400):
        self.code = code
        self.status = status
        super().__init__(message)


@dataclass
class Session:
    id: str
    case_id: str
    landmarks_mm: dict[str, tuple[float, float, float]]
    frames: np.ndarray  # (T, H, W) uint8
    picks: dict[str, tuple[float, float]] = field(default_factory=dict)
    camera: CameraMatrix | None = None
    residuals: dict[str, float] | None = None
    track: TrackState | None = None
    track_index: int = 0
    checkpoints: dict[int, TrackState] = field(default_factory=dict)
    revision: int = 0
    lock: threading.RLock = field(default_factory=threading.RLock)

    @property
    def frame_count(self):
        return len(self.frames)

    @property
    def frame_size(self):
        return (int(self.frames.shape[2]), int(self.frames.shape[1]))  # (w, h)


def _load_case_landmarks_mm(case_path):
    volume, landmarks = load_volume(case_path)
    sp = volume.spacing
    return {
        n: tuple(c * s for c, s in zip(xyz, sp))
        for n, xyz in landmarks.coords.items()
    }


def _load_frames(root: Path, name: str) -> np.ndarray:
    for candidate in (root / name, root / name / "frames", root / "sequences" / name,
                      root / "sequences" / name / "frames"):
        if candidate.is_dir() and any(candidate.glob("frame_*.pgm")):
            return read_frame_dir(candidate)
        if candidate.is_file() and candidate.suffix == ".emsq":
            return read_frame_stream(candidate)
    raise ServiceError("frames_not_found", f"no frame sequence named '{name}'", 404)


def _find_case(root: Path, case_id: str) -> Path:
    for candidate in (root / case_id, root / "cases" / case_id):
        if candidate.with_suffix(".json").exists():
            return candidate
    raise ServiceError("case_not_found", f"no case named '{case_id}'", 404)


def create_app(data_root, tracker_config: TrackerConfig = TrackerConfig()) -> FastAPI:
    data_root = Path(data_root)
    app = FastAPI(title="earmark service")
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()

    @app.exception_handler(ServiceError)
    def _service_error(_request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(EarmarkError)
    def _earmark_error(_request: Request, exc: EarmarkError):
        status = 422 if exc.exit_code == 3 else 400
        return JSONResponse(
            status_code=status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    def get_session(sid) -> Session:
        with sessions_lock:
            s = sessions.get(sid)
        if s is None:
            raise ServiceError("session_not_found", f"no session '{sid}'", 404)
        return s

    @app.post("/sessions")
    def create_session(body: dict):
        case_id = body.get("case")
        frames_name = body.get("frames")
        if not case_id or not frames_name:
            raise ServiceError("bad_request", "body needs 'case' and 'frames'")
        try:
            case_path = _find_case(data_root, str(case_id))
            landmarks_mm = _load_case_landmarks_mm(case_path)
        except ServiceError:
            raise
        except EarmarkError as e:
            raise ServiceError("case_unreadable", str(e), 400)
        frames = _load_frames(data_root, str(frames_name))
        session = Session(
            id=uuid.uuid4().hex,
            case_id=str(case_id),
            landmarks_mm=landmarks_mm,
            frames=frames,
        )
        with sessions_lock:
            sessions[session.id] = session
        return {
            "id": session.id,
            "frame_count": session.frame_count,
            "frame_size": list(session.frame_size),
            "revision": session.revision,
        }

    @app.get("/sessions/{sid}")
    def get_state(sid: str):
        s = get_session(sid)
        with s.lock:
            return {
                "id": s.id,
                "case": s.case_id,
                "frame_count": s.frame_count,
                "frame_size": list(s.frame_size),
                "pickable": list(REGISTRATION_LANDMARKS),
                "picks": {n: list(uv) for n, uv in sorted(s.picks.items())},
                "registered": s.camera is not None,
                "camera": s.camera.flat() if s.camera else None,
                "residuals_px": s.residuals,
                "track_status": s.track.status if s.track else None,
                "revision": s.revision,
            }

    @app.put("/sessions/{sid}/picks/{name}")
    def put_pick(sid: str, name: str, body: dict):
        s = get_session(sid)
        if name == "COCHLEA_BASE":
            raise ServiceError(
                "reserved_test_landmark",
                "COCHLEA_BASE is held out for accuracy testing and cannot be picked",
            )
        if name not in REGISTRATION_LANDMARKS:
            raise ServiceError("unknown_landmark", f"unknown landmark '{name}'", 404)
        try:
            u = float(body["u"])
            v = float(body["v"])
        except (KeyError, TypeError, ValueError):
            raise ServiceError("bad_request", "body needs numeric 'u' and 'v'")
        w, h = None, None
        with s.lock:
            w, h = s.frame_size
            if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
                raise ServiceError(
                    "pick_out_of_bounds",
                    f"({u}, {v}) outside frame {w}x{h}",
                )
            s.picks[name] = (u, v)
            s.revision += 1
            return {"count": len(s.picks), "revision": s.revision}

    @app.delete("/sessions/{sid}/picks/{name}")
    def delete_pick(sid: str, name: str):
        s = get_session(sid)
        with s.lock:
            if name not in s.picks:
                raise ServiceError("pick_not_found", f"no pick for '{name}'", 404)
            del s.picks[name]
            if len(s.picks) < 6 and s.camera is not None:
                # a camera only exists while six picks back it
                s.camera = None
                s.residuals = None
                s.track = None
                s.checkpoints = {}
            s.revision += 1
            return {"count": len(s.picks), "revision": s.revision}

    @app.post("/sessions/{sid}/register")
    def register(sid: str):
        s = get_session(sid)
        with s.lock:
            if len(s.picks) < 6:
                raise ServiceError(
                    "insufficient_picks",
                    f"registration needs 6 picks, got {len(s.picks)}",
                )
            corrs = [
                Correspondence(name=n, X=s.landmarks_mm[n], u=uv[0], v=uv[1])
                for n, uv in sorted(s.picks.items())
            ]
            camera, residuals = dlt_resect(corrs)  # DegeneracyError surfaces verbatim
            s.camera = camera
            s.residuals = {c.name: r for c, r in zip(corrs, residuals)}
            s.track = TrackState.identity()
            s.track_index = 0
            s.checkpoints = {0: s.track}
            s.revision += 1
            rms = float(np.sqrt(np.mean(np.square(residuals))))
            return {
                "camera": camera.flat(),
                "residuals_px": s.residuals,
                "rms_px": rms,
                "revision": s.revision,
            }

    def _advance_to(s: Session, n: int):
        """Bring the track state to frame n, checkpointing along the way."""
        if n < s.track_index or s.track is None:
            # replay from the nearest prior checkpoint
            base = max(i for i in s.checkpoints if i <= n)
            state = s.checkpoints[base]
            idx = base
        else:
            state, idx = s.track, s.track_index
        while idx < n:
            if state.status == STATUS_TRACKING:
                prev = Frame.from_uint8(s.frames[idx], index=idx)
                nxt = Frame.from_uint8(s.frames[idx + 1], index=idx + 1)
                state = advance(state, prev, nxt, tracker_config)
            idx += 1
            if idx % CHECKPOINT_EVERY == 0 and idx not in s.checkpoints:
                s.checkpoints[idx] = state
        s.track, s.track_index = state, n
        return state

    def _image_response(img, fmt, headers=None):
        if fmt not in MEDIA_TYPES:
            raise ServiceError("bad_format", f"format must be one of {list(MEDIA_TYPES)}")
        return Response(
            content=encode_image(img, fmt),
            media_type=MEDIA_TYPES[fmt],
            headers=headers or {},
        )

    @app.get("/sessions/{sid}/frames/{n}/raw")
    def raw_frame(sid: str, n: int, format: str = "ppm"):
        s = get_session(sid)
        with s.lock:
            if not (0 <= n < s.frame_count):
                raise ServiceError(
                    "frame_out_of_range", f"frame {n} not in [0, {s.frame_count})", 404
                )
            img = np.repeat(s.frames[n][:, :, None], 3, axis=2)
            return _image_response(img, format, {"X-Revision": str(s.revision)})

    @app.get("/sessions/{sid}/frames/{n}/overlay")
    def overlay_frame(sid: str, n: int, format: str = "ppm"):
        s = get_session(sid)
        with s.lock:
            if s.camera is None:
                raise ServiceError("unregistered", "register the session first")
            if not (0 <= n < s.frame_count):
                raise ServiceError(
                    "frame_out_of_range", f"frame {n} not in [0, {s.frame_count})", 404
                )
            state = _advance_to(s, n)
            H = state.H
            w, h = s.frame_size
            apex = project_point(s.camera, s.landmarks_mm["COCHLEA_APEX"])
            base = project_point(s.camera, s.landmarks_mm["COCHLEA_BASE"])
            segment = clip_segment(
                apply_homography(H, apex), apply_homography(H, base), w, h
            )
            dots = [
                apply_homography(H, project_point(s.camera, s.landmarks_mm[nm]))
                for nm in REGISTRATION_LANDMARKS
            ]
            img = render_overlay(s.frames[n], segment=segment, dots=dots,
                                 spec=OverlaySpec())
            headers = {
                "X-Track-Status": state.status,
                "X-Inlier-Count": str(state.inliers),
                "X-Revision": str(s.revision),
            }
            return _image_response(img, format, headers)

    return app


def run_server(data_root, host="127.0.0.1", port=8800,
               tracker_config: TrackerConfig = TrackerConfig(), ui_dir=None):
    import uvicorn

    app = create_app(data_root, tracker_config)
    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    uvicorn.run(app, host=host, port=port, log_level="info")
