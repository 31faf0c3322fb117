"""Image and frame-sequence codecs.

Binary PPM (P6) is the required, bit-exact output format; PGM (P5) carries
grayscale frames; PNG (8-bit RGB, zlib, filter 0) is an optional convenience
for browsers.  A frame directory holds ``frame_%06d.pgm``; the alternative
single-stream format is::

    magic  b"EMSQ"
    uint32 LE width, height, frame count
    then count * width * height bytes, uint8 grayscale, row-major per frame
"""

from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ImageFormatError, TruncatedPayloadError

SEQ_MAGIC = b"EMSQ"


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def encode_ppm(image) -> bytes:
    """``image`` is (H, W, 3) uint8; header is exactly b"P6\\n{w} {h}\\n255\\n"."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"PPM wants (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    header = f"P6\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(img).tobytes()


def encode_pgm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError(f"PGM wants (H, W) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(img).tobytes()


def _parse_pnm_header(blob, magic):
    if blob[:2] != magic:
        raise ImageFormatError(f"bad magic {blob[:2]!r}, expected {magic!r}")
    # three whitespace-separated tokens after the magic; '#' comments allowed
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(blob):
            raise TruncatedPayloadError("header ended early", pos)
        ch = blob[pos : pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise TruncatedPayloadError("unterminated comment", pos)
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", blob[pos:])
            if m is None:
                raise ImageFormatError(f"non-numeric header token at byte {pos}")
            tokens.append(int(m.group(0)))
            pos += m.end()
    if not blob[pos : pos + 1].isspace():
        raise ImageFormatError(f"missing whitespace after maxval at byte {pos}")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad dimensions {w}x{h}")
    return w, h, pos


def decode_ppm(blob: bytes):
    w, h, pos = _parse_pnm_header(blob, b"P6")
    need = w * h * 3
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload needs {need} bytes, got {len(payload)}", pos + len(payload)
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def decode_pgm(blob: bytes):
    w, h, pos = _parse_pnm_header(blob, b"P5")
    need = w * h
    payload = blob[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"payload needs {need} bytes, got {len(payload)}", pos + len(payload)
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# PNG (8-bit RGB, no interlace)
# ---------------------------------------------------------------------------

def _png_chunk(tag, payload):
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def encode_png(image) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ImageFormatError(f"PNG wants (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    rows = np.concatenate(
        [np.zeros((h, 1), np.uint8), img.reshape(h, w * 3)], axis=1
    )  # filter byte 0 per row
    idat = zlib.compress(rows.tobytes(), 6)
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", idat)
        + _png_chunk(b"IEND", b"")
    )


def decode_png(blob: bytes):
    """Decodes the subset this module writes (8-bit RGB, filters 0-4)."""
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise ImageFormatError("not a PNG")
    pos = 8
    w = h = None
    idat = b""
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise TruncatedPayloadError("chunk header ended early", pos)
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) < length:
            raise TruncatedPayloadError("chunk payload ended early", pos + 8)
        if tag == b"IHDR":
            w, h, depth, color, _, _, interlace = struct.unpack(">IIBBBBB", payload)
            if depth != 8 or color != 2 or interlace != 0:
                raise ImageFormatError("only 8-bit RGB non-interlaced supported")
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
        pos += 12 + length
    if w is None:
        raise ImageFormatError("missing IHDR")
    raw = np.frombuffer(zlib.decompress(idat), dtype=np.uint8)
    stride = w * 3 + 1
    if raw.size != h * stride:
        raise ImageFormatError(f"decompressed size {raw.size} != {h * stride}")
    rows = raw.reshape(h, stride)
    out = np.zeros((h, w * 3), dtype=np.uint8)
    for y in range(h):
        f = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if f == 0:
            out[y] = line
        elif f == 1:
            cur = line.copy()
            for i in range(3, cur.size):
                cur[i] = (cur[i] + cur[i - 3]) & 0xFF
            out[y] = cur
        elif f == 2:
            prev = out[y - 1].astype(np.int32) if y else 0
            out[y] = (line + prev) & 0xFF
        elif f == 3:
            cur = line.copy()
            prev = out[y - 1].astype(np.int32) if y else np.zeros_like(cur)
            for i in range(cur.size):
                left = cur[i - 3] if i >= 3 else 0
                cur[i] = (cur[i] + (left + prev[i]) // 2) & 0xFF
            out[y] = cur
        elif f == 4:
            cur = line.copy()
            prev = out[y - 1].astype(np.int32) if y else np.zeros_like(cur)
            for i in range(cur.size):
                a = cur[i - 3] if i >= 3 else 0
                b = prev[i]
                c = prev[i - 3] if i >= 3 else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pr = a if (pa <= pb and pa <= pc) else (b if pb <= pc else c)
                cur[i] = (cur[i] + pr) & 0xFF
            out[y] = cur
        else:
            raise ImageFormatError(f"unknown PNG filter {f}")
    return out.reshape(h, w, 3)


def encode_image(image, fmt="ppm") -> bytes:
    if fmt == "ppm":
        return encode_ppm(image)
    if fmt == "png":
        return encode_png(image)
    raise ImageFormatError(f"unsupported format '{fmt}'")


def decode_image(blob: bytes):
    if blob[:2] == b"P6":
        return decode_ppm(blob)
    if blob[:2] == b"P5":
        return decode_pgm(blob)
    if blob[:8] == b"\x89PNG\r\n\x1a\n":
        return decode_png(blob)
    raise ImageFormatError(f"unrecognized image magic {blob[:8]!r}")


# ---------------------------------------------------------------------------
# Frame sequences
# ---------------------------------------------------------------------------

def frame_path(directory, index) -> Path:
    return Path(directory) / f"frame_{index:06d}.pgm"


def write_frame_dir(directory, frames) -> None:
    """``frames`` is (N, H, W) uint8."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        frame_path(directory, i).write_bytes(encode_pgm(frame))


def read_frame_dir(directory):
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.pgm"))
    if not paths:
        raise ImageFormatError(f"no frame_*.pgm files in {directory}")
    frames = [decode_pgm(p.read_bytes()) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ImageFormatError(f"inconsistent frame shapes {shapes}")
    return np.stack(frames)


def write_frame_stream(path, frames) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint8:
        raise ImageFormatError("stream wants (N, H, W) uint8")
    n, h, w = frames.shape
    with open(path, "wb") as f:
        f.write(SEQ_MAGIC)
        f.write(struct.pack("<III", w, h, n))
        f.write(frames.tobytes())


def read_frame_stream(path):
    blob = Path(path).read_bytes()
    if blob[:4] != SEQ_MAGIC:
        raise ImageFormatError(f"bad stream magic {blob[:4]!r}")
    w, h, n = struct.unpack("<III", blob[4:16])
    need = 16 + n * h * w
    if len(blob) < need:
        raise TruncatedPayloadError(f"stream needs {need} bytes", len(blob))
    return np.frombuffer(blob[16:need], dtype=np.uint8).reshape(n, h, w).copy()
