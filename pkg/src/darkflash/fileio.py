"""PGM / PFM / JSON readers and writers.

Raw frames are 16-bit binary PGM (big-endian, per the netpbm spec) with a JSON
sidecar of the same stem.  Linear images are PFM, written little-endian
(scale -1.0) in bottom-up row order.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import RawFrame
from .errors import FormatError


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _encode_inf(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _encode_inf(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode_inf(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    """Deterministic JSON: sorted keys, infinities as the strings "inf"/"-inf"."""
    return json.dumps(_encode_inf(obj), sort_keys=True, indent=2, default=_json_default) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps_json(obj).encode())


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- PGM


def encode_pgm16(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    h, w = data.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    return header + data.astype(">u2").tobytes()


def _read_tokens(buf: bytes, count: int):
    """Pull ``count`` whitespace-separated header tokens (skipping comments)."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(buf[start:pos].decode("ascii"))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm16(buf: bytes) -> np.ndarray:
    try:
        (magic, w, h, maxval), offset = _read_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad PGM header: {exc}") from exc
    if magic != "P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})")
    if maxval < 256 or maxval > 65535:
        raise FormatError(f"expected a 16-bit PGM, maxval {maxval}")
    need = w * h * 2
    payload = buf[offset : offset + need]
    if len(payload) != need:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)


def frame_metadata(raw: RawFrame) -> dict:
    return {
        "cfa_pattern": raw.cfa_pattern,
        "adc_bits": raw.adc_bits,
        "black_level": raw.black_level,
        "camera_id": raw.camera_id,
        "settings": None if raw.settings is None else raw.settings.to_dict(),
    }


def write_raw(path, raw: RawFrame) -> None:
    """Write ``<name>.pgm`` plus its ``<name>.json`` sidecar."""
    path = Path(path)
    atomic_write_bytes(path, encode_pgm16(raw.data))
    write_json(path.with_suffix(".json"), frame_metadata(raw))


def read_raw(path) -> RawFrame:
    from .sim import ExposureSettings

    path = Path(path)
    data = decode_pgm16(path.read_bytes())
    meta = read_json(path.with_suffix(".json"))
    try:
        settings = meta.get("settings")
        return RawFrame(
            data,
            cfa_pattern=meta["cfa_pattern"],
            adc_bits=int(meta["adc_bits"]),
            black_level=int(meta["black_level"]),
            camera_id=meta["camera_id"],
            settings=None if settings is None else ExposureSettings.from_dict(settings),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad raw sidecar ({exc})") from exc


# ---------------------------------------------------------------- PFM


def encode_pfm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = "PF"
    else:
        raise FormatError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise FormatError("refusing to write non-finite samples")
    h, w = img.shape[:2]
    header = f"{magic}\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1]).astype("<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    try:
        (magic, w, h, scale), offset = _read_tokens(buf, 4)
        w, h, scale = int(w), int(h), float(scale)
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad PFM header: {exc}") from exc
    if magic == "PF":
        channels = 3
    elif magic == "Pf":
        channels = 1
    else:
        raise FormatError(f"not a PFM (magic {magic!r})")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * channels * 4
    payload = buf[offset : offset + need]
    if len(payload) != need:
        raise FormatError("truncated PFM payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))
    return arr[::-1].copy()


def write_pfm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pfm(img))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())
