"""Binary PGM (P5) reading and writing.

Images travel as uint8 with maxval 255; masks use foreground=255. The
reader tolerates comment lines and arbitrary whitespace in the header, the
writer emits a canonical minimal header so outputs are byte-stable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    """Malformed PGM file."""


def _header_tokens(raw: bytes):
    """Yield whitespace-separated header tokens, skipping # comments."""
    pos = 0
    while True:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        if pos >= len(raw):
            raise PgmError("unexpected end of header")
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        yield raw[start:pos].decode("ascii"), pos


def read_pgm(path) -> np.ndarray:
    """Read a P5 file into a (H, W) uint8 array."""
    raw = Path(path).read_bytes()
    tokens = _header_tokens(raw)
    fields = []
    end = 0
    for _ in range(4):
        tok, end = next(tokens)
        fields.append(tok)
    if fields[0] != "P5":
        raise PgmError(f"{path}: expected P5 magic, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PgmError(f"{path}: non-numeric header fields {fields[1:]}") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise PgmError(f"{path}: bad extents or maxval {(w, h, maxval)}")
    payload = raw[end + 1 :]
    if len(payload) < h * w:
        raise PgmError(f"{path}: payload holds {len(payload)} bytes, need {h * w}")
    return np.frombuffer(payload[: h * w], dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    """Write a (H, W) uint8 array as binary P5."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise PgmError(f"PGM images are 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > maxval:
            raise PgmError(f"values outside [0, {maxval}] cannot be written")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def image_to_unit(arr: np.ndarray) -> np.ndarray:
    """uint8 image -> float grays in [0, 1]."""
    return np.asarray(arr, dtype=np.float64) / 255.0


def unit_to_image(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image -> rounded uint8 grays."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def mask_to_pgm_array(mask: np.ndarray) -> np.ndarray:
    """Binary mask -> uint8 with foreground 255."""
    return (np.asarray(mask) != 0).astype(np.uint8) * 255


def pgm_array_to_mask(arr: np.ndarray) -> np.ndarray:
    """uint8 mask image -> binary {0,1}, foreground above half scale."""
    return (np.asarray(arr) > 127).astype(np.uint8)
