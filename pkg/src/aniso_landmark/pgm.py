"""Binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 65535


class PGMFormatError(ValueError):
    pass


def encode_pgm(values: np.ndarray) -> bytes:
    """Quantise ``values`` in [0, 1] to 16 bits and return the P5 bytes."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {values.shape}")
    q = np.rint(np.clip(values, 0.0, 1.0) * MAXVAL).astype(">u2")
    h, w = values.shape
    return f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii") + q.tobytes()


def write_pgm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(values))


def write_pgm_normalized(path, values: np.ndarray) -> None:
    """Write after dividing by the maximum (negative values are clipped to 0)."""
    values = np.maximum(np.asarray(values, dtype=np.float64), 0.0)
    peak = values.max() if values.size else 0.0
    write_pgm(path, values / peak if peak > 0 else values)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMFormatError(f"unexpected end of header at byte {pos}")
    return data[start:pos], pos


def decode_pgm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse P5 bytes into a float64 array in [0, 1]."""
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise PGMFormatError(f"{source}: bad magic {magic!r} at byte 0, expected b'P5'")
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(data, pos)
        try:
            val = int(tok)
        except ValueError:
            raise PGMFormatError(f"{source}: non-integer {name} {tok!r} near byte {start}") from None
        if val <= 0:
            raise PGMFormatError(f"{source}: {name} must be positive near byte {start}")
        fields.append(val)
    w, h, maxval = fields
    if maxval > MAXVAL:
        raise PGMFormatError(f"{source}: maxval {maxval} exceeds {MAXVAL}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise PGMFormatError(f"{source}: raster truncated at byte {pos + len(raster)}, expected {need} bytes")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    return decode_pgm(path.read_bytes(), source=str(path))
