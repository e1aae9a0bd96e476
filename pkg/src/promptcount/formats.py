"""On-disk formats: PMASK text masks, PDM1 binary densities, PPM/PGM images."""
from __future__ import annotations

import struct

import numpy as np

PDM_MAGIC = b"PDM1"


class FormatError(ValueError):
    pass


def write_pmask(mask: np.ndarray, path) -> None:
    """``PMASK h w`` then ``h`` lines of ``w`` floats (shortest round-trip repr)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    with open(path, "w") as fh:
        fh.write(f"PMASK {h} {w}\n")
        for row in mask:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_pmask(path, dtype=np.float64) -> np.ndarray:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty mask file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "PMASK":
        raise FormatError(f"{path}:1: expected 'PMASK h w'")
    h, w = int(head[1]), int(head[2])
    if len(lines) != h + 1:
        raise FormatError(f"{path}: expected {h} rows, found {len(lines) - 1}")
    rows = []
    for i, ln in enumerate(lines[1:], 2):
        vals = ln.split()
        if len(vals) != w:
            raise FormatError(f"{path}:{i}: expected {w} values, found {len(vals)}")
        rows.append([float(v) for v in vals])
    return np.asarray(rows, dtype=dtype)


def write_pdm(density: np.ndarray, path) -> None:
    """``PDM1``, little-endian uint32 h and w, then h*w float32 row-major."""
    d = np.asarray(density, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(PDM_MAGIC + struct.pack("<II", h, w) + d.tobytes())


def read_pdm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PDM_MAGIC:
        raise FormatError(f"{path}: bad density magic")
    h, w = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * h * w:
        raise FormatError(f"{path}: truncated density payload")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def _write_netpbm(kind: bytes, arr: np.ndarray, path) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _read_netpbm(path, kind: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != kind or tokens[3] != b"255":
        raise FormatError(f"{path}: expected 8-bit {kind.decode()} image")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1: pos + 1 + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise FormatError(f"{path}: truncated image data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape).copy()


def write_ppm(image: np.ndarray, path) -> None:
    _write_netpbm(b"P6", image, path)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_pgm(image: np.ndarray, path) -> None:
    _write_netpbm(b"P5", image, path)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)
