"""Minimal netpbm readers/writers: plain PGM (P2), binary PGM (P5), binary PPM (P6).

Covers exactly the formats the dataset layout and mask/score exports use.
All binary images are 8-bit (maxval 255) except plain-text P2 masks, which
use maxval 1.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_pgm_p2(path, img, maxval=1):
    """Plain-text grayscale image; img is a 2-D integer array in [0, maxval]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise DataError("P2 image must be 2-D")
    h, w = img.shape
    lines = [f"P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in img]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm_p2(path):
    with open(path, encoding="ascii") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise DataError(f"{path}: not a plain PGM (P2) file")
    w, h, maxval = (int(t) for t in tokens[1:4])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if vals.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {vals.size}")
    if vals.max(initial=0) > maxval:
        raise DataError(f"{path}: pixel above declared maxval")
    return vals.reshape(h, w)


def _read_header(fh, magic, path):
    got = fh.read(2)
    if got != magic:
        raise DataError(f"{path}: expected {magic.decode()} magic, got {got!r}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise DataError(f"{path}: truncated header")
        line = line.split(b"#", 1)[0]
        fields.extend(line.split())
    w, h, maxval = (int(f) for f in fields[:3])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h


def write_pgm_p5(path, img):
    """Binary grayscale image; img is a 2-D uint8 array."""
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    if img.ndim != 2:
        raise DataError("P5 image must be 2-D")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm_p5(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5", path)
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def write_ppm_p6(path, img):
    """Binary RGB image; img is (H, W, 3) uint8."""
    img = np.ascontiguousarray(np.asarray(img, dtype=np.uint8))
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError("P6 image must be (H, W, 3)")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm_p6(path):
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6", path)
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
