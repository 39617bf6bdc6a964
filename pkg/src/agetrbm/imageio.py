"""Raster and landmark file formats.

* Rasters: binary 8-bit PGM (``P5``).  Floats in [0, 1] map to 0..255.
* Landmarks: plain text, one ``x,y`` pair per line (68 lines).
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from agetrbm.errors import InputError
from agetrbm.geometry import N_LANDMARKS, check_landmarks

_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+"
                     rb"(?:#[^\n]*\s+)*(\d+)\s")


def to_uint8(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image):
    img = np.asarray(image)
    if img.ndim != 2:
        raise InputError("PGM rasters must be 2-D")
    data = img if img.dtype == np.uint8 else to_uint8(img)
    H, W = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (W, H) + data.tobytes())


def read_pgm(path, as_float: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise InputError(f"{path}: not a binary PGM (P5) file")
    W, H, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 256:
        raise InputError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    body = raw[m.end():m.end() + W * H]
    if len(body) != W * H:
        raise InputError(f"{path}: truncated pixel data")
    img = np.frombuffer(body, dtype=np.uint8).reshape(H, W)
    return img.astype(np.float64) / maxval if as_float else img.copy()


def write_landmarks(path, points):
    pts = np.asarray(points, dtype=np.float64)
    Path(path).write_text("".join(f"{float(x)!r},{float(y)!r}\n" for x, y in pts))


def read_landmarks(path, n_expected: int | None = N_LANDMARKS) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            x, y = (float(tok) for tok in line.split(","))
        except ValueError:
            raise InputError(f"{path}:{lineno}: expected 'x,y'") from None
        rows.append((x, y))
    return check_landmarks(np.array(rows), n_expected)
