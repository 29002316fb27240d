"""Plain PGM/PPM image and mask serialization.

Masks travel as ASCII PGM (P2) with maxval 255: binary masks use {0, 255},
soft masks round to the nearest integer.  RGB images travel as binary
PPM (P6).  Signed score maps are rescaled to [0, 255] with the original
min/max recorded in a JSON sidecar next to the PGM.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pgm(path, values: np.ndarray) -> None:
    """Write a [0,1] grayscale array as ASCII PGM (P2), maxval 255."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM expects a 2-D array, got shape {values.shape}")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("PGM values must lie in [0, 1]")
    h, w = values.shape
    gray = np.rint(values * 255.0).astype(np.int64)
    lines = [f"P2\n{w} {h}\n255\n"]
    for row in gray:
        lines.append(" ".join(str(v) for v in row) + "\n")
    Path(path).write_text("".join(lines))


def read_pgm(path) -> np.ndarray:
    """Read an ASCII PGM (P2) back into a [0,1] float array."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        body = line.split("#", 1)[0]
        tokens.extend(body.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4 : 4 + w * h], dtype=np.float64)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, found {data.size}")
    return (data / maxval).reshape(h, w)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a [0,1] HxWx3 array as binary PPM (P6)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM expects (H, W, 3), got shape {image.shape}")
    h, w, _ = image.shape
    raw = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into a [0,1] HxWx3 float array."""
    blob = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def write_score_map(path, scores: np.ndarray) -> None:
    """Write a signed score map as a rescaled PGM plus a min/max sidecar.

    The sidecar ``<path>.json`` records the original range so the map can
    be recovered; a constant map is written as mid-gray.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if hi > lo:
        scaled = (scores - lo) / (hi - lo)
    else:
        scaled = np.full_like(scores, 0.5)
    write_pgm(path, scaled)
    Path(f"{path}.json").write_text(json.dumps({"min": lo, "max": hi}) + "\n")


def read_score_map(path) -> np.ndarray:
    """Recover a signed score map written by :func:`write_score_map`."""
    scaled = read_pgm(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    lo, hi = meta["min"], meta["max"]
    if hi > lo:
        return scaled * (hi - lo) + lo
    return np.full_like(scaled, lo)
