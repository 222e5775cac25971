"""Plain-text matrix, descriptor and pose files, and PGM heatmaps.

Matrices are written one row per line, comma separated, no header, with
Python's shortest round-trip float repr, so write -> read is value-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .pipeline import DescriptorSet, PoseTrack
from .simcore import InvalidParams, SimilarityMatrix, validate_similarity_matrix


def format_float(v: float) -> str:
    return repr(float(v))


def write_matrix(path: str | Path, values) -> None:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidParams(f"expected a 2-D matrix, got shape {arr.shape}")
    lines = (",".join(format_float(v) for v in row) for row in arr.tolist())
    with open(path, "w", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def read_matrix(path: str | Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError:
                raise InvalidParams(f"{path}:{lineno}: not a comma-separated float row") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise InvalidParams(f"{path}: rows have differing lengths")
    return np.array(rows, dtype=np.float64)


def read_similarity(path: str | Path) -> SimilarityMatrix:
    return validate_similarity_matrix(read_matrix(path))


def read_descriptors(path: str | Path) -> DescriptorSet:
    return DescriptorSet(read_matrix(path))


def read_poses(path: str | Path) -> PoseTrack:
    return PoseTrack(read_matrix(path))


def write_pgm(path: str | Path, values) -> None:
    """Binary PGM (P5, maxval 255); pixel = round(255 * s), halves rounded up."""
    arr = np.asarray(values, dtype=np.float64)
    pix = np.floor(255.0 * np.clip(arr, 0.0, 1.0) + 0.5).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise InvalidParams(f"{path}: not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
