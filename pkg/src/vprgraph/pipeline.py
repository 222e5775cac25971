"""Descriptor preprocessing, similarity construction and the SeqSLAM-style baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factors import SequenceOperators
from .simcore import (
    DimensionMismatch,
    IntraKind,
    IntraSetSimilarities,
    InvalidParams,
    SequenceConfig,
    SimilarityMatrix,
)


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidParams(f"descriptor set must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidParams("descriptor set contains NaN or Inf")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class PoseTrack:
    positions: np.ndarray

    def __post_init__(self):
        p = np.array(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise InvalidParams(f"pose track must be an (n, 2) array, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise InvalidParams("pose track contains NaN or Inf")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def _zscore(v: np.ndarray) -> np.ndarray:
    mu = v.mean(axis=0)
    sd = v.std(axis=0)
    out = np.zeros_like(v)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    out[:, ok] = (v[:, ok] - mu[ok]) / sd[ok]
    return out


def standardize(db: DescriptorSet, q: DescriptorSet) -> tuple[DescriptorSet, DescriptorSet]:
    """Per-set, per-dimension z-scoring. Constant dimensions become 0."""
    if db.dim != q.dim:
        raise DimensionMismatch(f"descriptor dims differ: {db.dim} vs {q.dim}")
    return DescriptorSet(_zscore(db.vectors)), DescriptorSet(_zscore(q.vectors))


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return np.clip(ua @ ub.T, -1.0, 1.0)


def pairwise_similarities(a: DescriptorSet, b: DescriptorSet) -> SimilarityMatrix:
    """(1 + cosine) / 2 for every pair; zero vectors score 0.5 against anything."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"descriptor dims differ: {a.dim} vs {b.dim}")
    return SimilarityMatrix(0.5 * (1.0 + _cosine(a.vectors, b.vectors)))


def intra_from_descriptors(a: DescriptorSet) -> IntraSetSimilarities:
    s = 0.5 * (1.0 + _cosine(a.vectors, a.vectors))
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return IntraSetSimilarities(s, IntraKind.FROM_DESCRIPTORS)


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1))


def intra_from_poses(p: PoseTrack, radius: float = 10.0) -> IntraSetSimilarities:
    if not radius > 0:
        raise InvalidParams(f"radius must be > 0, got {radius}")
    d = _distances(p.positions, p.positions)
    s = (d <= radius).astype(np.float64)
    s = np.maximum(s, s.T)
    np.fill_diagonal(s, 1.0)
    return IntraSetSimilarities(s, IntraKind.FROM_POSES)


def seqslam_postprocess(S: SimilarityMatrix, cfg: SequenceConfig | None = None) -> SimilarityMatrix:
    """Best mean similarity along constant-velocity segments, per cell.

    No local contrast normalization and no single-match constraint.
    """
    cfg = cfg or SequenceConfig()
    M, N = S.shape
    ops = SequenceOperators(M, N, cfg.length, cfg.velocities)
    _, best = ops.select(S.values.ravel())
    # a mean never leaves the range of its inputs; clipping removes rounding drift
    return SimilarityMatrix(np.clip(best.reshape(M, N), S.values.min(), S.values.max()))
