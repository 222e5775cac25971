"""Cost functions for the four factor families and sequence-segment geometry."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .simcore import (
    ExclusionVariant,
    IndexOutOfRange,
    SimilarityMatrix,
)

# Segment means closer than this are treated as tied when picking v*.
TIE_TOL = 1e-12


class FactorKind(str, enum.Enum):
    PRIOR = "Prior"
    DB_LOOP = "DbLoop"
    DB_EXCLUSION = "DbExclusion"
    Q_LOOP = "QLoop"
    Q_EXCLUSION = "QExclusion"
    SEQUENCE = "Sequence"


@dataclass(frozen=True)
class Factor:
    """One factor: residual = sqrt(coefficient) * (family-specific term)."""

    kind: FactorKind
    variable_indices: tuple[int, ...]
    coefficient: float
    payload: object = None


@dataclass(frozen=True)
class SequenceNeighborhood:
    anchor: tuple[int, int]
    shape: tuple[int, int]
    per_velocity: dict[float, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def effective_length(self) -> dict[float, int]:
        return {v: len(cells) for v, cells in self.per_velocity.items()}

    @classmethod
    def build(cls, i: int, j: int, M: int, N: int, L: int, velocities) -> "SequenceNeighborhood":
        per = {float(v): seq_neighbors(i, j, M, N, L, v) for v in velocities}
        return cls((i, j), (M, N), per)


# --- scalar costs -----------------------------------------------------------

def prior_cost(s: float, s_hat: float) -> float:
    return (s - s_hat) ** 2


def loop_cost(s_a: float, s_b: float, intra_sim: float) -> float:
    return intra_sim * (s_a - s_b) ** 2


def exclusion_term(s_a, s_b, variant: ExclusionVariant):
    """The un-squared exclusion term g(s_a, s_b); works elementwise on arrays."""
    variant = ExclusionVariant(variant)
    if variant is ExclusionVariant.PRODUCT:
        return s_a * s_b
    if variant is ExclusionVariant.MIN:
        return np.minimum(s_a, s_b)
    return np.maximum(s_a + s_b - 1.0, 0.0)


def exclusion_partial(s_a, s_b, variant: ExclusionVariant):
    """d g(s_a, s_b) / d s_a, elementwise.

    Min splits the derivative evenly on ties; SoftAnd uses 0 at the kink.
    """
    variant = ExclusionVariant(variant)
    if variant is ExclusionVariant.PRODUCT:
        return s_b * np.ones_like(s_a)
    if variant is ExclusionVariant.MIN:
        return np.where(s_a < s_b, 1.0, np.where(s_a > s_b, 0.0, 0.5))
    return np.where(s_a + s_b > 1.0, 1.0, 0.0)


def exclusion_cost(s_a: float, s_b: float, intra_sim: float,
                   variant: ExclusionVariant = ExclusionVariant.PRODUCT) -> float:
    return (1.0 - intra_sim) * float(exclusion_term(s_a, s_b, variant)) ** 2


# --- sequence geometry --------------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@lru_cache(maxsize=256)
def segment_offsets(L: int, v: float) -> tuple[np.ndarray, np.ndarray]:
    """Row and column offsets of a centered segment of L query frames at slope v."""
    half = (L - 1) // 2
    dl = np.arange(-half, half + 1, dtype=np.int64)
    dk = round_half_away(v * dl)
    dl.setflags(write=False)
    dk.setflags(write=False)
    return dk, dl


def seq_neighbors(i: int, j: int, M: int, N: int, L: int, v_p: float) -> list[tuple[int, int]]:
    if not (0 <= i < M and 0 <= j < N):
        raise IndexOutOfRange(f"anchor ({i}, {j}) outside a {M}x{N} matrix")
    dk, dl = segment_offsets(int(L), float(v_p))
    out = []
    for a, b in zip(dk, dl):
        k, l = i + int(a), j + int(b)
        if 0 <= k < M and 0 <= l < N:
            out.append((k, l))
    return out


def velocity_preference(velocities) -> list[int]:
    """Indices of ``velocities`` ordered by tie-break preference (closest to 1, then smaller)."""
    return sorted(range(len(velocities)), key=lambda p: (abs(velocities[p] - 1.0), velocities[p]))


def best_velocity(S: SimilarityMatrix | np.ndarray, nbhd: SequenceNeighborhood) -> tuple[float, float]:
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S)
    vels = list(nbhd.per_velocity)
    means = []
    for v in vels:
        cells = nbhd.per_velocity[v]
        rows, cols = zip(*cells)
        means.append(float(np.sum(values[list(rows), list(cols)])) / len(cells))
    top = max(means)
    for p in velocity_preference(vels):
        if means[p] >= top - TIE_TOL:
            return vels[p], means[p]
    raise AssertionError("unreachable")


def seq_cost(S: SimilarityMatrix | np.ndarray, nbhd: SequenceNeighborhood) -> float:
    values = S.values if isinstance(S, SimilarityMatrix) else np.asarray(S)
    _, mean = best_velocity(values, nbhd)
    i, j = nbhd.anchor
    return (values[i, j] - mean) ** 2


# --- vectorized sequence operators --------------------------------------------

def segment_average_operator(M: int, N: int, L: int, v: float) -> sp.csr_matrix:
    """Sparse (MN x MN) operator mapping flat S to per-cell segment means at slope v.

    Border cells average over their truncated segment only.
    """
    dk, dl = segment_offsets(int(L), float(v))
    ii, jj = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    anchors = np.arange(M * N)
    rows, cols = [], []
    for a, b in zip(dk, dl):
        k = ii + a
        l = jj + b
        ok = (k >= 0) & (k < M) & (l >= 0) & (l < N)
        rows.append(anchors[ok])
        cols.append(k[ok] * N + l[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    counts = np.bincount(rows, minlength=M * N).astype(np.float64)
    data = 1.0 / counts[rows]
    A = sp.csr_matrix((data, (rows, cols)), shape=(M * N, M * N))
    A.sum_duplicates()
    A.sort_indices()
    return A


class SequenceOperators:
    """Per-velocity averaging operators and v* selection over a whole matrix."""

    def __init__(self, M: int, N: int, L: int, velocities):
        self.M, self.N, self.L = M, N, int(L)
        self.velocities = tuple(float(v) for v in velocities)
        self.preference = velocity_preference(self.velocities)
        self.ops = [segment_average_operator(M, N, self.L, v) for v in self.velocities]

    def means(self, x: np.ndarray) -> np.ndarray:
        """(|V|, MN) segment means."""
        return np.stack([A @ x for A in self.ops])

    def select(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per cell: index into ``velocities`` of v*, and the winning mean."""
        m = self.means(x)
        top = m.max(axis=0)
        tied = m >= top - TIE_TOL
        # first tied velocity in preference order
        pref = np.asarray(self.preference)
        first = np.argmax(tied[pref], axis=0)
        choice = pref[first]
        return choice, m[choice, np.arange(m.shape[1])]

    def selection_gap(self, x: np.ndarray) -> np.ndarray:
        """Distance of the best mean to the best mean of a *different* segment set.

        Small gaps mark cells where v* may switch under a small perturbation.
        Velocities whose segment is identical cell-for-cell never switch.
        """
        m = self.means(x)
        choice, best = self.select(x)
        gap = np.full(m.shape[1], np.inf)
        for p, A in enumerate(self.ops):
            diff = best - m[p]
            other = choice != p
            # operators that coincide row-wise give identical means forever
            same_rows = _rows_equal(A, self.ops, choice)
            mask = other & ~same_rows
            gap[mask] = np.minimum(gap[mask], diff[mask])
        return gap

    def selected_operator(self, choice: np.ndarray) -> sp.csr_matrix:
        """Rows of the per-velocity operators picked by ``choice``."""
        G = None
        for p, A in enumerate(self.ops):
            mask = (choice == p).astype(np.float64)
            part = sp.diags(mask) @ A
            G = part if G is None else G + part
        return G.tocsr()


def _rows_equal(A: sp.csr_matrix, ops, choice: np.ndarray) -> np.ndarray:
    """Per row r: whether row r of A equals row r of ops[choice[r]]."""
    out = np.zeros(A.shape[0], dtype=bool)
    for q, B in enumerate(ops):
        rows = np.flatnonzero(choice == q)
        if rows.size == 0:
            continue
        D = (A[rows] - B[rows])
        D.eliminate_zeros()
        out[rows] = np.diff(D.indptr) == 0
    return out
