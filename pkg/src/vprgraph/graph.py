"""Factor-graph assembly, the normalized global error, and patching.

The binary families are never materialized as Python objects. Within one
column (database pairs) or one row (query pairs) every pair of variables is
connected, so a family is fully described by two symmetric K x K coefficient
matrices: ``loop`` (w_loop * s_hat_intra / normalizer) and ``excl``
(w_excl * (1 - s_hat_intra) / normalizer), with zeros where a factor was
dropped. Energies, gradients and Gauss-Newton products then reduce to dense
matrix products. :meth:`FactorGraph.iter_factors` still yields the explicit
factor list for small graphs.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .factors import Factor, FactorKind, SequenceOperators, exclusion_partial, exclusion_term
from .simcore import (
    ExclusionVariant,
    FactorWeights,
    IntraSetSimilarities,
    LengthMismatch,
    ProblemSpec,
    ProblemTooLarge,
    SimilarityMatrix,
    SizeMismatch,
)

log = logging.getLogger(__name__)

# Factor count of one 500x500 patch with every family enabled, plus headroom.
DEFAULT_MAX_FACTORS = 260_000_000

_CHUNK_ELEMS = 4_000_000


def n_pairs(k: int) -> int:
    return k * (k - 1) // 2


class PairFamily:
    """All loop + exclusion factors induced by one intra-set similarity matrix.

    ``axis`` is ``"db"`` (pairs of rows within each column) or ``"q"`` (pairs
    of columns within each row). Methods take ``X`` laid out with the paired
    index first: ``S`` for db, ``S.T`` for q.
    """

    def __init__(self, axis: str, intra: IntraSetSimilarities, other: int,
                 w_loop: float, w_excl: float, variant: ExclusionVariant, threshold: float):
        self.axis = axis
        self.intra = intra
        self.K = intra.size
        self.other = other
        self.variant = ExclusionVariant(variant)
        self.normalizer = other * n_pairs(self.K)
        s = intra.values
        off = ~np.eye(self.K, dtype=bool)
        self.loop_keep = off & (s >= threshold) & (w_loop > 0)
        self.excl_keep = off & ((1.0 - s) >= threshold) & (w_excl > 0)
        norm = float(self.normalizer) if self.normalizer else 1.0
        self.loop = np.where(self.loop_keep, w_loop * s / norm, 0.0)
        self.excl = np.where(self.excl_keep, w_excl * (1.0 - s) / norm, 0.0)
        self.loop_deg = self.loop.sum(axis=1)
        if axis == "db":
            self.loop_kind, self.excl_kind = FactorKind.DB_LOOP, FactorKind.DB_EXCLUSION
        else:
            self.loop_kind, self.excl_kind = FactorKind.Q_LOOP, FactorKind.Q_EXCLUSION

    # -- counting ----------------------------------------------------------
    def counts(self) -> dict[FactorKind, int]:
        return {
            self.loop_kind: int(np.triu(self.loop_keep, 1).sum()) * self.other,
            self.excl_kind: int(np.triu(self.excl_keep, 1).sum()) * self.other,
        }

    def layout(self, S: np.ndarray) -> np.ndarray:
        return S if self.axis == "db" else S.T

    def unlayout(self, X: np.ndarray) -> np.ndarray:
        return X if self.axis == "db" else X.T

    def flat_index(self, a: np.ndarray, c: np.ndarray, N: int) -> np.ndarray:
        """Flat variable index of element (a, c) of the laid-out matrix."""
        return a * N + c if self.axis == "db" else c * N + a

    # -- structured evaluation -------------------------------------------------
    def _chunks(self):
        step = max(1, _CHUNK_ELEMS // max(1, self.K * self.K))
        for c0 in range(0, self.other, step):
            yield slice(c0, min(self.other, c0 + step))

    def _pairwise(self, Xc):
        a = Xc[:, None, :]
        b = Xc[None, :, :]
        return exclusion_term(a, b, self.variant), exclusion_partial(a, b, self.variant)

    def energy(self, X: np.ndarray) -> float:
        e = float(np.sum(X * (self.loop_deg[:, None] * X - self.loop @ X)))
        if self.variant is ExclusionVariant.PRODUCT:
            X2 = X * X
            e += 0.5 * float(np.sum(X2 * (self.excl @ X2)))
        else:
            for sl in self._chunks():
                G, _ = self._pairwise(X[:, sl])
                e += 0.5 * float(np.sum(self.excl[:, :, None] * G * G))
        return e

    def jtr(self, X: np.ndarray) -> np.ndarray:
        """J^T r in laid-out coordinates (half the energy gradient)."""
        out = self.loop_deg[:, None] * X - self.loop @ X
        if self.variant is ExclusionVariant.PRODUCT:
            out += X * (self.excl @ (X * X))
        else:
            for sl in self._chunks():
                G, D = self._pairwise(X[:, sl])
                out[:, sl] += np.sum(self.excl[:, :, None] * G * D, axis=1)
        return out

    def jtj_diag(self, X: np.ndarray) -> np.ndarray:
        out = np.repeat(self.loop_deg[:, None], X.shape[1], axis=1)
        if self.variant is ExclusionVariant.PRODUCT:
            out += self.excl @ (X * X)
        else:
            for sl in self._chunks():
                _, D = self._pairwise(X[:, sl])
                out[:, sl] += np.sum(self.excl[:, :, None] * D * D, axis=1)
        return out

    def jtj_prepare(self, X: np.ndarray):
        """Cache state for repeated J^T J products at a fixed linearization point."""
        if self.variant is ExclusionVariant.PRODUCT:
            return X, self.excl @ (X * X)
        return X, [(sl, self._pairwise(X[:, sl])[1]) for sl in self._chunks()]

    def jtj(self, cache, V: np.ndarray) -> np.ndarray:
        X, aux = cache
        out = self.loop_deg[:, None] * V - self.loop @ V
        if self.variant is ExclusionVariant.PRODUCT:
            out += V * aux + X * (self.excl @ (X * V))
        else:
            for sl, D in aux:
                Vc = V[:, sl]
                BD = self.excl[:, :, None] * D
                # sum_k b_ik D_ik (D_ik v_i + D_ki v_k)
                out[:, sl] += Vc * np.sum(BD * D, axis=1)
                out[:, sl] += np.einsum("ikc,kic,kc->ic", BD, D, Vc)
        return out

    # -- explicit residuals --------------------------------------------------------
    def _pairs(self, keep):
        a, b = np.nonzero(np.triu(keep, 1))
        return a, b

    def residual_blocks(self, X: np.ndarray):
        """Yield (kind, residuals) in factor order: loop block, then exclusion block.

        Within a block factors run over the unpaired index (outer) and pairs
        in row-major upper-triangular order (inner).
        """
        a, b = self._pairs(self.loop_keep)
        ra = np.sqrt(self.loop[a, b])[None, :] * (X[a, :].T - X[b, :].T)
        yield self.loop_kind, ra.ravel()
        a, b = self._pairs(self.excl_keep)
        g = exclusion_term(X[a, :].T, X[b, :].T, self.variant)
        yield self.excl_kind, (np.sqrt(self.excl[a, b])[None, :] * g).ravel()

    def jacobian_blocks(self, X: np.ndarray, N: int):
        """Yield (rows, cols, vals, n_rows) COO blocks matching residual_blocks."""
        C = self.other
        cidx = np.arange(C)[:, None]
        a, b = self._pairs(self.loop_keep)
        P = a.size
        w = np.sqrt(self.loop[a, b])
        row = (cidx * P + np.arange(P)[None, :]).ravel()
        ia = self.flat_index(a[None, :], cidx, N).ravel()
        ib = self.flat_index(b[None, :], cidx, N).ravel()
        wv = np.broadcast_to(w[None, :], (C, P)).ravel()
        yield (np.concatenate([row, row]), np.concatenate([ia, ib]),
               np.concatenate([wv, -wv]), C * P)
        a, b = self._pairs(self.excl_keep)
        P = a.size
        w = np.sqrt(self.excl[a, b])[None, :]
        xa, xb = X[a, :].T, X[b, :].T
        da = (w * exclusion_partial(xa, xb, self.variant)).ravel()
        db = (w * exclusion_partial(xb, xa, self.variant)).ravel()
        row = (cidx * P + np.arange(P)[None, :]).ravel()
        ia = self.flat_index(a[None, :], cidx, N).ravel()
        ib = self.flat_index(b[None, :], cidx, N).ravel()
        yield (np.concatenate([row, row]), np.concatenate([ia, ib]),
               np.concatenate([da, db]), C * P)

    def iter_factors(self, N: int) -> Iterator[Factor]:
        for keep, coef, kind in ((self.loop_keep, self.loop, self.loop_kind),
                                 (self.excl_keep, self.excl, self.excl_kind)):
            a, b = self._pairs(keep)
            for c in range(self.other):
                for x, y in zip(a, b):
                    yield Factor(kind, (int(self.flat_index(x, c, N)), int(self.flat_index(y, c, N))),
                                 float(coef[x, y]), float(self.intra.values[x, y]))


@dataclass
class FactorGraph:
    """Assembled residual system for one (patch of a) similarity matrix."""

    M: int
    N: int
    s_hat: np.ndarray
    weights: FactorWeights
    variant: ExclusionVariant
    families: list[PairFamily]
    seq_ops: SequenceOperators | None
    seq_coef: float

    @property
    def n_variables(self) -> int:
        return self.M * self.N

    @property
    def variables(self) -> np.ndarray:
        """Initial variable vector (a copy of the flattened prior)."""
        return self.s_hat.copy()

    @property
    def prior_coef(self) -> float:
        return 1.0 / (self.M * self.N)

    @property
    def normalizers(self) -> dict[str, int]:
        out = {"prior": self.M * self.N}
        for fam in self.families:
            out[fam.axis] = fam.normalizer
        if self.seq_ops is not None:
            out["seq"] = self.M * self.N
        return out

    def factor_counts(self) -> dict[FactorKind, int]:
        counts = {k: 0 for k in FactorKind}
        counts[FactorKind.PRIOR] = self.M * self.N
        for fam in self.families:
            counts.update(fam.counts())
        if self.seq_ops is not None:
            counts[FactorKind.SEQUENCE] = self.M * self.N
        return counts

    @property
    def n_factors(self) -> int:
        return sum(self.factor_counts().values())

    def iter_factors(self) -> Iterator[Factor]:
        """Explicit factor list in residual order. Intended for small graphs."""
        c = self.prior_coef
        for idx in range(self.n_variables):
            yield Factor(FactorKind.PRIOR, (idx,), c, float(self.s_hat[idx]))
        for fam in self.families:
            yield from fam.iter_factors(self.N)
        if self.seq_ops is not None:
            ops = self.seq_ops
            for idx in range(self.n_variables):
                i, j = divmod(idx, self.N)
                per = {}
                cells = set()
                for v, A in zip(ops.velocities, ops.ops):
                    cols = A.indices[A.indptr[idx]:A.indptr[idx + 1]]
                    per[v] = [tuple(divmod(int(x), self.N)) for x in cols]
                    cells.update(int(x) for x in cols)
                yield Factor(FactorKind.SEQUENCE, tuple(sorted(cells)), self.seq_coef,
                             {"anchor": (i, j), "per_velocity": per})

    def check_length(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_variables,):
            raise LengthMismatch(f"expected {self.n_variables} values, got shape {x.shape}")
        return x

    def as_matrix(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.M, self.N)

    # -- structured objective ------------------------------------------------------
    def partial_errors(self, x: np.ndarray) -> dict[str, float]:
        x = self.check_length(x)
        S = self.as_matrix(x)
        out = {"prior": self.prior_coef * float(np.sum((x - self.s_hat) ** 2))}
        for fam in self.families:
            out[fam.axis] = fam.energy(fam.layout(S))
        if self.seq_ops is not None:
            _, best = self.seq_ops.select(x)
            out["seq"] = self.seq_coef * float(np.sum((x - best) ** 2))
        return out

    def energy(self, x: np.ndarray) -> float:
        return sum(self.partial_errors(x).values())


def _check_intra(intra: IntraSetSimilarities | None, size: int, name: str):
    if intra is not None and intra.size != size:
        raise SizeMismatch(f"{name} has size {intra.size}, expected {size}")


def expected_factor_count(M: int, N: int, intra_db: bool, intra_q: bool, seq: bool) -> int:
    """Closed-form factor count with every factor kept."""
    return (M * N + (2 * N * n_pairs(M) if intra_db else 0)
            + (2 * M * n_pairs(N) if intra_q else 0) + (M * N if seq else 0))


def build_graph(S_hat: SimilarityMatrix, intra_db: IntraSetSimilarities | None,
                intra_q: IntraSetSimilarities | None, spec: ProblemSpec,
                max_factors: int = DEFAULT_MAX_FACTORS) -> FactorGraph:
    M, N = S_hat.shape
    _check_intra(intra_db, M, "intra_db")
    _check_intra(intra_q, N, "intra_q")
    w = spec.weights
    use_seq = spec.seq is not None and w.seq > 0
    if intra_db is not None and intra_q is not None:
        total = expected_factor_count(M, N, True, True, use_seq)
        if total > max_factors:
            raise ProblemTooLarge(
                f"{M}x{N} graph with both intra-set inputs has {total} factors "
                f"(cap {max_factors}); partition into patches first")
    families = []
    if intra_db is not None and M >= 2 and (w.db_loop > 0 or w.db_exclusion > 0):
        families.append(PairFamily("db", intra_db, N, w.db_loop, w.db_exclusion,
                                   spec.exclusion_variant, spec.factor_threshold))
    if intra_q is not None and N >= 2 and (w.q_loop > 0 or w.q_exclusion > 0):
        families.append(PairFamily("q", intra_q, M, w.q_loop, w.q_exclusion,
                                   spec.exclusion_variant, spec.factor_threshold))
    seq_ops = None
    if use_seq:
        seq_ops = SequenceOperators(M, N, spec.seq.length, spec.seq.velocities)
    return FactorGraph(
        M=M, N=N,
        s_hat=np.array(S_hat.values, dtype=np.float64).ravel(),
        weights=w, variant=spec.exclusion_variant, families=families,
        seq_ops=seq_ops, seq_coef=w.seq / (M * N) if use_seq else 0.0,
    )


def global_error(g: FactorGraph, values: np.ndarray) -> float:
    """Normalized, weighted sum of all partial errors at ``values``."""
    return g.energy(values)


# --- patching -------------------------------------------------------------------

@dataclass(frozen=True)
class PatchPlan:
    M: int
    N: int
    blocks: tuple[tuple[tuple[int, int], tuple[int, int]], ...]

    @property
    def grid(self) -> tuple[int, int]:
        rows = len({b[0] for b in self.blocks})
        cols = len({b[1] for b in self.blocks})
        return rows, cols


def _bands(n: int, cap: int) -> list[tuple[int, int]]:
    k = math.ceil(n / cap)
    base, extra = divmod(n, k)
    out, lo = [], 0
    for b in range(k):
        hi = lo + base + (1 if b < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def partition_patches(M: int, N: int, patch_max: int) -> PatchPlan:
    rows = _bands(M, patch_max)
    cols = _bands(N, patch_max)
    return PatchPlan(M, N, tuple((r, c) for r in rows for c in cols))


def optimize_patched(S_hat: SimilarityMatrix, intra_db: IntraSetSimilarities | None,
                     intra_q: IntraSetSimilarities | None, spec: ProblemSpec,
                     workers: int = 1, reports: list | None = None) -> SimilarityMatrix:
    """Optimize S_hat, patch by patch when intra-query similarities are given.

    Patches share no information; sequence segments are truncated at patch
    borders because each patch graph only sees its own cells. ``reports``, if
    given, receives one ``(block, SolveReport, FactorGraph counts)`` per solve.
    """
    from .solver import solve

    M, N = S_hat.shape
    _check_intra(intra_db, M, "intra_db")
    _check_intra(intra_q, N, "intra_q")
    if intra_q is None:
        plan = PatchPlan(M, N, (((0, M), (0, N)),))
    else:
        plan = partition_patches(M, N, spec.patch_max)

    def run(block):
        (r0, r1), (c0, c1) = block
        sub = SimilarityMatrix(S_hat.values[r0:r1, c0:c1])
        g = build_graph(sub, None if intra_db is None else intra_db.restrict(r0, r1),
                        None if intra_q is None else intra_q.restrict(c0, c1), spec)
        x, report = solve(g, spec.solver)
        log.debug("patch %s: %s", block, report.termination)
        return block, x.reshape(r1 - r0, c1 - c0), report, g.factor_counts()

    if workers > 1 and len(plan.blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, plan.blocks))
    else:
        results = [run(b) for b in plan.blocks]

    out = np.empty((M, N))
    for block, sol, report, counts in results:
        (r0, r1), (c0, c1) = block
        out[r0:r1, c0:c1] = sol
        if reports is not None:
            reports.append((block, report, counts))
    return SimilarityMatrix(np.clip(out, 0.0, 1.0))
