"""Bound-constrained damped Gauss-Newton for the similarity factor graph.

The solver never forms the Jacobian. Each outer iteration freezes the
sequence-factor velocity choice, builds J^T r and diag(J^T J) from the
structured families, and solves the damped normal equations on the free
variables with Jacobi-preconditioned conjugate gradients. Trial points are
projected onto [0, 1]; a step is accepted only if the true (max-based)
global error decreases, so the error trace is monotone.

``residuals`` and ``jacobian`` build the explicit per-factor quantities. They
are used for verification and small problems, not by :func:`solve`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import FactorGraph
from .simcore import ExclusionVariant, NumericalFailure, SolverSettings

log = logging.getLogger(__name__)


class Termination(str, enum.Enum):
    FTOL = "FTol"
    XTOL = "XTol"
    MAX_ITER = "MaxIter"


@dataclass
class SolveReport:
    initial_error: float
    final_error: float
    iterations: int
    termination: Termination
    trace: list[float] = field(default_factory=list)
    cg_iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "initial_error": self.initial_error,
            "final_error": self.final_error,
            "iterations": self.iterations,
            "termination": self.termination.value,
            "trace": list(self.trace),
            "cg_iterations": self.cg_iterations,
        }


# --- explicit residuals / Jacobian ----------------------------------------------

def residuals(g: FactorGraph, x: np.ndarray) -> np.ndarray:
    """One residual per factor, in ``g.iter_factors()`` order."""
    x = g.check_length(x)
    S = g.as_matrix(x)
    parts = [np.sqrt(g.prior_coef) * (x - g.s_hat)]
    for fam in g.families:
        parts.extend(r for _, r in fam.residual_blocks(fam.layout(S)))
    if g.seq_ops is not None:
        _, best = g.seq_ops.select(x)
        parts.append(np.sqrt(g.seq_coef) * (x - best))
    return np.concatenate(parts)


def jacobian(g: FactorGraph, x: np.ndarray) -> sp.csr_matrix:
    """Analytic sparse Jacobian (factors x variables).

    Sequence rows use the velocity chosen at ``x``; the max is treated as
    locally constant.
    """
    x = g.check_length(x)
    S = g.as_matrix(x)
    n = g.n_variables
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, np.sqrt(g.prior_coef))]
    offset = n
    for fam in g.families:
        for r, c, v, nrows in fam.jacobian_blocks(fam.layout(S), g.N):
            rows.append(r + offset)
            cols.append(c)
            vals.append(v)
            offset += nrows
    if g.seq_ops is not None:
        choice, _ = g.seq_ops.select(x)
        H = (sp.identity(n, format="csr") - g.seq_ops.selected_operator(choice)).tocoo()
        rows.append(H.row + offset)
        cols.append(H.col)
        vals.append(np.sqrt(g.seq_coef) * H.data)
        offset += n
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(offset, n))
    J.sum_duplicates()
    return J


def _kink_rows(g: FactorGraph, x: np.ndarray, margin: float) -> np.ndarray:
    """Residual rows within ``margin`` of a non-smooth point."""
    S = g.as_matrix(x)
    masks = [np.zeros(g.n_variables, dtype=bool)]
    for fam in g.families:
        X = fam.layout(S)
        for kind, r in fam.residual_blocks(X):
            masks.append(np.zeros(r.size, dtype=bool))
        if fam.variant is not ExclusionVariant.PRODUCT:
            a, b = np.nonzero(np.triu(fam.excl_keep, 1))
            xa, xb = X[a, :].T, X[b, :].T
            if fam.variant is ExclusionVariant.MIN:
                near = np.abs(xa - xb) < margin
            else:
                near = np.abs(xa + xb - 1.0) < margin
            masks[-1] = near.ravel()
    if g.seq_ops is not None:
        masks.append(g.seq_ops.selection_gap(x) < margin)
    return np.concatenate(masks)


def check_jacobian(g: FactorGraph, x: np.ndarray, h: float = 1e-6,
                   kink_margin: float = 1e-4) -> float:
    """Worst entrywise relative deviation between analytic and central-difference Jacobians.

    Entries with magnitude <= 1e-8 in both are ignored, as are rows within
    ``kink_margin`` of a v* switch or a Min/SoftAnd kink (pass 0 to keep all).
    """
    x = g.check_length(x)
    Ja = jacobian(g, x).toarray()
    Jf = np.empty_like(Ja)
    for k in range(g.n_variables):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        Jf[:, k] = (residuals(g, xp) - residuals(g, xm)) / (2 * h)
    keep = ~_kink_rows(g, x, kink_margin) if kink_margin > 0 else np.ones(Ja.shape[0], bool)
    Ja, Jf = Ja[keep], Jf[keep]
    mag = np.maximum(np.abs(Ja), np.abs(Jf))
    sig = mag > 1e-8
    if not sig.any():
        return 0.0
    return float(np.max(np.abs(Ja - Jf)[sig] / mag[sig]))


# --- matrix-free linearization ----------------------------------------------

class _Linearization:
    """J^T r, diag(J^T J) and J^T J products at a frozen point."""

    def __init__(self, g: FactorGraph, x: np.ndarray):
        self.g = g
        S = g.as_matrix(x)
        n = g.n_variables
        self.jtr = g.prior_coef * (x - g.s_hat)
        self.diag = np.full(n, g.prior_coef)
        self.caches = []
        for fam in g.families:
            X = fam.layout(S)
            self.jtr += fam.unlayout(fam.jtr(X)).ravel()
            self.diag += fam.unlayout(fam.jtj_diag(X)).ravel()
            self.caches.append(fam.jtj_prepare(X))
        self.H = self.HT = None
        if g.seq_ops is not None:
            choice, best = g.seq_ops.select(x)
            H = (sp.identity(n, format="csr") - g.seq_ops.selected_operator(choice)).tocsr()
            self.H, self.HT = H, H.T.tocsr()
            self.jtr += g.seq_coef * (self.HT @ (x - best))
            self.diag += g.seq_coef * np.asarray(H.multiply(H).sum(axis=0)).ravel()

    def jtj(self, v: np.ndarray) -> np.ndarray:
        g = self.g
        out = g.prior_coef * v
        V = g.as_matrix(v)
        for fam, cache in zip(g.families, self.caches):
            out += fam.unlayout(fam.jtj(cache, fam.layout(V))).ravel()
        if self.H is not None:
            out += g.seq_coef * (self.HT @ (self.H @ v))
        return out


def _pcg(lin: _Linearization, rhs: np.ndarray, free: np.ndarray, lam: float,
         rtol: float = 1e-6, maxiter: int = 200) -> tuple[np.ndarray, int]:
    """Solve (J^T J + lam diag(J^T J)) d = rhs restricted to ``free`` variables."""
    f = free.astype(np.float64)
    damp = lam * lin.diag
    minv = f / ((1.0 + lam) * lin.diag)

    def apply(p):
        return f * (lin.jtj(f * p) + damp * p)

    d = np.zeros_like(rhs)
    r = f * rhs
    bnorm = np.linalg.norm(r)
    if bnorm == 0.0:
        return d, 0
    z = minv * r
    p = z.copy()
    rz = r @ z
    for k in range(1, maxiter + 1):
        Ap = apply(p)
        pAp = p @ Ap
        if not pAp > 0:
            raise NumericalFailure(f"normal equations not positive definite (p'Ap={pAp})")
        alpha = rz / pAp
        d += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return d, k
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return d, maxiter


def solve(g: FactorGraph, settings: SolverSettings | None = None,
          callback=None) -> tuple[np.ndarray, SolveReport]:
    """Minimize the global error over [0, 1]^(M*N), starting from the prior.

    ``callback(x, E)`` is called with every accepted iterate.
    """
    settings = settings or SolverSettings()
    x = np.clip(g.variables, 0.0, 1.0)
    E = g.energy(x)
    report = SolveReport(E, E, 0, Termination.MAX_ITER, [E])
    lam = settings.initial_damping
    while report.iterations < settings.max_iterations:
        lin = _Linearization(g, x)
        grad = lin.jtr
        at_lo = (x <= 0.0) & (grad > 0)
        at_hi = (x >= 1.0) & (grad < 0)
        free = ~(at_lo | at_hi)
        if E == 0.0 or not np.any(grad[free]):
            report.termination = Termination.FTOL
            break
        x_new = None
        for _ in range(12):
            d, k = _pcg(lin, -grad, free, lam)
            report.cg_iterations += k
            trial = np.clip(x + d, 0.0, 1.0)
            E_trial = g.energy(trial)
            if E_trial < E:
                x_new, E_new = trial, E_trial
                break
            lam *= 10.0
        if x_new is None:
            x_new, E_new = _projected_gradient_step(g, x, E, grad, free, lin.diag)
        if x_new is None:
            report.termination = Termination.XTOL
            break
        report.iterations += 1
        step = np.linalg.norm(x_new - x)
        decrease = E - E_new
        E_old = E
        x, E = x_new, E_new
        report.trace.append(E)
        if callback is not None:
            callback(x, E)
        lam = max(lam / 3.0, 1e-12)
        if decrease <= settings.function_tolerance * E_old:
            report.termination = Termination.FTOL
            break
        if step <= settings.step_tolerance * (settings.step_tolerance + np.linalg.norm(x)):
            report.termination = Termination.XTOL
            break
    report.final_error = E
    log.debug("solve: %d iterations, %s, E %.6g -> %.6g", report.iterations,
              report.termination.value, report.initial_error, E)
    return x, report


def _projected_gradient_step(g, x, E, grad, free, diag):
    """Backtracking projected gradient fallback; None if no decrease is found."""
    t = 1.0 / np.max(diag)
    direction = -np.where(free, grad, 0.0)
    for _ in range(40):
        trial = np.clip(x + t * direction, 0.0, 1.0)
        E_trial = g.energy(trial)
        if E_trial < E:
            return trial, E_trial
        t *= 0.5
    return None, E

