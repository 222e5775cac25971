"""Core data types, validation and default parameters.

Everything here is immutable once constructed. Matrices are stored as
read-only float64 numpy arrays so they can be shared between solves.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

CLAMP_TOL = 1e-9


class SimGraphError(Exception):
    """Base class of all library errors."""

    exit_code = 1


class EmptyMatrix(SimGraphError):
    exit_code = 3


class ValueOutOfRange(SimGraphError):
    exit_code = 3

    def __init__(self, index: tuple[int, ...], value: float):
        self.index = index
        self.value = value
        super().__init__(f"value {value!r} at {index} is outside [0, 1]")


class SizeMismatch(SimGraphError):
    exit_code = 4


class DimensionMismatch(SizeMismatch):
    pass


class LengthMismatch(SizeMismatch):
    pass


class IndexOutOfRange(SimGraphError):
    exit_code = 4


class ProblemTooLarge(SimGraphError):
    exit_code = 5


class InvalidParams(SimGraphError):
    exit_code = 2


class NoPositives(SimGraphError):
    exit_code = 6


class NumericalFailure(SimGraphError):
    exit_code = 7


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def validate_similarity_matrix(values) -> "SimilarityMatrix":
    """Check a 2-D array of similarities and return it as a SimilarityMatrix.

    Values within ``CLAMP_TOL`` of [0, 1] are clamped; anything further out
    raises :class:`ValueOutOfRange` with the offending index.
    """
    try:
        arr = np.array(values, dtype=np.float64)
    except ValueError as exc:  # ragged rows
        raise SizeMismatch(f"matrix is not rectangular: {exc}") from None
    if arr.ndim == 1 and arr.size == 0:
        raise EmptyMatrix("similarity matrix is empty")
    if arr.ndim != 2:
        raise SizeMismatch(f"expected a 2-D matrix, got {arr.ndim} dimension(s)")
    if arr.size == 0:
        raise EmptyMatrix("similarity matrix is empty")
    bad = ~np.isfinite(arr) | (arr < -CLAMP_TOL) | (arr > 1.0 + CLAMP_TOL)
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueOutOfRange(idx, float(arr[idx]))
    return SimilarityMatrix(np.clip(arr, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Dense M x N database-vs-query similarities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise EmptyMatrix("similarity matrix must be a non-empty 2-D array")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueOutOfRange(tuple(int(x) for x in np.argwhere(~((v >= 0) & (v <= 1)))[0]),
                                  float(v[~((v >= 0) & (v <= 1))][0]))
        object.__setattr__(self, "values", _frozen(v))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        return isinstance(other, SimilarityMatrix) and np.array_equal(self.values, other.values)


class IntraKind(str, enum.Enum):
    FROM_POSES = "FromPoses"
    FROM_DESCRIPTORS = "FromDescriptors"


@dataclass(frozen=True, eq=False)
class IntraSetSimilarities:
    """Symmetric within-set similarity matrix with unit diagonal."""

    values: np.ndarray
    kind: IntraKind = IntraKind.FROM_DESCRIPTORS

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.size == 0:
            raise SizeMismatch(f"intra-set similarities must be square, got {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            idx = tuple(int(x) for x in np.argwhere(~((v >= 0) & (v <= 1)))[0])
            raise ValueOutOfRange(idx, float(v[idx]))
        if not np.array_equal(v, v.T):
            raise InvalidParams("intra-set similarities must be symmetric")
        if not np.all(np.diag(v) == 1.0):
            raise InvalidParams("intra-set similarities must have a unit diagonal")
        kind = IntraKind(self.kind)
        if kind is IntraKind.FROM_POSES and not np.all((v == 0.0) | (v == 1.0)):
            raise InvalidParams("pose-derived intra-set similarities must be binary")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def restrict(self, lo: int, hi: int) -> "IntraSetSimilarities":
        return IntraSetSimilarities(self.values[lo:hi, lo:hi], self.kind)


class ExclusionVariant(str, enum.Enum):
    PRODUCT = "Product"
    MIN = "Min"
    SOFT_AND = "SoftAnd"


@dataclass(frozen=True)
class FactorWeights:
    """Per-family weights. Defaults: pose-derived database, descriptor-derived query."""

    db_loop: float = 4.0
    db_exclusion: float = 40.0
    q_loop: float = 1.0
    q_exclusion: float = 20.0
    seq: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            w = getattr(self, f.name)
            if not (np.isfinite(w) and w >= 0):
                raise InvalidParams(f"weight {f.name} must be >= 0, got {w}")

    @classmethod
    def for_sources(cls, db_from_poses: bool = True, seq: float = 10.0) -> "FactorWeights":
        """Fixed parameter set: 4/40 for pose-derived, 1/20 for descriptor-derived sets."""
        if db_from_poses:
            return cls(4.0, 40.0, 1.0, 20.0, seq)
        return cls(1.0, 20.0, 1.0, 20.0, seq)


DEFAULT_VELOCITIES = (0.6, 0.8, 1.0, 1.25, 1.67)


@dataclass(frozen=True)
class SequenceConfig:
    length: int = 11
    velocities: tuple[float, ...] = DEFAULT_VELOCITIES

    def __post_init__(self):
        if int(self.length) != self.length or self.length < 3 or self.length % 2 == 0:
            raise InvalidParams(f"sequence length must be odd and >= 3, got {self.length}")
        vel = tuple(float(v) for v in self.velocities)
        if not vel or any(not (np.isfinite(v) and v > 0) for v in vel):
            raise InvalidParams(f"velocities must be non-empty and positive, got {vel}")
        object.__setattr__(self, "length", int(self.length))
        object.__setattr__(self, "velocities", tuple(sorted(set(vel))))

    @property
    def half(self) -> int:
        return (self.length - 1) // 2


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 100
    function_tolerance: float = 1e-8
    step_tolerance: float = 1e-8
    initial_damping: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidParams("max_iterations must be >= 1")
        if not (self.function_tolerance > 0 and self.step_tolerance > 0):
            raise InvalidParams("tolerances must be > 0")
        if not self.initial_damping > 0:
            raise InvalidParams("initial_damping must be > 0")


@dataclass(frozen=True)
class ProblemSpec:
    """Full parameterization of one optimization run.

    The sequence family is active only when ``seq`` is set *and*
    ``weights.seq > 0``; the binary families are active when the matching
    intra-set input is supplied and its weights are non-zero.
    """

    weights: FactorWeights = field(default_factory=FactorWeights)
    seq: SequenceConfig | None = field(default_factory=SequenceConfig)
    patch_max: int = 500
    exclusion_variant: ExclusionVariant = ExclusionVariant.PRODUCT
    solver: SolverSettings = field(default_factory=SolverSettings)
    factor_threshold: float = 0.0

    def __post_init__(self):
        if int(self.patch_max) != self.patch_max or self.patch_max < 1:
            raise InvalidParams(f"patch_max must be a positive integer, got {self.patch_max}")
        if not (0.0 <= self.factor_threshold < 1.0):
            raise InvalidParams(f"factor_threshold must lie in [0, 1), got {self.factor_threshold}")
        object.__setattr__(self, "exclusion_variant", ExclusionVariant(self.exclusion_variant))

    @classmethod
    def prior_only(cls, **kw) -> "ProblemSpec":
        return cls(weights=FactorWeights(0, 0, 0, 0, 0), seq=None, **kw)

    def with_weights(self, **kw) -> "ProblemSpec":
        return replace(self, weights=replace(self.weights, **kw))

    # JSON layout mirrors the dotted key names used on the command line.
    def to_dict(self) -> dict[str, Any]:
        w = self.weights
        return {
            "weights": {"db_loop": w.db_loop, "db_exclusion": w.db_exclusion,
                        "q_loop": w.q_loop, "q_exclusion": w.q_exclusion, "seq": w.seq},
            "seq": None if self.seq is None else {
                "length": self.seq.length, "velocities": list(self.seq.velocities)},
            "patch_max": self.patch_max,
            "exclusion_variant": self.exclusion_variant.value,
            "solver": {"max_iterations": self.solver.max_iterations,
                       "ftol": self.solver.function_tolerance,
                       "xtol": self.solver.step_tolerance},
            "factor_threshold": self.factor_threshold,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProblemSpec":
        known = {"weights", "seq", "patch_max", "exclusion_variant", "solver", "factor_threshold"}
        unknown = set(d) - known
        if unknown:
            raise InvalidParams(f"unknown ProblemSpec keys: {sorted(unknown)}")
        base = cls()
        weights = replace(base.weights, **dict(d.get("weights") or {}))
        seq = base.seq
        if "seq" in d:
            if d["seq"] is None:
                seq = None
            else:
                s = d["seq"]
                seq = SequenceConfig(
                    length=s.get("length", SequenceConfig.length),
                    velocities=tuple(s.get("velocities", DEFAULT_VELOCITIES)),
                )
        sd = dict(d.get("solver") or {})
        solver = SolverSettings(
            max_iterations=int(sd.get("max_iterations", base.solver.max_iterations)),
            function_tolerance=float(sd.get("ftol", base.solver.function_tolerance)),
            step_tolerance=float(sd.get("xtol", base.solver.step_tolerance)),
        )
        try:
            return cls(
                weights=weights,
                seq=seq,
                patch_max=int(d.get("patch_max", base.patch_max)),
                exclusion_variant=ExclusionVariant(d.get("exclusion_variant", base.exclusion_variant)),
                solver=solver,
                factor_threshold=float(d.get("factor_threshold", base.factor_threshold)),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidParams(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ProblemSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
