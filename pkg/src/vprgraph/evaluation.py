"""Ground truth, average precision, synthetic scenarios and the experiment grid."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .graph import build_graph, optimize_patched
from .pipeline import (
    DescriptorSet,
    PoseTrack,
    intra_from_descriptors,
    intra_from_poses,
    pairwise_similarities,
    seqslam_postprocess,
    standardize,
)
from .simcore import (
    DimensionMismatch,
    InvalidParams,
    NoPositives,
    ProblemSpec,
    SequenceConfig,
    SimilarityMatrix,
)


@dataclass(frozen=True, eq=False)
class GroundTruthMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values)
        if v.ndim != 2 or v.size == 0:
            raise InvalidParams(f"ground truth must be a non-empty 2-D array, got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise InvalidParams("ground truth entries must be 0 or 1")
        v = v.astype(np.int8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _ranked_labels(S: SimilarityMatrix, gt: GroundTruthMatrix) -> np.ndarray:
    if S.shape != gt.shape:
        raise DimensionMismatch(f"scores {S.shape} vs ground truth {gt.shape}")
    scores = S.values.ravel()
    labels = gt.values.ravel()
    if not labels.any():
        raise NoPositives("ground truth has no positive entries")
    # descending score, ties by flat (row-major) index ascending
    order = np.lexsort((np.arange(scores.size), -scores))
    return labels[order].astype(np.int64)


def average_precision(S: SimilarityMatrix, gt: GroundTruthMatrix) -> float:
    """Mean of precision@rank over the ranks of all positives."""
    ranked = _ranked_labels(S, gt)
    tp = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    precisions = (tp[ranks - 1] / ranks).tolist()
    return math.fsum(precisions) / len(precisions)


def precision_recall_curve(S: SimilarityMatrix, gt: GroundTruthMatrix) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) after each rank of the deterministic ordering."""
    ranked = _ranked_labels(S, gt)
    tp = np.cumsum(ranked)
    k = np.arange(1, ranked.size + 1)
    return tp / tp[-1], tp / k


def ground_truth_from_poses(db: PoseTrack, q: PoseTrack, radius: float) -> GroundTruthMatrix:
    if not radius > 0:
        raise InvalidParams(f"radius must be > 0, got {radius}")
    d = np.sqrt(((db.positions[:, None, :] - q.positions[None, :, :]) ** 2).sum(axis=-1))
    return GroundTruthMatrix((d <= radius).astype(np.int8))


# --- synthetic scenarios -----------------------------------------------------------

@dataclass(frozen=True)
class ScenarioParams:
    """Generation knobs for a desk-scale database/query pair.

    Places are 1 m apart along a smooth random path. The database drives
    the path once and re-drives ``loop_segments`` sub-paths; the query drives
    it at varying speed with ``stop_segments`` stops and its own loops.
    """

    places: int = 50
    loop_segments: int = 1
    stop_segments: int = 2
    dim: int = 64
    condition_shift: float = 0.0
    noise: float = 1.7
    radius: float = 1.5
    latent_smoothing: float = 1.0
    speed_range: tuple[float, float] = (0.8, 1.25)

    def validate(self) -> None:
        if self.places < 2:
            raise InvalidParams(f"places must be >= 2, got {self.places}")
        if self.dim < 4:
            raise InvalidParams(f"dim must be >= 4, got {self.dim}")
        if self.noise < 0 or self.condition_shift < 0:
            raise InvalidParams("noise and condition_shift must be >= 0")
        if self.loop_segments < 0 or self.stop_segments < 0:
            raise InvalidParams("segment counts must be >= 0")
        if not self.radius > 0:
            raise InvalidParams("radius must be > 0")
        lo, hi = self.speed_range
        if not (0 < lo <= hi):
            raise InvalidParams(f"bad speed_range {self.speed_range}")


@dataclass(frozen=True, eq=False)
class SyntheticScenario:
    params: ScenarioParams
    seed: int
    db_poses: PoseTrack
    q_poses: PoseTrack
    db_descriptors: DescriptorSet
    q_descriptors: DescriptorSet
    ground_truth: GroundTruthMatrix
    db_arclength: np.ndarray = field(repr=False, default=None)
    q_arclength: np.ndarray = field(repr=False, default=None)


def _path(places: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth planar path sampled every 1 m; heading follows a damped random walk."""
    turn = np.convolve(rng.normal(0.0, 0.25, places + 8), np.ones(5) / 5, mode="same")[:places]
    heading = np.cumsum(turn)
    steps = np.stack([np.cos(heading), np.sin(heading)], axis=1)
    return np.vstack([[0.0, 0.0], np.cumsum(steps[:-1], axis=0)])


def _interp(table: np.ndarray, u: np.ndarray) -> np.ndarray:
    lo = np.clip(np.floor(u).astype(int), 0, len(table) - 1)
    hi = np.clip(lo + 1, 0, len(table) - 1)
    t = (u - lo)[:, None]
    return (1 - t) * table[lo] + t * table[hi]


def _loop_span(places: int, rng: np.random.Generator) -> tuple[float, float]:
    length = max(2, places // 5)
    start = rng.integers(0, max(1, places - length))
    return float(start), float(min(places - 1, start + length))


def generate_scenario(params: ScenarioParams = ScenarioParams(), seed: int = 0) -> SyntheticScenario:
    params.validate()
    rng = np.random.default_rng(seed)
    P = params.places
    path = _path(P, rng)

    # latent appearance: smoothed white noise along the path, unit RMS per entry
    raw = rng.normal(size=(P, params.dim))
    if params.latent_smoothing > 0:
        k = np.arange(-4, 5)
        w = np.exp(-0.5 * (k / params.latent_smoothing) ** 2)
        padded = np.pad(raw, ((4, 4), (0, 0)), mode="edge")
        raw = np.stack([np.convolve(padded[:, c], w / w.sum(), mode="valid") for c in range(params.dim)],
                       axis=1)
    latent = raw / raw.std(axis=0, keepdims=True)

    # database: one pass, then re-drive loop sub-paths
    db_u = [np.arange(P, dtype=float)]
    for _ in range(params.loop_segments):
        a, b = _loop_span(P, rng)
        db_u.append(np.arange(a, b + 0.5))
    db_u = np.concatenate(db_u)

    # query: piecewise-constant speed, stops, and loops
    lo, hi = params.speed_range
    stops = set(rng.choice(np.arange(2, P - 2), size=min(params.stop_segments, max(0, P - 4)),
                           replace=False).tolist()) if P > 4 else set()
    q_u, u, speed = [], 0.0, rng.uniform(lo, hi)
    while u <= P - 1:
        q_u.append(u)
        place = int(u)
        if place in stops:
            stops.discard(place)
            q_u.extend([u] * int(rng.integers(3, 6)))
        if rng.random() < 0.1:
            speed = rng.uniform(lo, hi)
        u += speed
    for _ in range(params.loop_segments):
        a, b = _loop_span(P, rng)
        q_u.extend(np.arange(a, b + 0.5, rng.uniform(lo, hi)).tolist())
    q_u = np.asarray(q_u)

    def observe(u_arr, jitter):
        pos = _interp(path, u_arr) + rng.normal(0.0, jitter, (u_arr.size, 2))
        shift = rng.normal(size=params.dim)
        shift *= params.condition_shift * math.sqrt(params.dim) / np.linalg.norm(shift)
        desc = _interp(latent, u_arr) + shift + params.noise * rng.normal(size=(u_arr.size, params.dim))
        return PoseTrack(pos), DescriptorSet(desc)

    db_poses, db_desc = observe(db_u, 0.05)
    q_poses, q_desc = observe(q_u, 0.05)
    gt = ground_truth_from_poses(db_poses, q_poses, params.radius)
    return SyntheticScenario(params, seed, db_poses, q_poses, db_desc, q_desc, gt, db_u, q_u)


# --- experiment grid ---------------------------------------------------------------

class Mode(str, enum.Enum):
    PAIRWISE = "Pairwise"
    INTRA_DB = "IntraDB"
    INTRA_DBQ = "IntraDBQ"
    INTRA_DBQ_SEQ = "IntraDBQSeq"
    SEQSLAM_ONLY = "SeqSLAMOnly"


@dataclass
class ExperimentReport:
    mode: str
    standardized: bool
    ap_pairwise: float
    ap: float
    factor_counts: dict = field(default_factory=dict)
    iterations: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return ("Std+" if self.standardized else "") + self.mode

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label
        return d


def run_experiment(scenario: SyntheticScenario, spec: ProblemSpec, mode: Mode | str,
                   standardized: bool = False, db_source: str = "poses",
                   radius: float | None = None) -> ExperimentReport:
    """Run one configuration of the grid on a scenario.

    The intra-query input always comes from query descriptors. ``db_source``
    picks pose-derived (binary) or descriptor-derived intra-database input.
    Inputs are never modified.
    """
    mode = Mode(mode)
    radius = scenario.params.radius if radius is None else radius
    timings = {}
    t0 = time.perf_counter()
    db, q = scenario.db_descriptors, scenario.q_descriptors
    if standardized:
        db, q = standardize(db, q)
    S_hat = pairwise_similarities(db, q)
    timings["similarities"] = time.perf_counter() - t0
    gt = scenario.ground_truth
    ap0 = average_precision(S_hat, gt)
    report = ExperimentReport(mode.value, standardized, ap0, ap0, timings=timings)
    if mode is Mode.PAIRWISE:
        return report
    if mode is Mode.SEQSLAM_ONLY:
        t0 = time.perf_counter()
        out = seqslam_postprocess(S_hat, spec.seq or SequenceConfig())
        timings["postprocess"] = time.perf_counter() - t0
        report.ap = average_precision(out, gt)
        return report

    t0 = time.perf_counter()
    if db_source == "poses":
        intra_db = intra_from_poses(scenario.db_poses, radius)
    elif db_source == "descriptors":
        intra_db = intra_from_descriptors(db)
    else:
        raise InvalidParams(f"unknown db_source {db_source!r}")
    intra_q = intra_from_descriptors(q) if mode in (Mode.INTRA_DBQ, Mode.INTRA_DBQ_SEQ) else None
    run_spec = spec if mode is Mode.INTRA_DBQ_SEQ else replace(spec, seq=None)
    if mode is Mode.INTRA_DBQ_SEQ and run_spec.seq is None:
        run_spec = replace(run_spec, seq=SequenceConfig())
    timings["intra"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    solves = []
    out = optimize_patched(S_hat, intra_db, intra_q, run_spec, reports=solves)
    timings["optimize"] = time.perf_counter() - t0
    counts = {}
    for _, _, c in solves:
        for k, v in c.items():
            counts[k.value] = counts.get(k.value, 0) + v
    report.factor_counts = counts
    report.iterations = sum(r.iterations for _, r, _ in solves)
    report.ap = average_precision(out, gt)
    return report


def graph_for_mode(scenario: SyntheticScenario, spec: ProblemSpec, mode: Mode | str,
                   radius: float | None = None):
    """The (unpatched) factor graph a mode would build; for inspection."""
    mode = Mode(mode)
    radius = scenario.params.radius if radius is None else radius
    S_hat = pairwise_similarities(scenario.db_descriptors, scenario.q_descriptors)
    intra_db = intra_from_poses(scenario.db_poses, radius)
    intra_q = (intra_from_descriptors(scenario.q_descriptors)
               if mode in (Mode.INTRA_DBQ, Mode.INTRA_DBQ_SEQ) else None)
    run_spec = spec if mode is Mode.INTRA_DBQ_SEQ else replace(spec, seq=None)
    return build_graph(S_hat, intra_db, intra_q, run_spec)
