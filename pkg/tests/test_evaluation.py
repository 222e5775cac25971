import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vprgraph.evaluation import (
    GroundTruthMatrix,
    Mode,
    ScenarioParams,
    average_precision,
    generate_scenario,
    graph_for_mode,
    ground_truth_from_poses,
    precision_recall_curve,
    run_experiment,
)
from vprgraph.factors import FactorKind
from vprgraph.pipeline import PoseTrack, pairwise_similarities
from vprgraph.simcore import DimensionMismatch, InvalidParams, NoPositives, ProblemSpec, SimilarityMatrix


def brute_ap(scores, labels):
    """Sort (score desc, index asc) with plain Python and average precision@rank over positives.

    The precisions are summed exactly, so the result does not depend on summation order.
    """
    items = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    hits, precisions = 0, []
    for rank, k in enumerate(items, start=1):
        if labels[k]:
            hits += 1
            precisions.append(hits / rank)
    return math.fsum(precisions) / hits


def test_ap_worked_example():
    S = SimilarityMatrix([[0.9, 0.8, 0.7, 0.6]])
    gt = GroundTruthMatrix([[1, 0, 1, 0]])
    assert average_precision(S, gt) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)


def test_ap_all_positive():
    rng = np.random.default_rng(0)
    assert average_precision(SimilarityMatrix(rng.random((3, 4))), GroundTruthMatrix(np.ones((3, 4)))) == 1.0


def test_ap_perfect_separation():
    gt = np.array([[1, 0, 0], [0, 1, 1]])
    S = np.where(gt == 1, 0.9, 0.1)
    assert average_precision(SimilarityMatrix(S), GroundTruthMatrix(gt)) == 1.0


def test_ap_ties_broken_by_flat_index():
    S = SimilarityMatrix(np.full((1, 2), 0.5))
    assert average_precision(S, GroundTruthMatrix([[0, 1]])) == 0.5
    assert average_precision(S, GroundTruthMatrix([[1, 0]])) == 1.0


def test_ap_no_positives():
    with pytest.raises(NoPositives):
        average_precision(SimilarityMatrix([[0.5]]), GroundTruthMatrix([[0]]))


def test_ap_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        average_precision(SimilarityMatrix([[0.5, 0.2]]), GroundTruthMatrix([[1]]))


def test_ground_truth_rejects_non_binary():
    with pytest.raises(InvalidParams):
        GroundTruthMatrix([[2]])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31), st.booleans())
def test_ap_matches_brute_force(M, N, seed, coarse):
    rng = np.random.default_rng(seed)
    S = rng.random((M, N))
    if coarse:
        S = np.round(S, 1)  # many ties
    gt = (rng.random((M, N)) < 0.3).astype(int)
    gt.flat[rng.integers(M * N)] = 1
    ref = brute_ap(S.ravel().tolist(), gt.ravel().tolist())
    assert average_precision(SimilarityMatrix(S), GroundTruthMatrix(gt)) == ref


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_ap_invariant_under_monotone_transform(M, N, seed):
    rng = np.random.default_rng(seed)
    S = rng.random((M, N))
    gt = (rng.random((M, N)) < 0.5).astype(int)
    gt[0, 0] = 1
    a = average_precision(SimilarityMatrix(S), GroundTruthMatrix(gt))
    b = average_precision(SimilarityMatrix(S ** 3), GroundTruthMatrix(gt))
    assert a == b


def test_pr_curve_endpoints():
    S = SimilarityMatrix([[0.9, 0.8, 0.7, 0.6]])
    recall, precision = precision_recall_curve(S, GroundTruthMatrix([[1, 0, 1, 0]]))
    assert recall.tolist() == [0.5, 0.5, 1.0, 1.0]
    assert precision.tolist() == [1.0, 0.5, 2 / 3, 0.5]


def test_ground_truth_from_poses_example():
    db = PoseTrack([[0, 0], [0, 3], [0, 10]])
    q = PoseTrack([[0, 1], [0, 9]])
    gt = ground_truth_from_poses(db, q, 2.0)
    assert gt.values.tolist() == [[1, 0], [1, 0], [0, 1]]


def test_scenario_deterministic():
    a = generate_scenario(ScenarioParams(places=30), seed=5)
    b = generate_scenario(ScenarioParams(places=30), seed=5)
    assert np.array_equal(a.db_descriptors.vectors, b.db_descriptors.vectors)
    assert np.array_equal(a.q_poses.positions, b.q_poses.positions)
    assert np.array_equal(a.ground_truth.values, b.ground_truth.values)


def test_scenario_shapes_and_revisits():
    s = generate_scenario(ScenarioParams(places=40, loop_segments=1), seed=2)
    assert s.db_descriptors.count == s.db_poses.count > 40
    assert s.q_descriptors.count == s.q_poses.count
    assert s.ground_truth.shape == (s.db_poses.count, s.q_poses.count)
    # every query frame lies on the mapped route, so each has a true match
    assert np.all(s.ground_truth.values.any(axis=0))


@pytest.mark.parametrize("seed", range(5))
def test_noise_free_argmax_hits_ground_truth(seed):
    s = generate_scenario(ScenarioParams(noise=0.0), seed=seed)
    S = pairwise_similarities(s.db_descriptors, s.q_descriptors).values
    best = S.argmax(axis=0)
    assert np.all(s.ground_truth.values[best, np.arange(S.shape[1])] == 1)


def test_identical_noise_free_tracks_are_perfect():
    s = generate_scenario(ScenarioParams(places=30, noise=0.0, loop_segments=0, stop_segments=0), seed=4)
    S = pairwise_similarities(s.db_descriptors, s.db_descriptors)
    gt = GroundTruthMatrix(np.eye(s.db_poses.count))
    assert average_precision(S, gt) == 1.0


@pytest.mark.parametrize("kw", [{"places": 1}, {"noise": -1.0}, {"radius": 0.0}, {"dim": 0},
                                {"speed_range": (1.2, 0.8)}])
def test_scenario_params_rejected(kw):
    with pytest.raises(InvalidParams):
        generate_scenario(ScenarioParams(**kw))


def test_pairwise_mode_leaves_inputs_untouched():
    s = generate_scenario(ScenarioParams(places=25), seed=1)
    before = s.db_descriptors.vectors.copy()
    r = run_experiment(s, ProblemSpec(), Mode.PAIRWISE)
    assert r.ap == r.ap_pairwise
    assert np.array_equal(before, s.db_descriptors.vectors)
    r2 = run_experiment(s, ProblemSpec(), Mode.PAIRWISE, standardized=True)
    assert r2.label == "Std+Pairwise"


def test_intra_db_without_revisits_has_no_active_loops():
    s = generate_scenario(ScenarioParams(places=25, loop_segments=0), seed=1)
    g = graph_for_mode(s, ProblemSpec(), Mode.INTRA_DB, radius=0.5)
    fam = g.families[0]
    assert not fam.loop.any()
    assert fam.excl.any()
    assert g.seq_ops is None and len(g.families) == 1


def test_mode_factor_counts():
    s = generate_scenario(ScenarioParams(places=20), seed=2)
    M, N = s.ground_truth.shape
    r = run_experiment(s, ProblemSpec(), Mode.INTRA_DBQ_SEQ)
    assert r.factor_counts[FactorKind.PRIOR.value] == M * N
    assert r.factor_counts[FactorKind.SEQUENCE.value] == M * N
    assert r.factor_counts[FactorKind.Q_EXCLUSION.value] > 0
    r = run_experiment(s, ProblemSpec(), Mode.INTRA_DB)
    assert r.factor_counts.get(FactorKind.SEQUENCE.value, 0) == 0
    assert r.factor_counts.get(FactorKind.Q_LOOP.value, 0) == 0


def test_report_serializes():
    s = generate_scenario(ScenarioParams(places=20), seed=2)
    d = run_experiment(s, ProblemSpec(), "SeqSLAMOnly").to_dict()
    assert d["label"] == "SeqSLAMOnly"
    assert 0 <= d["ap"] <= 1
