import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vprgraph.factors import SequenceNeighborhood, best_velocity
from vprgraph.pipeline import (
    DescriptorSet,
    PoseTrack,
    intra_from_descriptors,
    intra_from_poses,
    pairwise_similarities,
    seqslam_postprocess,
    standardize,
)
from vprgraph.simcore import (
    DimensionMismatch,
    IntraKind,
    InvalidParams,
    SequenceConfig,
    SimilarityMatrix,
)

finite = st.floats(-100, 100, allow_nan=False)


def test_standardize_two_values():
    db, q = standardize(DescriptorSet([[1.0], [3.0]]), DescriptorSet([[5.0], [5.0]]))
    assert db.vectors.ravel().tolist() == [-1.0, 1.0]
    assert q.vectors.ravel().tolist() == [0.0, 0.0]


def test_standardize_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        standardize(DescriptorSet(np.ones((2, 3))), DescriptorSet(np.ones((2, 4))))


@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)), elements=finite))
def test_standardize_idempotent(a):
    once, _ = standardize(DescriptorSet(a), DescriptorSet(a))
    twice, _ = standardize(once, once)
    assert np.allclose(once.vectors, twice.vectors, atol=1e-9)


@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 5)), elements=finite))
def test_standardized_columns_have_zero_mean(a):
    out, _ = standardize(DescriptorSet(a), DescriptorSet(a))
    assert np.allclose(out.vectors.mean(axis=0), 0.0, atol=1e-9)
    sd = out.vectors.std(axis=0)
    assert np.all(np.isclose(sd, 1.0) | (sd == 0.0))


@settings(deadline=None)
@given(st.integers(3, 12), st.integers(2, 10), st.integers(0, 2**31), st.floats(-50, 50))
def test_standardize_removes_per_set_offset(n, dim, seed, offset):
    # the query is a permuted copy of the database plus a constant shift
    rng = np.random.default_rng(seed)
    db = rng.normal(size=(n, dim))
    perm = rng.permutation(n)
    q = db[perm] + offset + rng.normal(size=dim)
    a, b = standardize(DescriptorSet(db), DescriptorSet(q))
    assert np.allclose(a.vectors[perm], b.vectors, atol=1e-8)
    S = pairwise_similarities(a, b).values
    assert S[perm, np.arange(n)] == pytest.approx(np.ones(n), abs=1e-9)


def test_similarity_examples():
    a = DescriptorSet([[1.0, 0.0]])
    b = DescriptorSet([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])
    assert pairwise_similarities(a, b).values.ravel() == pytest.approx([1.0, 0.5, 0.0])


def test_similarity_zero_vector():
    S = pairwise_similarities(DescriptorSet([[0.0, 0.0]]), DescriptorSet([[1.0, 2.0]]))
    assert S.values[0, 0] == 0.5


def test_similarity_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        pairwise_similarities(DescriptorSet(np.ones((1, 2))), DescriptorSet(np.ones((1, 3))))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=finite))
def test_similarity_in_unit_range(a, b):
    S = pairwise_similarities(DescriptorSet(a), DescriptorSet(b)).values
    assert S.shape == (a.shape[0], b.shape[0])
    assert np.all((S >= 0) & (S <= 1))


def test_intra_from_descriptors_is_valid():
    rng = np.random.default_rng(1)
    I = intra_from_descriptors(DescriptorSet(rng.normal(size=(7, 5))))
    assert I.kind is IntraKind.FROM_DESCRIPTORS
    assert np.array_equal(I.values, I.values.T)
    assert np.all(np.diag(I.values) == 1.0)


def test_intra_from_poses_example():
    I = intra_from_poses(PoseTrack([[0, 0], [0, 3], [0, 10]]), radius=5)
    assert I.values.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    assert I.kind is IntraKind.FROM_POSES


def test_intra_from_poses_rejects_radius():
    with pytest.raises(InvalidParams):
        intra_from_poses(PoseTrack([[0, 0]]), radius=0)


@settings(deadline=None)
@given(st.integers(1, 12), st.floats(0, 2 * np.pi), st.floats(-100, 100), st.floats(-100, 100),
       st.integers(0, 2**31))
def test_intra_from_poses_rigid_invariance(n, angle, tx, ty, seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 20, (n, 2))
    R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    moved = p @ R.T + [tx, ty]
    d = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    # keep away from the boundary where rounding could flip a comparison
    if np.any(np.abs(d - 5.0) < 1e-6):
        return
    a = intra_from_poses(PoseTrack(p), 5.0).values
    b = intra_from_poses(PoseTrack(moved), 5.0).values
    assert np.array_equal(a, b)


def test_pose_track_validation():
    with pytest.raises(InvalidParams):
        PoseTrack([[0, 0, 0]])
    with pytest.raises(InvalidParams):
        DescriptorSet([[np.nan]])


def test_seqslam_uniform_fixed_point():
    S = SimilarityMatrix(np.full((30, 25), 0.37))
    assert np.array_equal(seqslam_postprocess(S).values, S.values)


def test_seqslam_single_cell():
    S = SimilarityMatrix([[0.8]])
    assert seqslam_postprocess(S).values.tolist() == [[0.8]]


def test_seqslam_fills_corrupted_diagonal():
    values = np.eye(20)
    values[10, 10] = 0.0
    out = seqslam_postprocess(SimilarityMatrix(values), SequenceConfig(5, (1.0,))).values
    assert out[10, 10] == pytest.approx(0.8)


def test_seqslam_matches_scalar_best_velocity():
    rng = np.random.default_rng(3)
    values = rng.random((9, 11))
    cfg = SequenceConfig(5, (0.6, 1.0, 1.67))
    out = seqslam_postprocess(SimilarityMatrix(values), cfg).values
    for i in range(9):
        for j in range(11):
            nb = SequenceNeighborhood.build(i, j, 9, 11, 5, cfg.velocities)
            assert out[i, j] == pytest.approx(best_velocity(values, nb)[1], rel=1e-12)


@given(st.integers(1, 10), st.integers(1, 10), st.sampled_from([3, 5, 7]), st.integers(0, 2**31))
def test_seqslam_unit_velocity_commutes_with_transpose(M, N, L, seed):
    rng = np.random.default_rng(seed)
    values = rng.random((M, N))
    cfg = SequenceConfig(L, (1.0,))
    a = seqslam_postprocess(SimilarityMatrix(values), cfg).values
    b = seqslam_postprocess(SimilarityMatrix(values.T), cfg).values
    assert np.allclose(a, b.T, rtol=1e-12, atol=1e-15)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_seqslam_output_within_input_range(M, N, seed):
    rng = np.random.default_rng(seed)
    values = rng.random((M, N))
    out = seqslam_postprocess(SimilarityMatrix(values), SequenceConfig(5)).values
    assert out.min() >= values.min() and out.max() <= values.max()
