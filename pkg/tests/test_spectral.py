import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from xmhash.spectral import (SpectralError, correlation_objective, fix_signs, init_embeddings, procrustes,
                             smallest_positive_eigenpairs)


def _random_laplacian(N, rng, density=0.5):
    W = rng.random((N, N)) * (rng.random((N, N)) < density)
    W = np.triu(W, 1)
    W = W + W.T
    # connect a ring so the graph has one component
    for i in range(N):
        W[i, (i + 1) % N] = W[(i + 1) % N, i] = max(W[i, (i + 1) % N], 0.1)
    W /= W.sum(1).max()
    A = W + np.diag(1.0 - W.sum(1))
    return np.diag(A.sum(1)) - A


def test_centering_matrix_spectrum():
    N = 7
    Lap = np.eye(N) - np.ones((N, N)) / N
    vals, E = smallest_positive_eigenpairs(Lap, 3)
    np.testing.assert_allclose(vals, 1.0, atol=1e-12)
    np.testing.assert_allclose(E.T @ E, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(E.sum(0), 0.0, atol=1e-12)


def test_two_block_graph_discards_both_zeros():
    # two disconnected triangles of centering graphs: spectrum {0, 0, 1.5 x 4}
    blk = np.eye(3) - np.ones((3, 3)) / 3
    Lap = np.zeros((6, 6))
    Lap[:3, :3] = Lap[3:, 3:] = 1.5 * blk
    vals, E = smallest_positive_eigenpairs(Lap, 1)
    ref = np.linalg.eigvalsh(Lap)
    assert np.sum(np.abs(ref) < 1e-12) == 2
    assert vals[0] == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(Lap @ E[:, 0], vals[0] * E[:, 0], atol=1e-12)


def test_analytic_six_node_spectrum():
    # 0, 0, 1, 1, 1, 1
    blk = np.eye(3) - np.ones((3, 3)) / 3
    Lap = np.kron(np.eye(2), blk)
    vals, _ = smallest_positive_eigenpairs(Lap, 4)
    np.testing.assert_allclose(vals, [1, 1, 1, 1], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_eigenpair_residuals(seed):
    rng = np.random.default_rng(seed)
    Lap = _random_laplacian(20, rng)
    vals, E = smallest_positive_eigenpairs(Lap, 5)
    assert np.all(np.diff(vals) >= 0)
    for lam, e in zip(vals, E.T):
        assert np.abs(Lap @ e - lam * e).max() < 1e-7


def test_too_few_positive_eigenvalues_names_deficit():
    blk = np.eye(2) - 0.5
    Lap = np.kron(np.eye(3), blk)  # 3 components of 2 nodes: 3 positive eigenvalues
    with pytest.raises(SpectralError, match="short by 1"):
        smallest_positive_eigenpairs(Lap, 4)


def test_asymmetric_rejected():
    with pytest.raises(SpectralError, match="symmetric"):
        smallest_positive_eigenpairs(np.array([[1.0, 0.5], [0.0, 1.0]]), 1)


def test_sign_convention():
    E = np.array([[0.1, -0.9], [-0.8, 0.2]])
    F = fix_signs(E)
    assert F[1, 0] == 0.8 and F[1, 1] == -0.2 and F[0, 1] == 0.9


# --------------------------------------------------------------- procrustes


def test_procrustes_identity():
    R = procrustes(np.eye(4))
    np.testing.assert_allclose(R, np.eye(4), atol=1e-14)


def test_procrustes_spd_diagonal():
    R = procrustes(np.diag([2.0, 3.0]))
    np.testing.assert_allclose(R, np.eye(2), atol=1e-14)
    assert np.trace(np.diag([2.0, 3.0]) @ R) == pytest.approx(5.0)


def test_procrustes_transposed_rotation():
    th = np.pi / 4
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    R = procrustes(rot.T)
    np.testing.assert_allclose(R, rot, atol=1e-14)
    assert np.trace(rot.T @ R) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 6), seed=st.integers(0, 2 ** 31))
def test_procrustes_dominates_random_rotations(L, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((L, L))
    R = procrustes(M)
    np.testing.assert_allclose(R.T @ R, np.eye(L), atol=1e-10)
    best = np.trace(M @ R)
    assert best == pytest.approx(np.linalg.svd(M, compute_uv=False).sum(), abs=1e-8)
    for _ in range(100):
        Q = ortho_group.rvs(L, random_state=rng) if L > 1 else np.array([[rng.choice([-1.0, 1.0])]])
        assert best >= np.trace(M @ Q) - 1e-9


# ----------------------------------------------------------- initialization


def test_single_modality_has_no_rotation():
    rng = np.random.default_rng(0)
    Lap = _random_laplacian(15, rng)
    embs, rot = init_embeddings([Lap], 3)
    _, E = smallest_positive_eigenpairs(Lap, 3)
    np.testing.assert_allclose(embs[0].Y, np.sqrt(15) * E, atol=1e-12)
    np.testing.assert_array_equal(rot.rotations[0], np.eye(3))
    assert rot.rounds == 0


def test_duplicated_modality_aligns():
    rng = np.random.default_rng(1)
    Lap = _random_laplacian(25, rng)
    N, L = 25, 4
    embs, rot = init_embeddings([Lap, Lap.copy()], L)
    corr = np.trace(embs[0].Y.T @ embs[1].Y)
    assert corr == pytest.approx(N * L, abs=1e-6 * N * L)


@pytest.mark.parametrize("seed", range(5))
def test_alignment_history_is_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    laps = [_random_laplacian(20, rng) for _ in range(3)]
    embs, rot = init_embeddings(laps, 3)
    h = np.array(rot.history)
    assert np.all(np.diff(h) >= -1e-9)
    # each pair correlation is at most |Y^m|_F |Y^t|_F = N L
    assert h[-1] <= 3 * 2 * 20 * 3 + 1e-9
    assert rot.alignment_objective == pytest.approx(correlation_objective([e.Y for e in embs]))
    for e in embs:
        assert e.orthogonality_residual < 1e-9
