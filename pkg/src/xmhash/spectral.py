"""Spectral embeddings: dense eigensolver, orthogonal Procrustes, Y initialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SpectralError(ValueError):
    pass


def fix_signs(E) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    E = np.array(E, dtype=np.float64, copy=True)
    if E.size == 0:
        return E
    piv = np.argmax(np.abs(E), axis=0)
    signs = np.sign(E[piv, np.arange(E.shape[1])])
    signs[signs == 0] = 1.0
    return E * signs


def smallest_positive_eigenpairs(Lap, L, zero_tol=None):
    """The L eigenpairs following the (numerically) zero eigenvalues of ``Lap``.

    Parameters
    ----------
    Lap : (N, N) symmetric PSD array
    L : int
        Number of eigenpairs to return.
    zero_tol : float, optional
        Eigenvalues at or below this count as zero.  Defaults to
        ``1e-8 * max eigenvalue``.

    Returns
    -------
    vals : (L,) ascending eigenvalues
    E : (N, L) orthonormal eigenvectors, sign-normalized
    """
    Lap = np.asarray(Lap, dtype=np.float64)
    N = Lap.shape[0]
    if Lap.shape != (N, N):
        raise SpectralError(f"Laplacian must be square, got {Lap.shape}")
    if not 1 <= L <= N - 1:
        raise SpectralError(f"need 1 <= L <= N-1, got L={L}, N={N}")
    if np.abs(Lap - Lap.T).max() > 1e-8:
        raise SpectralError("Laplacian is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (Lap + Lap.T))
    top = vals[-1]
    if zero_tol is None:
        zero_tol = 1e-8 * max(top, 0.0)
    first = int(np.searchsorted(vals, zero_tol, side="right"))
    available = N - first
    if available < L:
        raise SpectralError(
            f"only {available} positive eigenvalues, {L} requested (short by {L - available}); "
            "the graph has too many connected components"
        )
    return vals[first:first + L], fix_signs(vecs[:, first:first + L])


def procrustes(M):
    """Orthogonal ``R`` maximizing ``Tr(M @ R)``.

    With ``M = U S V^T`` the maximizer is ``R = V U^T`` and the maximum is the
    sum of singular values.
    """
    M = np.asarray(M, dtype=np.float64)
    U, _, Vt = np.linalg.svd(M)
    return Vt.T @ U.T


def spectral_objective(Y, Lap) -> float:
    return float(np.einsum("ij,ij->", Y, Lap @ Y))


def correlation_objective(Ys) -> float:
    """Sum over ordered pairs m != t of ``Tr(Y^t^T Y^m)``."""
    total = np.sum(Ys, axis=0)
    return float((total * total).sum() - sum((Y * Y).sum() for Y in Ys))


@dataclass
class SpectralEmbedding:
    Y: np.ndarray
    eigenvalues: np.ndarray

    @property
    def orthogonality_residual(self) -> float:
        N, L = self.Y.shape
        return float(np.linalg.norm(self.Y.T @ self.Y - N * np.eye(L)))


@dataclass
class RotationSet:
    rotations: list
    alignment_objective: float
    history: list = field(default_factory=list)
    rounds: int = 0


def init_embeddings(laplacians, L, max_rounds=50, tol=None):
    """Per-modality spectral embeddings rotated into mutual alignment.

    Each ``Y_hat^m = sqrt(N) E_L^m``; rotations are then updated one modality at
    a time by Procrustes against the sum of the other rotated embeddings.  The
    loop stops when a full round improves the pairwise correlation by less
    than ``tol`` (default ``1e-7 * N * L``).

    ``RotationSet.history`` holds the objective after every single rotation
    update (first entry: all rotations at identity).
    """
    hats, vals = [], []
    for Lap in laplacians:
        N = Lap.shape[0]
        lam, E = smallest_positive_eigenpairs(Lap, L)
        hats.append(np.sqrt(N) * E)
        vals.append(lam)
    M = len(hats)
    N = hats[0].shape[0]
    if tol is None:
        tol = 1e-7 * N * L
    Rs = [np.eye(L) for _ in range(M)]
    rotated = [h.copy() for h in hats]
    obj = correlation_objective(rotated)
    history = [obj]
    rounds = 0
    if M > 1:
        for rounds in range(1, max_rounds + 1):
            start = obj
            for m in range(M):
                star = sum(rotated[t] for t in range(M) if t != m)
                Rs[m] = procrustes(star.T @ hats[m])
                rotated[m] = hats[m] @ Rs[m]
                obj = correlation_objective(rotated)
                history.append(obj)
            if obj - start < tol:
                break
    embeddings = [SpectralEmbedding(Y, lam) for Y, lam in zip(rotated, vals)]
    return embeddings, RotationSet(Rs, obj, history, rounds)
