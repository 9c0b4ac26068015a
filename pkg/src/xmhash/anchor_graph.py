"""Joint anchors and expanded anchor graphs.

Anchors are learned once on the column-wise concatenation of all (normalized)
modalities and then split back, so anchor ``p`` means the same joint centroid
in every modality.  Each modality then gets

    Z      data-to-anchor kernel weights over the k nearest anchors
    S      anchor-to-anchor weights over reciprocal k_a-nearest anchors (+ self)
    Z_hat  = Z @ S
    A      = Z_hat diag(Z_hat^T 1)^-1 Z_hat^T
    Lap    = D - A   (D = diag(A 1) = I)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist

from .dataset import MultiModalDataset


class GraphError(ValueError):
    pass


def sq_distances(X, Y) -> np.ndarray:
    return cdist(np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64), "sqeuclidean")


def knn_indices(d2, k) -> np.ndarray:
    """Indices of the k smallest entries per row, ties broken by lower index."""
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


# ------------------------------------------------------------------ k-means


def kmeans_pp_init(X, n_clusters, rng) -> np.ndarray:
    """k-means++ seeding.  Returns indices of the chosen rows."""
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    mind = sq_distances(X, X[chosen]).ravel()
    for _ in range(1, n_clusters):
        total = mind.sum()
        if total > 0:
            nxt = int(rng.choice(N, p=mind / total))
        else:
            # every point coincides with a chosen seed: pick an unused row
            free = np.setdiff1d(np.arange(N), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        mind = np.minimum(mind, sq_distances(X, X[nxt:nxt + 1]).ravel())
    return np.array(chosen)


def kmeans(X, n_clusters, seed=0, max_iters=100, tol=1e-6):
    """Lloyd iterations from k-means++ seeds.

    Stops once no centroid moves more than ``tol``.  An empty cluster is
    re-seeded at the point farthest from its centroid (if that distance is
    positive), otherwise left in place.

    Returns
    -------
    centroids : (n_clusters, D) ndarray
    assign : (N,) int ndarray
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    C = X[kmeans_pp_init(X, n_clusters, rng)].copy()
    assign = np.zeros(X.shape[0], dtype=int)
    for _ in range(max_iters):
        d2 = sq_distances(X, C)
        assign = np.argmin(d2, axis=1)
        newC = C.copy()
        counts = np.bincount(assign, minlength=n_clusters)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, X)
        nz = counts > 0
        newC[nz] = sums[nz] / counts[nz, None]
        if not nz.all():
            resid = d2[np.arange(X.shape[0]), assign]
            for c in np.flatnonzero(~nz):
                far = int(np.argmax(resid))
                if resid[far] <= 0:
                    break
                newC[c] = X[far]
                resid[far] = 0.0
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if shift < tol:
            break
    assign = np.argmin(sq_distances(X, C), axis=1)
    return C, assign


# ------------------------------------------------------------------ anchors


@dataclass(frozen=True)
class AnchorSet:
    """Per-modality anchors; row p of every matrix comes from joint centroid p."""

    anchors: tuple

    @property
    def n_anchors(self) -> int:
        return self.anchors[0].shape[0]


def learn_joint_anchors(dataset: MultiModalDataset, P, seed=0, max_iters=100) -> AnchorSet:
    """k-means on the concatenated modalities, centroids split per modality."""
    N = dataset.n_instances
    if N < 1:
        raise GraphError("empty dataset")
    if not 1 <= P <= N:
        raise GraphError(f"anchor count P={P} must satisfy 1 <= P <= N={N}")
    X = np.hstack(dataset.modalities)
    C, _ = kmeans(X, P, seed=seed, max_iters=max_iters)
    cuts = np.cumsum(dataset.dims)[:-1]
    return AnchorSet(tuple(np.split(C, cuts, axis=1)))


# ------------------------------------------------------------------ kernels

Sigma = Union[float, str]


def _resolve_sigma(sigma, neighbor_d2):
    if sigma == "auto":
        s = float(neighbor_d2.mean()) if neighbor_d2.size else 0.0
        # all neighbours coincide: any bandwidth gives the same normalized row
        return s if s > 0 else 1.0
    s = float(sigma)
    if not s > 0:
        raise GraphError(f"kernel bandwidth sigma must be > 0, got {sigma}")
    return s


def data_to_anchor(features, anchors, k, sigma: Sigma = "auto", return_sigma=False):
    """Row-stochastic N x P Gaussian-kernel affinities over the k nearest anchors.

    ``K(x, u) = exp(-||x - u||^2 / sigma)``; with ``sigma="auto"`` the bandwidth
    is the mean squared distance from points to their k nearest anchors.
    """
    P = anchors.shape[0]
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    if k > P:
        raise GraphError(f"k={k} exceeds the anchor count P={P}")
    d2 = sq_distances(features, anchors)
    idx = knn_indices(d2, k)
    near = np.take_along_axis(d2, idx, axis=1)
    s = _resolve_sigma(sigma, near)
    # shifting by the row minimum leaves the normalized weights unchanged
    w = np.exp(-(near - near[:, :1]) / s)
    w /= w.sum(axis=1, keepdims=True)
    Z = np.zeros_like(d2)
    np.put_along_axis(Z, idx, w, axis=1)
    return (Z, s) if return_sigma else Z


def mutual_knn(d2, k_a) -> np.ndarray:
    """Boolean P x P mask of reciprocal k_a-nearest neighbours (self excluded)."""
    P = d2.shape[0]
    mask = np.zeros((P, P), dtype=bool)
    if k_a == 0:
        return mask
    d2 = d2.copy()
    np.fill_diagonal(d2, np.inf)
    idx = knn_indices(d2, k_a)
    np.put_along_axis(mask, idx, True, axis=1)
    return mask & mask.T


def anchor_to_anchor(anchors, k_a, sigma: Sigma = "auto", return_sigma=False):
    """P x P anchor affinities over reciprocal nearest anchors plus the anchor itself.

    An anchor without reciprocal neighbours gets the identity row.  The auto
    bandwidth is the mean squared distance from anchors to their k_a nearest
    other anchors.
    """
    P = anchors.shape[0]
    if k_a < 0:
        raise GraphError(f"k_a must be >= 0, got {k_a}")
    if k_a >= P:
        raise GraphError(f"k_a={k_a} must be smaller than the anchor count P={P}")
    if k_a == 0:
        S = np.eye(P)
        return (S, 1.0) if return_sigma else S
    d2 = sq_distances(anchors, anchors)
    off = d2.copy()
    np.fill_diagonal(off, np.inf)
    near = np.take_along_axis(off, knn_indices(off, k_a), axis=1)
    s = _resolve_sigma(sigma, near)
    keep = mutual_knn(d2, k_a)
    np.fill_diagonal(keep, True)
    S = np.where(keep, np.exp(-d2 / s), 0.0)
    np.fill_diagonal(S, 1.0)
    S /= S.sum(axis=1, keepdims=True)
    return (S, s) if return_sigma else S


# ------------------------------------------------------------------ graph


def affinity_from_expanded(Z_hat) -> np.ndarray:
    """``Z_hat diag(Z_hat^T 1)^-1 Z_hat^T`` with unused anchors contributing nothing."""
    lam = Z_hat.sum(axis=0)
    inv = np.divide(1.0, lam, out=np.zeros_like(lam), where=lam > 0)
    A = (Z_hat * inv) @ Z_hat.T
    return 0.5 * (A + A.T)


def laplacian(A) -> np.ndarray:
    return np.diag(A.sum(axis=1)) - A


@dataclass(frozen=True)
class ModalityGraph:
    Z: np.ndarray
    S: np.ndarray
    Z_hat: np.ndarray
    A: np.ndarray
    Lap: np.ndarray
    sigma: float
    sigma_anchor: float


@dataclass(frozen=True)
class AnchorGraph:
    """Graphs for every modality, built with shared (k, k_a)."""

    modalities: tuple
    k: int
    k_a: int

    @property
    def laplacians(self) -> list:
        return [g.Lap for g in self.modalities]

    @property
    def n_instances(self) -> int:
        return self.modalities[0].Lap.shape[0]


def build_graph(dataset: MultiModalDataset, anchor_set: AnchorSet, k=3, k_a=2,
                sigma: Sigma = "auto", sigma_anchor: Sigma = "auto") -> AnchorGraph:
    if len(anchor_set.anchors) != dataset.n_modalities:
        raise GraphError("anchor set and dataset disagree on the number of modalities")
    graphs = []
    for X, U in zip(dataset.modalities, anchor_set.anchors):
        Z, s = data_to_anchor(X, U, k, sigma, return_sigma=True)
        S, sa = anchor_to_anchor(U, k_a, sigma_anchor, return_sigma=True)
        Z_hat = Z @ S
        A = affinity_from_expanded(Z_hat)
        graphs.append(ModalityGraph(Z, S, Z_hat, A, laplacian(A), s, sa))
    return AnchorGraph(tuple(graphs), k, k_a)
