"""Hamming ranking and retrieval metrics (mAP, precision within a Hamming radius)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def pack_codes(codes) -> np.ndarray:
    """Pack +-1 codes into uint64 words, 64 bits per word; padding bits are zero."""
    bits = np.asarray(codes) > 0
    n, L = bits.shape
    words = (L + 63) // 64
    padded = np.zeros((n, words * 64), dtype=bool)
    padded[:, :L] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").reshape(n, words)


def hamming_distances(queries, database, chunk=1024) -> np.ndarray:
    """Q x N matrix of Hamming distances between +-1 code rows (popcount of XOR)."""
    queries = np.atleast_2d(queries)
    database = np.atleast_2d(database)
    if queries.shape[1] != database.shape[1]:
        raise ValueError(f"code length mismatch: {queries.shape[1]} vs {database.shape[1]}")
    qp, dp = pack_codes(queries), pack_codes(database)
    out = np.empty((qp.shape[0], dp.shape[0]), dtype=np.int64)
    for s in range(0, qp.shape[0], chunk):
        x = qp[s:s + chunk, None, :] ^ dp[None, :, :]
        out[s:s + chunk] = np.bitwise_count(x).sum(axis=2)
    return out


def relevance_from_labels(query_labels, db_labels) -> np.ndarray:
    """Items are relevant when they share at least one label."""
    q = np.asarray(query_labels, dtype=np.int64)
    d = np.asarray(db_labels, dtype=np.int64)
    return (q @ d.T) > 0


def average_precisions(distances, relevance, top_k=None):
    """Per-query AP under a stable (distance, index) ranking.

    Returns the AP array over evaluated queries and the number of skipped
    queries (those with no relevant item).
    """
    D = np.asarray(distances)
    R = np.asarray(relevance, dtype=bool)
    if D.shape != R.shape:
        raise ValueError("distance and relevance matrices differ in shape")
    if D.shape[1] == 0:
        raise ValueError("empty database")
    order = np.argsort(D, axis=1, kind="stable")
    if top_k is not None:
        order = order[:, :top_k]
    rel = np.take_along_axis(R, order, axis=1)
    n_rel = R.sum(axis=1) if top_k is None else rel.sum(axis=1)
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, rel.shape[1] + 1)
    prec_sum = (np.where(rel, hits / ranks, 0.0)).sum(axis=1)
    keep = n_rel > 0
    return prec_sum[keep] / n_rel[keep], int((~keep).sum())


def mean_average_precision(distances, relevance, top_k=None) -> float:
    aps, _ = average_precisions(distances, relevance, top_k)
    return float(aps.mean()) if aps.size else 0.0


def precision_at_radius(distances, relevance, radius=2) -> float:
    """Mean precision among items within ``radius``; empty result counts as 0."""
    D = np.asarray(distances)
    R = np.asarray(relevance, dtype=bool)
    within = D <= radius
    n_in = within.sum(axis=1)
    hits = (within & R).sum(axis=1)
    prec = np.divide(hits, n_in, out=np.zeros(len(D), dtype=np.float64), where=n_in > 0)
    return float(prec.mean())


def random_ranking_map(relevance) -> float:
    """Expected mAP of a uniformly random ranking, from relevant counts alone.

    For R relevant among N items, E[AP] = (H_N + (R-1)(N-H_N)/(N-1)) / N.
    """
    R = np.asarray(relevance, dtype=bool)
    N = R.shape[1]
    r = R.sum(axis=1)
    r = r[r > 0]
    H = float(np.sum(1.0 / np.arange(1, N + 1)))
    if N == 1:
        return 1.0
    return float(np.mean((H + (r - 1) * (N - H) / (N - 1)) / N))


@dataclass
class RetrievalResult:
    query_modality: int
    db_modality: int
    map: float
    prec_at_r2: float
    average_precisions: np.ndarray = field(repr=False)
    num_queries: int = 0
    skipped_queries: int = 0
    names: tuple = ()

    @property
    def task(self) -> str:
        q, d = self.names or (f"m{self.query_modality}", f"m{self.db_modality}")
        return f"{q}->{d}"

    def to_dict(self) -> dict:
        return {"task": self.task, "map": self.map, "prec_at_r2": self.prec_at_r2,
                "num_queries": self.num_queries, "skipped_queries": self.skipped_queries}


def evaluate_codes(query_codes, db_codes, relevance, radius=2, top_k=None, task=(0, 0), names=()):
    D = hamming_distances(query_codes, db_codes)
    aps, skipped = average_precisions(D, relevance, top_k)
    return RetrievalResult(task[0], task[1], float(aps.mean()) if aps.size else 0.0,
                           precision_at_radius(D, relevance, radius), aps,
                           len(query_codes), skipped, names)


def evaluate_all_tasks(models, dataset_query, dataset_db, radius=2, top_k=None):
    """Evaluate every ordered (query modality, database modality) pair."""
    from .hashfn import encode

    if dataset_query.labels is None or dataset_db.labels is None:
        raise ValueError("retrieval evaluation needs labels on both query and database sets")
    if len(models) != dataset_query.n_modalities:
        raise ValueError("one model per modality is required")
    rel = relevance_from_labels(dataset_query.labels, dataset_db.labels)
    qc = [encode(mdl, X) for mdl, X in zip(models, dataset_query.modalities)]
    dc = [encode(mdl, X) for mdl, X in zip(models, dataset_db.modalities)]
    names = dataset_query.names
    results = []
    for a in range(len(models)):
        for b in range(len(models)):
            results.append(evaluate_codes(qc[a], dc[b], rel, radius, top_k, (a, b), (names[a], names[b])))
    return results
