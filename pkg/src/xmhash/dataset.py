"""Multi-modal feature datasets: loading, validation, normalization, synthesis.

A dataset is a list of paired feature matrices, one per modality.  Row ``i``
of every matrix describes the same underlying instance.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RAW_MAGIC = b"XMSH"
_HEADER = struct.Struct("<4sIII")


class DatasetError(ValueError):
    """Raised when feature files or matrices violate the dataset contract."""


def _check_matrix(X, name="matrix"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DatasetError(f"{name}: expected a 2-D matrix, got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise DatasetError(f"{name}: dimensions must be positive, got {X.shape}")
    bad = np.argwhere(~np.isfinite(X))
    if len(bad):
        r, c = bad[0]
        raise DatasetError(f"{name}: non-finite value at ({r},{c})")
    return X


@dataclass(frozen=True)
class MultiModalDataset:
    """Paired feature matrices ``X^m`` (N x D^m) plus optional labels.

    ``labels`` is a boolean N x C indicator matrix; two instances are
    relevant to each other when they share at least one label.
    """

    modalities: tuple
    labels: Optional[np.ndarray] = None
    names: tuple = field(default=())

    def __post_init__(self):
        if len(self.modalities) < 1:
            raise DatasetError("dataset needs at least one modality")
        mats = tuple(_check_matrix(X, f"modality {m}") for m, X in enumerate(self.modalities))
        rows = {X.shape[0] for X in mats}
        if len(rows) != 1:
            raise DatasetError(f"row-count mismatch across modalities: {[X.shape[0] for X in mats]}")
        for X in mats:
            X.setflags(write=False)
        object.__setattr__(self, "modalities", mats)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=bool)
            if lab.ndim != 2 or lab.shape[0] != mats[0].shape[0]:
                raise DatasetError(
                    f"labels must be an N x C indicator matrix with N={mats[0].shape[0]}, got {lab.shape}"
                )
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"m{m}" for m in range(len(mats))))

    @property
    def n_instances(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> list:
        return [X.shape[1] for X in self.modalities]

    def subset(self, rows) -> "MultiModalDataset":
        rows = np.asarray(rows)
        labels = None if self.labels is None else self.labels[rows]
        return MultiModalDataset(tuple(X[rows] for X in self.modalities), labels, self.names)

    def with_modalities(self, mats) -> "MultiModalDataset":
        return MultiModalDataset(tuple(mats), self.labels, self.names)


# ---------------------------------------------------------------- raw-f32 I/O


def write_raw_f32(path, X):
    """Write a matrix as little-endian float32 behind a 16-byte XMSH header."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[:, None]
    rows, cols = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RAW_MAGIC, rows, cols, 0))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def read_raw_f32(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"unreadable file {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, rows, cols, _ = _HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * rows * cols:
        raise DatasetError(f"{path}: expected {rows}x{cols} floats, found {len(payload) // 4} values")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


def _read_csv(path) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"unreadable file {path}: {exc}") from exc
    rows = [line for line in text.splitlines() if line.strip()]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    try:
        data = [[float(v) for v in line.split(",")] for line in rows]
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    widths = {len(r) for r in data}
    if len(widths) != 1:
        raise DatasetError(f"{path}: ragged rows (column counts {sorted(widths)})")
    return np.array(data, dtype=np.float64)


def read_matrix(path, fmt="csv") -> np.ndarray:
    if fmt == "csv":
        X = _read_csv(path)
    elif fmt == "raw-f32":
        X = read_raw_f32(path)
    else:
        raise DatasetError(f"unknown format {fmt!r} (expected 'csv' or 'raw-f32')")
    return _check_matrix(X, str(path))


def write_matrix(path, X, fmt="csv"):
    if fmt == "csv":
        np.savetxt(path, np.asarray(X), delimiter=",", fmt="%.17g")
    elif fmt == "raw-f32":
        write_raw_f32(path, X)
    else:
        raise DatasetError(f"unknown format {fmt!r}")


def read_labels(path, n_classes=None) -> np.ndarray:
    """Read semicolon-separated integer label lists, one line per instance."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DatasetError(f"unreadable file {path}: {exc}") from exc
    sets = []
    for i, line in enumerate(lines):
        # an empty line is an instance without labels
        line = line.strip()
        try:
            sets.append([int(v) for v in line.split(";") if v.strip()])
        except ValueError as exc:
            raise DatasetError(f"{path}: line {i + 1}: {exc}") from exc
    top = max((max(s) for s in sets if s), default=-1)
    if min((min(s) for s in sets if s), default=0) < 0:
        raise DatasetError(f"{path}: negative label")
    C = max(top + 1, n_classes or 0)
    out = np.zeros((len(sets), C), dtype=bool)
    for i, s in enumerate(sets):
        out[i, s] = True
    return out


def write_labels(path, labels):
    labels = np.asarray(labels, dtype=bool)
    with open(path, "w") as fh:
        for row in labels:
            fh.write(";".join(str(c) for c in np.flatnonzero(row)) + "\n")


def write_codes(path, codes):
    """One line per instance, one 0/1 character per bit (+1 -> 1)."""
    bits = np.asarray(codes) > 0
    with open(path, "w") as fh:
        for row in bits:
            fh.write("".join("1" if b else "0" for b in row) + "\n")


def read_codes(path) -> np.ndarray:
    """Inverse of :func:`write_codes`; returns a +-1 float matrix."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if set(line) - {"0", "1"}:
                raise DatasetError(f"{path}:{lineno}: code lines may only contain 0 and 1")
            rows.append([1.0 if ch == "1" else -1.0 for ch in line])
    if not rows:
        raise DatasetError(f"{path}: no codes")
    if len({len(r) for r in rows}) != 1:
        raise DatasetError(f"{path}: code lines differ in length")
    return np.array(rows)


def load_dataset(paths: Sequence, fmt="csv", labels_path=None) -> MultiModalDataset:
    """Load one feature file per modality and validate pairing.

    Raises
    ------
    DatasetError
        On unreadable files, non-finite values or a row-count mismatch.
    """
    if not paths:
        raise DatasetError("no modality files given")
    mats = [read_matrix(p, fmt) for p in paths]
    labels = read_labels(labels_path) if labels_path is not None else None
    if labels is not None and labels.shape[0] != mats[0].shape[0]:
        raise DatasetError(f"row-count mismatch: labels have {labels.shape[0]} rows, features {mats[0].shape[0]}")
    return MultiModalDataset(tuple(mats), labels)


def save_dataset(dataset: MultiModalDataset, directory, fmt="csv") -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "csv" if fmt == "csv" else "f32"
    paths = []
    for m, X in enumerate(dataset.modalities):
        p = directory / f"modality_{m}.{ext}"
        write_matrix(p, X, fmt)
        paths.append(p)
    if dataset.labels is not None:
        write_labels(directory / "labels.csv", dataset.labels)
    return paths


# --------------------------------------------------------------- transforms


def total_variance(X) -> float:
    """Trace of the (N-1)-normalized covariance, i.e. the sum of its eigenvalues."""
    X = np.asarray(X, dtype=np.float64)
    return float(X.var(axis=0, ddof=1).sum())


def unit_variance_normalize(dataset: MultiModalDataset) -> MultiModalDataset:
    """Scale every modality so the trace of its covariance is one.

    Each modality is divided by ``sqrt(sum of covariance eigenvalues)``; the
    trace identity is used instead of an eigendecomposition.
    """
    if dataset.n_instances < 2:
        raise DatasetError("unit-variance normalization needs N >= 2")
    scaled = []
    for m, X in enumerate(dataset.modalities):
        tv = total_variance(X)
        if not tv > 0.0:
            raise DatasetError(f"modality {m} has zero total variance")
        scaled.append(X / np.sqrt(tv))
    return dataset.with_modalities(scaled)


def synthesize_clustered(n_clusters, per_cluster, dims, spread, seed, *,
                         separation=1.0, elongation=1.0) -> MultiModalDataset:
    """Paired Gaussian clusters across modalities, with one label per instance.

    Every modality draws its own centroids (standard normal scaled by
    ``separation``); instance ``i`` sits in the same cluster in all of them.
    ``elongation > 1`` stretches each cluster along a random direction by that
    factor, giving the elongated shapes where anchor-to-anchor links matter.
    """
    if n_clusters < 2:
        raise DatasetError("n_clusters must be >= 2")
    if per_cluster < 1:
        raise DatasetError("per_cluster must be >= 1")
    if not spread > 0:
        raise DatasetError("spread must be > 0")
    if not dims or min(dims) < 1:
        raise DatasetError("every modality needs a positive dimension")
    rng = np.random.default_rng(seed)
    N = n_clusters * per_cluster
    assign = np.repeat(np.arange(n_clusters), per_cluster)
    mats = []
    for D in dims:
        centroids = separation * rng.standard_normal((n_clusters, D))
        noise = spread * rng.standard_normal((N, D))
        if elongation != 1.0:
            axes = rng.standard_normal((n_clusters, D))
            axes /= np.linalg.norm(axes, axis=1, keepdims=True)
            along = np.einsum("nd,nd->n", noise, axes[assign])
            noise = noise + (elongation - 1.0) * along[:, None] * axes[assign]
        mats.append(centroids[assign] + noise)
    labels = np.zeros((N, n_clusters), dtype=bool)
    labels[np.arange(N), assign] = True
    return MultiModalDataset(tuple(mats), labels)


def split_query_database(n, query_fraction, seed):
    """Random disjoint (query, database) index split."""
    if not 0.0 < query_fraction < 1.0:
        raise DatasetError("query_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    nq = max(1, int(round(query_fraction * n)))
    if nq >= n:
        raise DatasetError("query split leaves an empty database")
    return np.sort(perm[:nq]), np.sort(perm[nq:])
