import numpy as np
import pytest

from xmhash.dataset import (DatasetError, MultiModalDataset, load_dataset, read_codes, read_labels,
                            read_matrix, save_dataset, split_query_database, synthesize_clustered,
                            total_variance, unit_variance_normalize, write_codes, write_labels,
                            write_matrix)


def _csv(path, rows):
    path.write_text("\n".join(",".join(str(v) for v in r) for r in rows) + "\n")
    return path


def test_load_two_csvs(tmp_path):
    a = _csv(tmp_path / "a.csv", np.arange(12).reshape(4, 3))
    b = _csv(tmp_path / "b.csv", np.arange(8).reshape(4, 2))
    ds = load_dataset([a, b])
    assert ds.n_instances == 4 and ds.n_modalities == 2
    assert ds.dims == [3, 2]
    np.testing.assert_array_equal(ds.modalities[0], np.arange(12).reshape(4, 3))


def test_row_count_mismatch(tmp_path):
    a = _csv(tmp_path / "a.csv", np.zeros((4, 3)))
    b = _csv(tmp_path / "b.csv", np.zeros((5, 3)))
    with pytest.raises(DatasetError, match="row-count mismatch"):
        load_dataset([a, b])


def test_nan_is_reported_with_position(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,nan\n")
    with pytest.raises(DatasetError, match=r"non-finite value at \(1,1\)"):
        load_dataset([p])


def test_raw_f32_roundtrip(tmp_path):
    X = np.random.default_rng(0).standard_normal((7, 3))
    write_matrix(tmp_path / "x.f32", X, "raw-f32")
    Y = read_matrix(tmp_path / "x.f32", "raw-f32")
    np.testing.assert_array_equal(Y, X.astype(np.float32))


def test_raw_f32_rejects_truncated(tmp_path):
    write_matrix(tmp_path / "x.f32", np.ones((3, 3)), "raw-f32")
    blob = (tmp_path / "x.f32").read_bytes()
    (tmp_path / "x.f32").write_bytes(blob[:-4])
    with pytest.raises(DatasetError, match="expected 3x3"):
        read_matrix(tmp_path / "x.f32", "raw-f32")


def test_csv_roundtrip_is_exact(tmp_path):
    X = np.random.default_rng(1).standard_normal((5, 4))
    write_matrix(tmp_path / "x.csv", X)
    np.testing.assert_array_equal(read_matrix(tmp_path / "x.csv"), X)


def test_labels_roundtrip_with_empty_row(tmp_path):
    lab = np.array([[1, 0, 1], [0, 0, 0], [0, 1, 0]], dtype=bool)
    write_labels(tmp_path / "l.csv", lab)
    np.testing.assert_array_equal(read_labels(tmp_path / "l.csv", n_classes=3), lab)


def test_codes_roundtrip(tmp_path):
    B = np.where(np.random.default_rng(2).random((6, 10)) > 0.5, 1.0, -1.0)
    write_codes(tmp_path / "c.txt", B)
    np.testing.assert_array_equal(read_codes(tmp_path / "c.txt"), B)


def test_save_and_load_dataset(tmp_path):
    ds = synthesize_clustered(3, 4, [2, 3], 0.1, seed=0)
    paths = save_dataset(ds, tmp_path)
    back = load_dataset(paths, labels_path=tmp_path / "labels.csv")
    for X, Y in zip(ds.modalities, back.modalities):
        np.testing.assert_array_equal(X, Y)
    np.testing.assert_array_equal(back.labels, ds.labels)


# ------------------------------------------------------------ normalization


def test_normalize_trace_four_divides_by_two():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 3))
    X *= 2.0 / np.sqrt(total_variance(X))
    ds = unit_variance_normalize(MultiModalDataset((X,)))
    np.testing.assert_allclose(ds.modalities[0], X / 2.0, rtol=0, atol=1e-12)
    assert total_variance(ds.modalities[0]) == pytest.approx(1.0, abs=1e-12)


def test_normalize_unit_trace_is_identity():
    X = np.random.default_rng(3).standard_normal((20, 4))
    X /= np.sqrt(total_variance(X))
    ds = unit_variance_normalize(MultiModalDataset((X,)))
    np.testing.assert_allclose(ds.modalities[0], X, rtol=0, atol=1e-12)


def test_normalize_column_variances_3_and_1():
    # columns with sample variances 3 and 1 exactly
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((40, 2))
    raw = (raw - raw.mean(0)) / raw.std(0, ddof=1)
    X = raw * np.sqrt([3.0, 1.0])
    ds = unit_variance_normalize(MultiModalDataset((X,)))
    np.testing.assert_allclose(ds.modalities[0], X / 2.0, atol=1e-12)
    # independent recomputation of the covariance trace
    Y = ds.modalities[0]
    C = (Y - Y.mean(0)).T @ (Y - Y.mean(0)) / (len(Y) - 1)
    assert np.trace(C) == pytest.approx(1.0, abs=1e-12)


def test_normalize_rejects_constant_modality():
    with pytest.raises(DatasetError, match="zero total variance"):
        unit_variance_normalize(MultiModalDataset((np.ones((5, 2)),)))


# ---------------------------------------------------------------- synthesis


def test_synth_shape_contract():
    ds = synthesize_clustered(3, 10, [5, 7], 0.1, seed=0)
    assert ds.n_instances == 30 and ds.n_modalities == 2 and ds.dims == [5, 7]
    assert len(np.unique(ds.labels.argmax(1))) == 3
    assert (ds.labels.sum(1) == 1).all()


def test_synth_is_deterministic():
    a = synthesize_clustered(3, 10, [5, 7], 0.1, seed=7)
    b = synthesize_clustered(3, 10, [5, 7], 0.1, seed=7)
    for X, Y in zip(a.modalities, b.modalities):
        assert X.tobytes() == Y.tobytes()


@pytest.mark.parametrize("spread", [1e-2, 1e-4, 1e-6])
def test_synth_spread_to_zero(spread):
    ds = synthesize_clustered(3, 8, [4], spread, seed=0)
    X, y = ds.modalities[0], ds.labels.argmax(1)
    d = np.sqrt(((X[:, None] - X[None]) ** 2).sum(-1))
    same = y[:, None] == y[None]
    assert d[same].max() < 10 * spread
    assert d[~same].min() > 0.1


def test_split_is_disjoint_and_covering():
    q, d = split_query_database(50, 0.2, seed=1)
    assert len(q) == 10 and len(d) == 40
    assert set(q).isdisjoint(d) and set(q) | set(d) == set(range(50))


def test_split_rejects_bad_fraction():
    with pytest.raises(DatasetError):
        split_query_database(10, 1.0, seed=0)
