import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from dualqa.featio import FeatureMatrix, synth_features
from dualqa.quantizer import (
    Codebook,
    CodebookFormatError,
    encode,
    read_codebook,
    train_codebook,
    write_codebook,
)
from dualqa.validation import DimensionMismatchError


def test_k1_is_global_mean():
    X = np.random.default_rng(0).normal(size=(300, 5))
    cb = train_codebook([X], 1, seed=0)
    np.testing.assert_allclose(cb.centroids[0], X.mean(0), atol=1e-6)
    assert cb.train_inertia == pytest.approx(((X - X.mean(0)) ** 2).sum(), rel=1e-9)


def test_two_blobs():
    rng = np.random.default_rng(1)
    sigma, n = 0.1, 500
    a = rng.normal(0, sigma, size=(n, 3)) + [5, 0, 0]
    b = rng.normal(0, sigma, size=(n, 3)) - [5, 0, 0]
    cb = train_codebook([a, b], 2, seed=3)
    found = sorted(cb.centroids.tolist())
    expect = sorted([b.mean(0).tolist(), a.mean(0).tolist()])
    np.testing.assert_allclose(found, expect, atol=3 * sigma / np.sqrt(n))


def test_deterministic_given_seed():
    X = np.random.default_rng(2).normal(size=(1000, 4))
    a = train_codebook([X], 8, seed=11)
    b = train_codebook([X], 8, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert a.train_inertia == b.train_inertia


def test_thread_count_does_not_change_result(monkeypatch):
    import dualqa.quantizer as q

    monkeypatch.setattr(q, "CHUNK", 256)
    X = np.random.default_rng(3).normal(size=(3000, 6))
    a = train_codebook([X], 10, seed=0, threads=1)
    b = train_codebook([X], 10, seed=0, threads=4)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert a.inertia_history == b.inertia_history


def test_inertia_non_increasing():
    for seed in range(5):
        X = np.random.default_rng(seed).normal(size=(400, 3))
        h = train_codebook([X], 6, seed=seed).inertia_history
        assert all(b <= a for a, b in zip(h, h[1:]))


def test_errors():
    with pytest.raises(ValueError):
        train_codebook([np.zeros((3, 2))], 4)
    with pytest.raises(DimensionMismatchError):
        train_codebook([np.zeros((3, 2)), np.zeros((3, 3))], 2)


def test_encode_exact_and_ties():
    C = np.zeros((8, 2), dtype=np.float32)
    C[:, 0] = np.arange(8) * 10
    C[2] = [1.0, 0.0]
    C[5] = [-1.0, 0.0]
    cb = Codebook(C)
    assert encode(cb, np.array([[70.0, 0.0]]))[0] == 7
    # (0, 0) is equidistant from centroids 2 and 5 (and 0 is exactly at centroid 0)
    C[0] = [50.0, 50.0]
    cb = Codebook(C)
    assert encode(cb, np.array([[0.0, 0.0]]))[0] == 2


def test_encode_matches_exhaustive_scan():
    rng = np.random.default_rng(4)
    cb = Codebook(rng.normal(size=(32, 6)))
    X = rng.normal(size=(500, 6))
    got = encode(cb, X)
    C = cb.centroids.astype(np.float64)
    for i, x in enumerate(X):
        dists = [float(((x - c) ** 2).sum()) for c in C]
        assert got[i] == int(np.argmin(dists))


def test_encode_dim_mismatch():
    with pytest.raises(DimensionMismatchError):
        encode(Codebook(np.zeros((2, 3))), np.zeros((4, 2)))


def test_encode_is_pure_and_permutation_equivariant():
    rng = np.random.default_rng(5)
    cb = Codebook(rng.normal(size=(16, 4)))
    X = rng.normal(size=(200, 4))
    perm = rng.permutation(200)
    a = encode(cb, X)
    np.testing.assert_array_equal(encode(cb, X), a)
    np.testing.assert_array_equal(encode(cb, X[perm]), a[perm])


def test_recovers_synthetic_units_up_to_permutation():
    rng = np.random.default_rng(6)
    anchors = rng.normal(size=(12, 8)) * 2
    units = rng.integers(12, size=3000)
    m = synth_features(units, anchors, 0.05, seed=0)
    cb = train_codebook([m], 12, seed=1)
    cost = ((cb.centroids[:, None, :] - anchors[None]) ** 2).sum(-1)
    rows, cols = linear_sum_assignment(cost)
    mapping = dict(zip(rows, cols))
    labels = encode(cb, m)
    np.testing.assert_array_equal([mapping[x] for x in labels], units)


def test_codebook_file_roundtrip(tmp_path):
    cb = Codebook(np.random.default_rng(7).normal(size=(5, 3)), train_inertia=12.5)
    write_codebook(cb, tmp_path / "c.cdbk")
    raw = (tmp_path / "c.cdbk").read_bytes()
    assert raw[:4] == b"CDBK" and len(raw) == 24 + 5 * 3 * 4
    back = read_codebook(tmp_path / "c.cdbk")
    assert back.centroids.tobytes() == cb.centroids.tobytes()
    assert back.train_inertia == 12.5
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CodebookFormatError):
        read_codebook(tmp_path / "bad")


def test_accepts_feature_matrices():
    m = FeatureMatrix(np.random.default_rng(8).normal(size=(50, 2)))
    cb = train_codebook([m], 3)
    assert encode(cb, m).shape == (50,)
