"""k-means codebook training and nearest-centroid encoding of feature frames.

Lloyd iterations run over fixed-size frame chunks. Each chunk yields its
labels, squared distances and per-cluster partial sums; partials are reduced
in chunk order, so the result does not depend on how many threads computed
them.
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from dualqa.featio import FeatureMatrix
from dualqa.validation import DimensionMismatchError, check_frames, check_same_dim

CDBK_MAGIC = b"CDBK"
CDBK_VERSION = 1
_HEADER = struct.Struct("<4sIIId")
CHUNK = 16384


class CodebookFormatError(ValueError):
    pass


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray
    train_inertia: float = 0.0
    inertia_history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = check_frames(self.centroids, dtype=np.float32)
        if self.centroids.shape[0] < 1:
            raise ValueError("codebook needs at least one centroid")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _as_frames(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.data
    return check_frames(features)


def _sqdist(X: np.ndarray, C: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] - 2.0 * (X @ C.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _chunks(n: int):
    return [(i, min(i + CHUNK, n)) for i in range(0, n, CHUNK)] or [(0, 0)]


def _assign(X: np.ndarray, C: np.ndarray, threads: int = 1):
    """Labels and squared distances to the nearest centroid (lowest index on ties)."""
    c_sq = (C * C).sum(1)

    def work(bounds):
        lo, hi = bounds
        d = _sqdist(X[lo:hi], C, c_sq)
        lab = d.argmin(1)
        return lab, d[np.arange(hi - lo), lab]

    parts = _map(work, _chunks(X.shape[0]), threads)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _map(fn, items, threads):
    if threads <= 1 or len(items) == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _cluster_sums(X, labels, K, threads):
    def work(bounds):
        lo, hi = bounds
        lab = labels[lo:hi]
        sums = np.stack([np.bincount(lab, weights=X[lo:hi, j], minlength=K) for j in range(X.shape[1])], 1)
        return sums, np.bincount(lab, minlength=K)

    sums = np.zeros((K, X.shape[1]))
    counts = np.zeros(K, dtype=np.int64)
    for s, c in _map(work, _chunks(X.shape[0]), threads):
        sums += s
        counts += c
    return sums, counts


def _chunked_sum(v: np.ndarray) -> float:
    total = 0.0
    for lo, hi in _chunks(v.shape[0]):
        total += float(v[lo:hi].sum())
    return total


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator, n_local_trials: int | None = None):
    """Greedy k-means++ seeding: each new seed is the best of several D^2 draws."""
    n = X.shape[0]
    if n_local_trials is None:
        n_local_trials = 2 + int(math.log(K))
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sqdist(X, centers[:1], (centers[:1] ** 2).sum(1))[:, 0]
    for k in range(1, K):
        pot = closest.sum()
        if pot <= 0:
            cand = rng.integers(n, size=n_local_trials)
        else:
            cum = np.cumsum(closest)
            cand = np.searchsorted(cum, rng.random(n_local_trials) * cum[-1], side="right")
            cand = np.minimum(cand, n - 1)
        d = _sqdist(X, X[cand], (X[cand] ** 2).sum(1))
        trial = np.minimum(closest[:, None], d)
        best = int(trial.sum(0).argmin())
        centers[k] = X[cand[best]]
        closest = trial[:, best]
    return centers


def _lloyd(X, K, max_iters, rel_tol, rng, threads):
    C = kmeans_plusplus(X, K, rng)
    labels, dist = _assign(X, C, threads)
    history = [_chunked_sum(dist)]
    for _ in range(max_iters):
        sums, counts = _cluster_sums(X, labels, K, threads)
        empty = np.flatnonzero(counts == 0)
        live = counts > 0
        C = C.copy()
        C[live] = sums[live] / counts[live, None]
        if empty.size:
            # reseed each empty cluster at the frame farthest from its centroid
            far = np.argsort(-dist, kind="stable")[: empty.size]
            C[empty] = X[far]
        labels, dist = _assign(X, C, threads)
        inertia = _chunked_sum(dist)
        prev = history[-1]
        history.append(inertia)
        if empty.size == 0 and (prev == 0 or (prev - inertia) / prev < rel_tol):
            break
    return C, history


def train_codebook(
    features: Iterable[FeatureMatrix | np.ndarray],
    K: int,
    max_iters: int = 100,
    rel_tol: float = 1e-6,
    seed: int = 0,
    n_init: int = 1,
    threads: int = 1,
) -> Codebook:
    """Fit a K-centroid codebook with k-means++ seeding and Lloyd iterations.

    With ``n_init > 1`` several seeded restarts run and the lowest-inertia
    solution wins. ``threads`` only changes wall time, never the result.
    """
    mats = [_as_frames(f) for f in features]
    check_same_dim(mats)
    X = np.concatenate(mats).astype(np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if X.shape[0] < K:
        raise ValueError(f"need at least K={K} frames, got {X.shape[0]}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        C, history = _lloyd(X, K, max_iters, rel_tol, rng, threads)
        if best is None or history[-1] < best[1][-1]:
            best = (C, history)
    C, history = best
    return Codebook(C.astype(np.float32), float(history[-1]), history)


def encode(cb: Codebook, m: FeatureMatrix | np.ndarray, threads: int = 1) -> np.ndarray:
    X = _as_frames(m).astype(np.float64)
    if X.shape[1] != cb.dim:
        raise DimensionMismatchError(f"features have dim {X.shape[1]}, codebook has dim {cb.dim}")
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    labels, _ = _assign(X, cb.centroids.astype(np.float64), threads)
    return labels.astype(np.int64)


def write_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    header = _HEADER.pack(CDBK_MAGIC, CDBK_VERSION, cb.K, cb.dim, cb.train_inertia)
    Path(path).write_bytes(header + np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())


def read_codebook(path: str | os.PathLike) -> Codebook:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CodebookFormatError(f"{path}: truncated header")
    magic, version, K, dim, inertia = _HEADER.unpack_from(raw)
    if magic != CDBK_MAGIC:
        raise CodebookFormatError(f"{path}: bad magic {magic!r}")
    if version != CDBK_VERSION:
        raise CodebookFormatError(f"{path}: version {version}, expected {CDBK_VERSION}")
    body = raw[_HEADER.size:]
    if len(body) != K * dim * 4:
        raise CodebookFormatError(f"{path}: expected {K * dim * 4} payload bytes, got {len(body)}")
    C = np.frombuffer(body, dtype="<f4").reshape(K, dim).astype(np.float32)
    return Codebook(C, inertia)
