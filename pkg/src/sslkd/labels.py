"""K-Means pseudo-labels over MFCC frames."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, NumericError, ShapeError

CODEBOOK_KEY = "kmeans.centroids"


@dataclass
class Codebook:
    centroids: np.ndarray  # [C, D]
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {CODEBOOK_KEY: self.centroids}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> Codebook:
        return cls(np.asarray(tensors[CODEBOOK_KEY], dtype=np.float64))


def squared_distances(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact ||x_i - c_j||^2, computed by differences so equal distances tie exactly."""
    out = np.empty((x.shape[0], centroids.shape[0]))
    for start in range(0, x.shape[0], chunk):
        diff = x[start:start + chunk, None, :] - centroids[None, :, :]
        out[start:start + chunk] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def kmeans_assign(feats, codebook: Codebook) -> np.ndarray:
    """Nearest centroid per frame; ties go to the lowest index."""
    x = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.centroids.shape[1]:
        raise ShapeError(f"features {x.shape} vs centroids {codebook.centroids.shape}")
    return np.argmin(squared_distances(x, codebook.centroids), axis=1)


def kmeans_plusplus(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    d2 = squared_distances(x, centroids[0][None])[:, 0]
    for _ in range(1, C):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centroids.append(x[idx])
        d2 = np.minimum(d2, squared_distances(x, x[idx][None])[:, 0])
    return np.array(centroids)


def kmeans_fit(feats, C: int, max_iters: int = 50, seed: int = 0, init: np.ndarray | None = None) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds (or ``init``).

    Stops after ``max_iters`` iterations or once assignments stop changing. A
    cluster that empties is re-seeded with the point farthest from its
    current centroid.
    """
    x = np.asarray(getattr(feats, "frames", feats), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be [N, D], got {x.shape}")
    if len(x) < C:
        raise InsufficientDataError(f"{len(x)} frames cannot form {C} clusters")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite features")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, C, rng) if init is None else np.array(init, dtype=np.float64)
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = squared_distances(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        nearest = d2[np.arange(len(x)), labels]
        for c in range(C):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                centroids[c] = x[far]
                labels[far] = c
                nearest[far] = 0.0
    return Codebook(centroids, history, n_iter)


def decimate(frames: np.ndarray) -> np.ndarray:
    """Keep every second 10 ms frame, giving the 20 ms encoder rate."""
    return np.asarray(frames)[::2]


def cluster_purity(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of frames whose cluster's majority true state matches their own."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    hits = 0
    for c in np.unique(labels):
        hits += np.bincount(truth[labels == c]).max()
    return hits / len(labels)
