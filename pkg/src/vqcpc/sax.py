"""PAA / SAX discretization baselines and multichannel SAX-REPEAT."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .tokens import TokenSequence

logger = logging.getLogger(__name__)


class NonDivisibleLength(ValueError):
    pass


class FewerTuplesThanClusters(UserWarning):
    pass


@dataclass
class SaxConfig:
    alphabet_size: int = 512
    paa_ratio: int = 2

    def __post_init__(self):
        if self.alphabet_size < 2:
            raise ValueError("alphabet_size must be >= 2")
        if self.paa_ratio < 1:
            raise ValueError("paa_ratio must be >= 1")

    @property
    def breakpoints(self) -> np.ndarray:
        return breakpoints(self.alphabet_size)


def breakpoints(alphabet_size: int) -> np.ndarray:
    """Standard-normal quantiles splitting the line into equiprobable bins."""
    return norm.ppf(np.arange(1, alphabet_size) / alphabet_size)


def paa(series, segments: int) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if segments < 1 or len(x) % segments:
        raise NonDivisibleLength(f"length {len(x)} is not divisible into {segments} segments")
    return x.reshape(segments, -1).mean(axis=1)


def symbolize(values, bps: np.ndarray) -> np.ndarray:
    """Bin j holds v with bps[j-1] < v <= bps[j]."""
    return np.searchsorted(bps, values, side="left")


def sax_series(series, cfg: SaxConfig) -> np.ndarray:
    """z-normalize a 1-D series, PAA it, and bin it; constant input gives the middle symbol."""
    x = np.asarray(series, dtype=np.float64)
    segments = len(x) // cfg.paa_ratio
    if len(x) % cfg.paa_ratio:
        raise NonDivisibleLength(f"length {len(x)} not divisible by paa_ratio {cfg.paa_ratio}")
    std = x.std()
    if std < 1e-12:
        return np.full(segments, cfg.alphabet_size // 2, dtype=np.int64)
    return symbolize(paa((x - x.mean()) / std, segments), cfg.breakpoints).astype(np.int64)


def magnitude(values) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(values, dtype=np.float64) ** 2, axis=1))


def sax_discretize(window, cfg: SaxConfig = None) -> TokenSequence:
    """SAX word of the per-timestep Euclidean magnitude of a (W, C) window."""
    cfg = cfg or SaxConfig()
    values = getattr(window, "values", window)
    symbols = sax_series(magnitude(values), cfg)
    return TokenSequence(
        [int(s) for s in symbols], getattr(window, "label", None), getattr(window, "participant_id", "")
    )


def channel_sax(window, cfg: SaxConfig) -> np.ndarray:
    """(W/paa_ratio, C) matrix of per-channel SAX symbols."""
    values = np.asarray(getattr(window, "values", window), dtype=np.float64)
    return np.stack([sax_series(values[:, c], cfg) for c in range(values.shape[1])], axis=1)


# --- k-means --------------------------------------------------------------


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest centroid index."""
    out = np.empty(len(x), dtype=np.int64)
    for i in range(0, len(x), chunk):
        out[i : i + chunk] = _sq_dists(x[i : i + chunk], centroids).argmin(axis=1)
    return out


def _min_sq_dist(x, centroids, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(x))
    for i in range(0, len(x), chunk):
        out[i : i + chunk] = _sq_dists(x[i : i + chunk], centroids).min(axis=1)
    return out


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [x[rng.integers(len(x))]]
    d2 = _min_sq_dist(x, np.asarray(centroids))
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centroids.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.asarray(centroids, dtype=np.float64)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def lloyd_kmeans(x, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    Empty clusters are re-seeded with the point farthest from its centroid.
    Stops after `max_iter` or when the relative inertia change drops below `tol`.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng)
    prev = np.inf
    for it in range(1, max_iter + 1):
        labels = assign(x, centroids)
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                d = ((x - centroids[labels]) ** 2).sum(1)
                far = int(d.argmax())
                centroids[j] = x[far]
                labels[far] = j
        labels = assign(x, centroids)
        inertia = float(((x - centroids[labels]) ** 2).sum())
        if prev < np.inf and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        if inertia == 0.0:
            break
        prev = inertia
    return KMeansResult(centroids, labels, inertia, it)


class SaxRepeat:
    """Per-channel SAX symbols clustered into a single alphabet by k-means.

    Fit on training windows only; centroids are frozen afterwards.
    """

    def __init__(self, cfg: SaxConfig = None, k: int = 512, seed: int = 0):
        self.cfg = cfg or SaxConfig()
        self.k = k
        self.seed = seed
        self.centroids: Optional[np.ndarray] = None

    def fit(self, windows: Sequence) -> "SaxRepeat":
        tuples = np.concatenate([channel_sax(w, self.cfg) for w in windows]).astype(np.float64)
        distinct = len(np.unique(tuples, axis=0))
        k = self.k
        if distinct < k:
            warnings.warn(
                f"only {distinct} distinct symbol tuples for k={k}; reducing k", FewerTuplesThanClusters, stacklevel=2
            )
            k = distinct
        self.k_effective = k
        self.result = lloyd_kmeans(tuples, k, self.seed)
        self.centroids = self.result.centroids
        return self

    def transform(self, windows: Sequence) -> list[TokenSequence]:
        if self.centroids is None:
            raise RuntimeError("SaxRepeat must be fit before transform")
        out = []
        for w in windows:
            ids = assign(channel_sax(w, self.cfg).astype(np.float64), self.centroids)
            out.append(TokenSequence([int(i) for i in ids], getattr(w, "label", None), getattr(w, "participant_id", "")))
        return out


def sax_repeat_discretize(train_windows, windows=None, cfg: SaxConfig = None, k: int = 512, seed: int = 0):
    """Fit SAX-REPEAT on `train_windows` and tokenize `windows` (default: the train set)."""
    model = SaxRepeat(cfg, k, seed).fit(train_windows)
    return model.transform(train_windows if windows is None else windows)
