"""Representative traffic-pattern extraction and nearest-pattern matching.

The pipeline: average each node's training history into a 288-slot daily
profile, slide a cyclic window over every profile, subtract each window's
mean ("zero-based" shapes), drop exact duplicates, then undersample the
pool with K-means. The centroids form the key bank; queries are matched by
cosine distance on zero-based windows.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

SLOTS_PER_DAY = 288  # 24h at 5-minute resolution

_BANK_MAGIC = b"PMMNPAT1"


# ---- daily profiles ------------------------------------------------------------


@dataclass
class DailyProfiles:
    """Per-node time-of-day average speeds over the training history."""

    node_ids: tuple[str, ...]
    means: np.ndarray  # (N, 288)
    counts: np.ndarray  # (N, 288) observations behind each slot average

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)


def _interpolate_cyclic(values: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown slots by linear interpolation between known neighbors, wrapping."""
    if known.all():
        return values
    n = values.size
    idx = np.flatnonzero(known)
    out = values.copy()
    # np.interp with period handles circular interpolation directly.
    missing = np.flatnonzero(~known)
    out[missing] = np.interp(missing, idx, values[idx], period=n)
    return out


def compute_daily_profiles(
    values: np.ndarray,
    slots: np.ndarray,
    observed: np.ndarray,
    node_ids,
) -> DailyProfiles:
    """Slot-wise mean speed per node over observed entries only.

    ``values`` is (T, N); ``slots`` maps each row to its time-of-day slot;
    ``observed`` is the non-missing mask. Slots that never appear are filled
    by cyclic linear interpolation. A node with no observations at all is an
    error.
    """
    values = np.asarray(values, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    slots = np.asarray(slots, dtype=np.intp)
    t, n = values.shape
    sums = np.zeros((n, SLOTS_PER_DAY))
    counts = np.zeros((n, SLOTS_PER_DAY))
    safe = np.where(observed, values, 0.0)
    for j in range(n):
        np.add.at(sums[j], slots, safe[:, j])
        np.add.at(counts[j], slots, observed[:, j].astype(np.float64))
    means = np.zeros_like(sums)
    for j in range(n):
        have = counts[j] > 0
        if not have.any():
            raise ValueError(f"node {node_ids[j]!r} has no observations in the training split")
        means[j, have] = sums[j, have] / counts[j, have]
        means[j] = _interpolate_cyclic(means[j], have)
    return DailyProfiles(node_ids=tuple(str(i) for i in node_ids), means=means, counts=counts)


# ---- window sampling -------------------------------------------------------------


def zero_based(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Subtract the mean so cosine similarity compares shape, not level."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=axis, keepdims=True)


def sample_windows(profiles: np.ndarray | DailyProfiles, window_len: int) -> np.ndarray:
    """All stride-1 cyclic windows of the daily profiles, zero-based, deduplicated.

    Returns an (m, window_len) array in first-occurrence order (node-major,
    then start slot). Exact duplicates after zero-basing are dropped.
    """
    means = profiles.means if isinstance(profiles, DailyProfiles) else np.asarray(profiles, dtype=np.float64)
    if means.ndim == 1:
        means = means[None, :]
    n_slots = means.shape[1]
    if window_len > n_slots:
        raise ValueError(f"window_len {window_len} exceeds profile length {n_slots}")
    wrapped = np.concatenate([means, means[:, : window_len - 1]], axis=1)
    windows = sliding_window_view(wrapped, window_len, axis=1)[:, :n_slots]
    flat = zero_based(windows.reshape(-1, window_len))
    seen: dict[bytes, int] = {}
    keep = []
    for i, row in enumerate(flat):
        key = row.tobytes()
        if key not in seen:
            seen[key] = i
            keep.append(i)
    return flat[keep]


# ---- K-means undersampling -----------------------------------------------------


@dataclass
class ClusterInfo:
    inertia: float
    n_iter: int
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    # (centroids snapshot, labels, inertia) per Lloyd iteration when collected
    history: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    first = rng.integers(n)
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # Remaining points coincide with chosen centroids; pick any left.
            choice = int(rng.integers(n))
        else:
            choice = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[choice]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (ties to the lower centroid id) and squared distance."""
    labels = np.empty(x.shape[0], dtype=np.intp)
    best = np.empty(x.shape[0])
    c_sq = (centroids ** 2).sum(axis=1)
    for lo in range(0, x.shape[0], chunk):
        part = x[lo : lo + chunk]
        d2 = ((part ** 2).sum(axis=1, keepdims=True) - 2.0 * part @ centroids.T) + c_sq
        labels[lo : lo + part.shape[0]] = np.argmin(d2, axis=1)
        best[lo : lo + part.shape[0]] = np.take_along_axis(
            d2, labels[lo : lo + part.shape[0], None], axis=1
        )[:, 0]
    return labels, np.maximum(best, 0.0)


def kmeans_lloyd(
    x: np.ndarray,
    n_clusters: int,
    max_iter: int = 100,
    seed: int = 0,
    collect_history: bool = False,
) -> tuple[np.ndarray, ClusterInfo]:
    """Plain Lloyd iterations with k-means++ seeding under Euclidean distance.

    Stops at the assignment fixpoint or ``max_iter``. Empty clusters keep
    their previous centroid, which preserves the non-increasing inertia
    guarantee. Fully deterministic given ``seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, n_clusters, rng)
    info = ClusterInfo(inertia=np.inf, n_iter=0, labels=np.empty(0, dtype=np.intp))
    prev_labels = None
    for it in range(max_iter):
        labels, d2 = _assign(x, centroids)
        inertia = float(d2.sum())
        info.inertia_history.append(inertia)
        if collect_history:
            info.history.append((centroids.copy(), labels.copy(), inertia))
        info.labels = labels
        info.inertia = inertia
        info.n_iter = it + 1
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        prev_labels = labels
    return centroids, info


# ---- the key bank -----------------------------------------------------------------


def _content_hash(window_len: int, values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(struct.pack("<II", window_len, values.shape[0]))
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class PatternSet:
    """The key bank: zero-based representative windows with stable row ids."""

    values: np.ndarray  # (count, window_len), each row mean 0
    content_hash: str

    @staticmethod
    def from_values(values: np.ndarray) -> "PatternSet":
        vals = zero_based(np.asarray(values, dtype=np.float64))
        vals.setflags(write=False)
        return PatternSet(values=vals, content_hash=_content_hash(vals.shape[1], vals))

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def window_len(self) -> int:
        return self.values.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_BANK_MAGIC)
            fh.write(struct.pack("<II", self.window_len, self.count))
            fh.write(self.content_hash.encode("ascii"))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "PatternSet":
        with open(path, "rb") as fh:
            magic = fh.read(len(_BANK_MAGIC))
            if magic != _BANK_MAGIC:
                raise ValueError(f"{path}: not a pattern bank file")
            window_len, count = struct.unpack("<II", fh.read(8))
            stored_hash = fh.read(64).decode("ascii")
            data = np.frombuffer(fh.read(count * window_len * 8), dtype="<f8")
        values = data.reshape(count, window_len).astype(np.float64)
        if _content_hash(window_len, values) != stored_hash:
            raise ValueError(f"{path}: content hash mismatch (corrupt bank)")
        values.setflags(write=False)
        return PatternSet(values=values, content_hash=stored_hash)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            header = ",".join(f"t{i}" for i in range(self.window_len))
            fh.write(f"pattern_id,{header}\n")
            for i, row in enumerate(self.values):
                fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def cluster_patterns(
    raw: np.ndarray,
    n_patterns: int,
    max_iter: int = 100,
    seed: int = 0,
    collect_history: bool = False,
) -> tuple[PatternSet, ClusterInfo]:
    """Undersample the raw window pool into ``n_patterns`` centroid keys."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[0] < n_patterns:
        raise ValueError(
            f"only {raw.shape[0]} raw patterns available; "
            f"request a smaller pattern count than {n_patterns}"
        )
    centroids, info = kmeans_lloyd(
        raw, n_patterns, max_iter=max_iter, seed=seed, collect_history=collect_history
    )
    return PatternSet.from_values(centroids), info


# ---- k-NN matching ------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """k nearest patterns for one window, nearest first."""

    ids: np.ndarray  # (k,) pattern row ids
    distances: np.ndarray  # (k,) cosine distances in [0, 2], non-decreasing
    residual: np.ndarray  # zero-based window minus the nearest pattern


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def cosine_distances(windows: np.ndarray, patterns: PatternSet) -> np.ndarray:
    """1 - cos(zero_based(window), pattern) for every (window, pattern) pair.

    A zero-variance side (window or pattern that is all-constant) has
    undefined cosine; it is defined as 0, giving distance exactly 1.
    """
    wz = _unit_rows(zero_based(np.atleast_2d(windows)))
    pz = _unit_rows(patterns.values)
    cos = np.clip(wz @ pz.T, -1.0, 1.0)
    return 1.0 - cos


def match_many(windows: np.ndarray, patterns: PatternSet, k: int, chunk: int = 4096):
    """Vectorized k-NN over many windows; returns (ids, distances) arrays.

    Ties break toward the lower pattern id (stable sort on distance).
    """
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if windows.shape[1] != patterns.window_len:
        raise ValueError(
            f"window length {windows.shape[1]} != pattern length {patterns.window_len}"
        )
    if not 1 <= k <= patterns.count:
        raise ValueError(f"k must be in [1, {patterns.count}]")
    m = windows.shape[0]
    ids = np.empty((m, k), dtype=np.intp)
    dists = np.empty((m, k), dtype=np.float64)
    for lo in range(0, m, chunk):
        d = cosine_distances(windows[lo : lo + chunk], patterns)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        ids[lo : lo + d.shape[0]] = order
        dists[lo : lo + d.shape[0]] = np.take_along_axis(d, order, axis=1)
    return ids, dists


def knn_match(window: np.ndarray, patterns: PatternSet, k: int) -> MatchResult:
    """Nearest patterns for one window plus its residual against the best match."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1:
        raise ValueError("knn_match expects a 1-D speed window")
    if not np.isfinite(window).all():
        raise ValueError("window contains non-finite values")
    ids, dists = match_many(window[None, :], patterns, k)
    residual = zero_based(window) - patterns.values[ids[0, 0]]
    return MatchResult(ids=ids[0], distances=dists[0], residual=residual)


# ---- estimator facade ----------------------------------------------------------------


class PatternExtractor(BaseEstimator):
    """Fit the representative pattern bank from a series dataset.

    Parameters
    ----------
    n_patterns : bank size (K-means centroid count).
    window_len : pattern length in 5-minute steps.
    k : neighbors returned by :meth:`transform` / :meth:`match`.
    max_iter : Lloyd iteration cap.
    random_state : seed for the K-means initialization.
    """

    def __init__(self, n_patterns=1000, window_len=18, k=3, max_iter=100, random_state=0):
        self.n_patterns = n_patterns
        self.window_len = window_len
        self.k = k
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, dataset, y=None):
        """Extract the bank from ``dataset``'s training split only."""
        profiles = dataset.train_profiles()
        raw = sample_windows(profiles, self.window_len)
        self.raw_count_ = raw.shape[0]
        self.patterns_, info = cluster_patterns(
            raw, self.n_patterns, max_iter=self.max_iter, seed=self.random_state
        )
        self.inertia_ = info.inertia
        self.n_iter_ = info.n_iter
        return self

    def _check_fitted(self):
        if not hasattr(self, "patterns_"):
            raise NotFittedError("PatternExtractor is not fitted; call fit first")

    def transform(self, windows: np.ndarray):
        """Match raw speed windows (m, window_len); returns (ids, distances, residuals)."""
        self._check_fitted()
        windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
        ids, dists = match_many(windows, self.patterns_, self.k)
        residuals = zero_based(windows) - self.patterns_.values[ids[:, 0]]
        return ids, dists, residuals

    def match(self, window: np.ndarray) -> MatchResult:
        self._check_fitted()
        return knn_match(window, self.patterns_, self.k)
