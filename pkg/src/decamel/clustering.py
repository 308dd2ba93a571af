"""Lloyd k-means with pinned samples, and the orthonormal cluster indicator matrix."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvariantError

FREE = -1
_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class ClusterState:
    """Cluster assignments (0-based) and centroids in the shared space.

    ``pinned[i]`` is the fixed cluster of sample ``i`` or ``-1`` when the
    sample is free to move.
    """

    assignments: np.ndarray
    centroids: np.ndarray
    pinned: np.ndarray | None = None
    objectives: tuple = field(default=())

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        c = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        if a.size and (a.min() < 0 or a.max() >= c.shape[0]):
            raise InvariantError("assignment refers to a missing centroid")
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", c)
        if self.pinned is not None:
            p = np.asarray(self.pinned, dtype=np.int64)
            if p.shape != a.shape:
                raise InvariantError("pinned must have one entry per sample")
            fixed = p != FREE
            if np.any(a[fixed] != p[fixed]):
                raise InvariantError("pinned sample is not in its fixed cluster")
            object.__setattr__(self, "pinned", p)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def N(self) -> int:
        return self.assignments.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.K)

    def same_as(self, other: "ClusterState") -> bool:
        pins = (self.pinned is None and other.pinned is None) or (
            self.pinned is not None
            and other.pinned is not None
            and np.array_equal(self.pinned, other.pinned)
        )
        return (
            pins
            and np.array_equal(self.assignments, other.assignments)
            and np.array_equal(self.centroids, other.centroids)
        )


def squared_distances(Y, C) -> np.ndarray:
    """Exact ``||y_i - c_k||^2`` (no expansion), chunked over rows."""
    out = np.empty((Y.shape[0], C.shape[0]))
    for start in range(0, Y.shape[0], _CHUNK):
        diff = Y[start : start + _CHUNK, None, :] - C[None, :, :]
        out[start : start + _CHUNK] = np.einsum("nkt,nkt->nk", diff, diff)
    return out


def kmeans_objective(Y, assignments, centroids) -> float:
    r = Y - centroids[assignments]
    return float(np.einsum("nt,nt->", r, r))


def cluster_means(Y, assignments, K, fallback=None):
    """Per-cluster means; empty clusters keep ``fallback`` rows (or zeros)."""
    counts = np.bincount(assignments, minlength=K).astype(np.float64)
    sums = np.zeros((K, Y.shape[1]))
    np.add.at(sums, assignments, Y)
    C = np.zeros((K, Y.shape[1])) if fallback is None else np.array(fallback, dtype=np.float64)
    nonempty = counts > 0
    C[nonempty] = sums[nonempty] / counts[nonempty, None]
    return C


def _kmeanspp(Y, K, rng, free, centroids=None):
    """k-means++ seeding of K centroids, drawing only from ``free`` points."""
    chosen = [] if centroids is None else [c for c in centroids]
    candidates = np.flatnonzero(free)
    if not chosen:
        chosen.append(Y[candidates[rng.integers(candidates.size)]])
    while len(chosen) < K:
        d2 = squared_distances(Y[candidates], np.array(chosen)).min(axis=1)
        total = d2.sum()
        if total > 0:
            pick = rng.choice(candidates.size, p=d2 / total)
        else:
            pick = rng.integers(candidates.size)
        chosen.append(Y[candidates[pick]])
    return np.array(chosen)


def _reseed_empty(Y, a, C, movable):
    """Move the farthest movable point into each empty cluster."""
    K = C.shape[0]
    sizes = np.bincount(a, minlength=K)
    for k in np.flatnonzero(sizes == 0):
        r = Y - C[a]
        dist = np.einsum("nt,nt->n", r, r)
        ok = movable & (sizes[a] > 1)
        if not np.any(ok):
            raise InvariantError("cannot re-seed an empty cluster: no movable point")
        dist = np.where(ok, dist, -np.inf)
        i = int(np.argmax(dist))
        sizes[a[i]] -= 1
        a[i] = k
        sizes[k] = 1
        C[k] = Y[i]
    return a, C


def kmeans(points, K, seed=0, max_iter=100, init=None, pinned=None) -> ClusterState:
    """Lloyd iterations until the assignment is a fixpoint or ``max_iter`` passes.

    ``init`` warm-starts from an existing state (its assignments and pins);
    otherwise centroids are seeded k-means++ style. Every recorded objective
    is no larger than the one before it.
    """
    Y = np.asarray(points, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    N = Y.shape[0]
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > N:
        raise ValueError(f"K={K} exceeds the number of points N={N}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    if init is not None:
        if init.N != N:
            raise ValueError("init state covers a different number of samples")
        K = init.K
        pins = init.pinned if pinned is None else np.asarray(pinned, dtype=np.int64)
        a = init.assignments.copy()
    else:
        pins = None if pinned is None else np.asarray(pinned, dtype=np.int64)
        a = None
    if pins is not None and np.any(pins >= K):
        raise ValueError("pinned cluster index out of range")
    movable = np.ones(N, dtype=bool) if pins is None else pins == FREE

    if a is None:
        rng = np.random.default_rng(seed)
        if pins is not None and np.any(~movable):
            fixed_k = np.unique(pins[~movable])
            # Pinned clusters come first in the seeding order, then k-means++.
            pinned_means = cluster_means(Y[~movable], pins[~movable], K)[fixed_k]
            C = np.empty((K, Y.shape[1]))
            rest = np.setdiff1d(np.arange(K), fixed_k)
            extra = _kmeanspp(Y, K, rng, movable, centroids=pinned_means)[fixed_k.size :]
            C[fixed_k] = pinned_means
            C[rest] = extra
        else:
            C = _kmeanspp(Y, K, rng, movable)
        a = np.argmin(squared_distances(Y, C), axis=1)
        if pins is not None:
            a = np.where(movable, a, pins)
        C = cluster_means(Y, a, K, fallback=C)
        a, C = _reseed_empty(Y, a, C, movable)
    else:
        # Old centroids may live in another space; empty clusters get re-seeded.
        C = cluster_means(Y, a, K)
        a, C = _reseed_empty(Y, a, C, movable)

    C = cluster_means(Y, a, K, fallback=C)
    history = [kmeans_objective(Y, a, C)]
    for _ in range(max_iter):
        new = np.argmin(squared_distances(Y, C), axis=1)
        new = np.where(movable, new, a)
        new, C = _reseed_empty(Y, new, C.copy(), movable)
        C = cluster_means(Y, new, K, fallback=C)
        history.append(kmeans_objective(Y, new, C))
        if np.array_equal(new, a):
            a = new
            break
        a = new
    return ClusterState(a, C, pins, tuple(history))


def lloyd_pass(points, state: ClusterState) -> ClusterState:
    """One reassignment to the current centroids followed by a centroid update."""
    Y = np.asarray(points, dtype=np.float64)
    if Y.shape[0] != state.N:
        raise ValueError("state covers a different number of samples")
    movable = np.ones(state.N, dtype=bool) if state.pinned is None else state.pinned == FREE
    C = state.centroids.copy()
    a = np.argmin(squared_distances(Y, C), axis=1)
    a = np.where(movable, a, state.assignments)
    a, C = _reseed_empty(Y, a, C, movable)
    C = cluster_means(Y, a, state.K, fallback=C)
    return ClusterState(a, C, state.pinned, (kmeans_objective(Y, a, C),))


def build_indicator(state: ClusterState, N: int | None = None, K: int | None = None) -> np.ndarray:
    """N x K matrix whose column k is the indicator of cluster k divided by sqrt(n_k)."""
    N = state.N if N is None else N
    K = state.K if K is None else K
    if state.N != N:
        raise ValueError(f"state covers {state.N} samples, expected {N}")
    if state.K != K:
        raise ValueError(f"state has {state.K} clusters, expected {K}")
    sizes = np.bincount(state.assignments, minlength=K)
    if np.any(sizes == 0):
        raise InvariantError(f"clusters {np.flatnonzero(sizes == 0).tolist()} are empty")
    H = np.zeros((N, K))
    H[np.arange(N), state.assignments] = 1.0 / np.sqrt(sizes[state.assignments])
    return H


def pin_labelled_clusters(state: ClusterState, labels, points=None) -> ClusterState:
    """Give every labeled identity its own cluster appended after the existing ones.

    ``labels`` is an iterable of ``(sample_index, identity)`` pairs or a mapping.
    New centroids are the member means of ``points`` when given, else the mean
    of the members' previous centroids.
    """
    pairs = labels.items() if hasattr(labels, "items") else labels
    by_sample: dict[int, int] = {}
    for index, identity in pairs:
        index, identity = int(index), int(identity)
        if not 0 <= index < state.N:
            raise ValueError(f"labeled sample index {index} out of range")
        if by_sample.setdefault(index, identity) != identity:
            raise ValueError(f"sample {index} carries conflicting labels")
    if not by_sample:
        return state

    identities = sorted(set(by_sample.values()))
    new_cluster = {p: state.K + j for j, p in enumerate(identities)}
    a = state.assignments.copy()
    pins = np.full(state.N, FREE) if state.pinned is None else state.pinned.copy()
    extra = np.empty((len(identities), state.centroids.shape[1]))
    for j, p in enumerate(identities):
        members = np.array(sorted(i for i, q in by_sample.items() if q == p))
        if points is not None:
            extra[j] = np.asarray(points, dtype=np.float64)[members].mean(axis=0)
        else:
            extra[j] = state.centroids[a[members]].mean(axis=0)
    for i, p in by_sample.items():
        a[i] = new_cluster[p]
        pins[i] = new_cluster[p]
    return replace(
        state,
        assignments=a,
        centroids=np.vstack([state.centroids, extra]),
        pinned=pins,
        objectives=(),
    )
