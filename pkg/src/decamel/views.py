"""View prototypes: cluster camera views by their feature statistics.

A view is summarized by ``w_v = [mean_v, std_v]`` of its extracted
features; views are grouped with k-means and each group is trained as one
view. A view unseen at training time is routed to the closest prototype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camel import AsymmetricMetric
from .clustering import kmeans
from .errors import ConfigurationError, InvariantError


@dataclass(frozen=True, eq=False)
class ViewRepresentation:
    mean: np.ndarray
    std: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.mean, self.std])


def view_representation(features) -> ViewRepresentation:
    """Per-dimension mean and population standard deviation."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if F.shape[0] == 0:
        raise ValueError("a view representation needs at least one sample")
    return ViewRepresentation(F.mean(axis=0), F.std(axis=0))


def view_distance(w_u, w_v) -> float:
    w_u, w_v = np.asarray(w_u, dtype=np.float64), np.asarray(w_v, dtype=np.float64)
    if w_u.shape != w_v.shape:
        raise ValueError("view representations differ in length")
    diff = w_u - w_v
    return float(np.sqrt(0.5 * diff @ diff))


@dataclass(eq=False)
class ViewPrototypeSet:
    """J prototype centroids and the map from training view id to prototype id (both 1-based).

    ``centroids`` are computed with the extractor used for clustering;
    ``trained_centroids``, when set, are recomputed with the trained extractor
    and take precedence for routing unseen views.
    """

    centroids: np.ndarray
    assignment: dict
    trained_centroids: np.ndarray | None = None

    @property
    def J(self) -> int:
        return self.centroids.shape[0]

    def members(self, j) -> list[int]:
        return sorted(v for v, p in self.assignment.items() if p == j)

    def routing_centroids(self) -> np.ndarray:
        return self.centroids if self.trained_centroids is None else self.trained_centroids


def representations(dataset, extractor) -> dict:
    feats = extractor.forward(dataset.X)
    return {
        int(v): view_representation(feats[dataset.views == v]).w
        for v in np.unique(dataset.views)
    }


def cluster_views(dataset, extractor, J, seed=0) -> ViewPrototypeSet:
    """k-means over the view representations of every view present in ``dataset``.

    Prototypes are numbered by their smallest member view, so J = V keeps
    every view id unchanged.
    """
    reps = representations(dataset, extractor)
    view_ids = sorted(reps)
    if not 1 <= J <= len(view_ids):
        raise ConfigurationError(f"J={J} must lie in [1, {len(view_ids)}]")
    W = np.array([reps[v] for v in view_ids])
    state = kmeans(W, J, seed=seed)
    first_member = {}
    for v, k in zip(view_ids, state.assignments):
        first_member.setdefault(int(k), v)
    order = sorted(first_member, key=first_member.get)
    renumber = {k: j + 1 for j, k in enumerate(order)}
    assignment = {v: renumber[int(k)] for v, k in zip(view_ids, state.assignments)}
    centroids = state.centroids[order]
    return ViewPrototypeSet(centroids, assignment)


def relabel_views(dataset, prototypes: ViewPrototypeSet):
    """Replace each view id by its prototype id; the result has J views."""
    new = np.empty_like(dataset.views)
    for v in np.unique(dataset.views):
        if int(v) not in prototypes.assignment:
            raise InvariantError(f"view {int(v)} has no prototype")
        new[dataset.views == v] = prototypes.assignment[int(v)]
    return dataset.with_views(new, prototypes.J)


def recompute_prototypes(dataset, extractor, prototypes: ViewPrototypeSet) -> ViewPrototypeSet:
    """Prototype centroids re-estimated with ``extractor`` (e.g. after training)."""
    reps = representations(dataset, extractor)
    trained = np.array(
        [np.mean([reps[v] for v in prototypes.members(j)], axis=0) for j in range(1, prototypes.J + 1)]
    )
    return ViewPrototypeSet(prototypes.centroids, dict(prototypes.assignment), trained)


def assign_unseen_view(raw, prototypes: ViewPrototypeSet, extractor) -> int:
    """Prototype id closest (L2 in representation space) to the new view; ties go low."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if raw.shape[0] == 0:
        raise ValueError("no samples for the unseen view")
    w = view_representation(extractor.forward(raw)).w
    B = prototypes.routing_centroids()
    dist = np.sqrt(((B - w) ** 2).sum(axis=1))
    return int(np.argmin(dist)) + 1


def expand_metric(metric: AsymmetricMetric, prototypes: ViewPrototypeSet, num_views) -> AsymmetricMetric:
    """Per-view metric where view v uses its prototype's transformation."""
    missing = [v for v in range(1, num_views + 1) if v not in prototypes.assignment]
    if missing:
        raise InvariantError(f"views {missing} have no prototype")
    return AsymmetricMetric(
        tuple(metric.transforms[prototypes.assignment[v] - 1] for v in range(1, num_views + 1))
    )


def prototypes_to_dict(prototypes: ViewPrototypeSet) -> dict:
    return {
        "J": prototypes.J,
        "centroids": prototypes.centroids.tolist(),
        "trained_centroids": None
        if prototypes.trained_centroids is None
        else prototypes.trained_centroids.tolist(),
        "assignment": {str(v): j for v, j in sorted(prototypes.assignment.items())},
    }


def prototypes_from_dict(doc) -> ViewPrototypeSet:
    trained = doc.get("trained_centroids")
    return ViewPrototypeSet(
        np.array(doc["centroids"], dtype=np.float64),
        {int(v): int(j) for v, j in doc["assignment"].items()},
        None if trained is None else np.array(trained, dtype=np.float64),
    )
