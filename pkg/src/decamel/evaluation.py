"""Cross-view retrieval evaluation: ranking, CMC, mAP, S-value and 2-D PCA export."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

log = logging.getLogger(__name__)

S_VALUE_EPS = 1e-12


def asym_distance(x_i, v_i, x_j, v_j, model) -> float:
    """``||U_{v_i}^T x_i - U_{v_j}^T x_j||``; a TrainedModel extracts features first."""
    if hasattr(model, "embed"):
        Y = model.embed(np.vstack([x_i, x_j]), np.array([v_i, v_j]))
    else:
        Y = model.project(np.vstack([x_i, x_j]), np.array([v_i, v_j]))
    return float(np.linalg.norm(Y[0] - Y[1]))


@dataclass(frozen=True, eq=False)
class RankedResult:
    probe: int
    order: np.ndarray
    relevant: np.ndarray

    def first_hit(self) -> int:
        """1-based rank of the first relevant gallery item."""
        hits = np.flatnonzero(self.relevant)
        if hits.size == 0:
            raise ProtocolError(f"probe {self.probe} has no relevant gallery item")
        return int(hits[0]) + 1


def rank_gallery(probe_y, gallery_Y, relevant=None, probe=0) -> RankedResult:
    """Order gallery rows by ascending distance to the probe; ties keep gallery order.

    ``relevant`` flags gallery rows (in gallery order) that match the probe.
    """
    gallery_Y = np.atleast_2d(np.asarray(gallery_Y, dtype=np.float64))
    if gallery_Y.shape[0] == 0:
        raise ProtocolError("empty gallery")
    diff = gallery_Y - np.asarray(probe_y, dtype=np.float64)
    dist = np.einsum("gt,gt->g", diff, diff)
    order = np.argsort(dist, kind="stable")
    rel = np.zeros(order.size, dtype=bool) if relevant is None else np.asarray(relevant, dtype=bool)[order]
    return RankedResult(probe, order, rel)


def cmc(results, max_rank) -> np.ndarray:
    """``curve[k-1]`` is the fraction of probes whose first match has rank <= k."""
    if not results:
        raise ProtocolError("no probes to evaluate")
    firsts = np.array([r.first_hit() for r in results])
    ranks = np.arange(1, max_rank + 1)
    return (firsts[None, :] <= ranks[:, None]).mean(axis=1)


def average_precision(relevant_in_rank_order) -> float:
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ProtocolError("no relevant item to average over")
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def mean_ap(results) -> float:
    if not results:
        raise ProtocolError("no probes to evaluate")
    return float(np.mean([average_precision(r.relevant) for r in results]))


def s_value_terms(points, identities, views=None):
    """(inter, intra): mean pairwise centroid distance and mean distance to own centroid.

    With ``views``, only identities seen in at least two views take part.
    """
    Y = np.asarray(points, dtype=np.float64)
    ids = np.asarray(identities)
    keep = np.ones(ids.shape, dtype=bool)
    if views is not None:
        views = np.asarray(views)
        for p in np.unique(ids):
            if np.unique(views[ids == p]).size < 2:
                keep &= ids != p
    Y, ids = Y[keep], ids[keep]
    people = np.unique(ids)
    if people.size < 2:
        raise ValueError("the S-value needs at least two identities")
    centroids = np.array([Y[ids == p].mean(axis=0) for p in people])
    diff = centroids[:, None, :] - centroids[None, :, :]
    pair = np.sqrt(np.einsum("pqt,pqt->pq", diff, diff))
    P = people.size
    inter = pair.sum() / (P * (P - 1))
    own = centroids[np.searchsorted(people, ids)]
    intra = np.linalg.norm(Y - own, axis=1).mean()
    return float(inter), float(intra)


def s_value(points, identities, views=None, eps=S_VALUE_EPS) -> float:
    inter, intra = s_value_terms(points, identities, views)
    if intra < eps:
        warnings.warn("S-value is degenerate: every image sits on its identity centroid", stacklevel=2)
    return inter / max(intra, eps)


@dataclass(eq=False)
class EvalReport:
    cmc: np.ndarray
    mAP: float
    s_value: float
    protocol: dict = field(default_factory=dict)
    s_degenerate: bool = False

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        return {
            "cmc": [float(c) for c in self.cmc],
            "rank1": self.rank1,
            "mAP": self.mAP,
            "s_value": self.s_value,
            "s_degenerate": self.s_degenerate,
            "protocol": self.protocol,
        }


def _embed(model, dataset):
    if model is None:
        return dataset.X.copy()
    if hasattr(model, "embed"):
        return model.embed(dataset.X, dataset.views)
    return model.project(dataset.X, dataset.views)


def run_protocol(
    dataset,
    model=None,
    mode="single",
    repetitions=1,
    seed=0,
    probe_views=None,
    max_rank=20,
) -> EvalReport:
    """Cross-view retrieval on a labeled test set.

    Every image of an identity seen in at least two views is a probe (or only
    those from ``probe_views``); its gallery holds the selected images of
    all other views. ``mode="single"`` draws one gallery image per identity
    and view at each repetition, ``"multi"`` keeps them all. ``model=None``
    ranks by raw Euclidean distance.
    """
    if mode not in ("single", "multi"):
        raise ProtocolError(f"unknown protocol mode {mode!r}")
    if repetitions < 1:
        raise ProtocolError("repetitions must be >= 1")
    if not dataset.labeled:
        raise ProtocolError("evaluation needs identity labels")
    if np.unique(dataset.views).size < 2:
        raise ProtocolError("evaluation needs at least two views")

    Y = _embed(model, dataset)
    ids, views = dataset.identities, dataset.views
    eligible = np.ones(len(dataset), dtype=bool)
    excluded = []
    for p in np.unique(ids):
        mask = ids == p
        if np.unique(views[mask]).size < 2:
            eligible &= ~mask
            excluded.append(int(p))
    if excluded:
        log.warning("identities %s appear in a single view and are not probed", excluded)
    probe_mask = eligible.copy()
    if probe_views is not None:
        probe_mask &= np.isin(views, list(probe_views))
    probes = np.flatnonzero(probe_mask)
    if probes.size == 0:
        raise ProtocolError("no probe images")

    rng = np.random.default_rng(seed)
    groups = {}
    for i in range(len(dataset)):
        groups.setdefault((int(ids[i]), int(views[i])), []).append(i)
    curves, aps = [], []
    for _ in range(repetitions):
        if mode == "single":
            gallery = np.array(sorted(int(rng.choice(g)) for g in groups.values()))
        else:
            gallery = np.arange(len(dataset))
        results = []
        for i in probes:
            g = gallery[views[gallery] != views[i]]
            rel = ids[g] == ids[i]
            if not rel.any():
                continue
            results.append(rank_gallery(Y[i], Y[g], rel, probe=int(i)))
        if not results:
            raise ProtocolError("no probe has a relevant gallery image")
        curves.append(cmc(results, max_rank))
        aps.append(mean_ap(results))

    inter, intra = s_value_terms(Y[eligible], ids[eligible], views[eligible])
    protocol = {
        "mode": mode,
        "repetitions": repetitions,
        "seed": seed,
        "probes": int(probes.size),
        "excluded_identities": excluded,
        "probe_views": None if probe_views is None else sorted(int(v) for v in probe_views),
    }
    return EvalReport(
        cmc=np.mean(curves, axis=0),
        mAP=float(np.mean(aps)),
        s_value=inter / max(intra, S_VALUE_EPS),
        protocol=protocol,
        s_degenerate=intra < S_VALUE_EPS,
    )


def pca_project_2d(points):
    """Top-2 principal coordinates of the centered points and their explained variances.

    Each direction is signed so that its largest-magnitude loading is positive.
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    N = P.shape[0]
    if N < 2:
        raise ValueError("PCA needs at least two points")
    Z = P - P.mean(axis=0)
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    var = s**2 / N
    if var.size == 0 or var[0] <= 0:
        warnings.warn("points have rank 0; PCA projection is all zeros", stacklevel=2)
        return np.zeros((N, 2)), np.zeros(2)
    dirs = np.zeros((2, P.shape[1]))
    explained = np.zeros(2)
    k = min(2, Vt.shape[0])
    dirs[:k] = Vt[:k]
    explained[:k] = var[:k]
    for r in range(k):
        j = np.argmax(np.abs(dirs[r]))
        if dirs[r, j] < 0:
            dirs[r] = -dirs[r]
    return Z @ dirs.T, explained


def write_projection_csv(path, coords, views, identities):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "view", "identity"])
        for (x, y), v, p in zip(coords, views, identities):
            writer.writerow([repr(float(x)), repr(float(y)), int(v), "" if p < 0 else int(p)])
