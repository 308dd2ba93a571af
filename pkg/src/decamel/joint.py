"""Joint SGD training of a feature extractor and an asymmetric metric.

The loss on a batch B is

    mean_i ||U_{v_i}^T f(m_i) - c_{a_i}||^2 + lam * f_consistency + gamma * f_constraint

with cluster targets ``a_i`` cached from the last centroid refresh and the
view covariances frozen at the initial features.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .camel import (
    AsymmetricMetric,
    ViewCovariances,
    build_consistency_matrix,
    f_consistency,
    f_constraint,
    f_constraint_block,
    view_covariances,
)
from .clustering import ClusterState, cluster_means, lloyd_pass
from .errors import ConfigurationError, TrainingError

log = logging.getLogger(__name__)

CONSTRAINT_FORMS = ("per_view", "block")


@dataclass(frozen=True)
class DecamelConfig:
    lam: float = 0.01
    gamma: float = 10.0
    iterations: int = 10_000
    learning_rate: float = 0.005
    lr_decay_step: int = 5_000
    lr_decay_factor: float = 5.0
    batch_size: int = 216
    centroid_refresh_period: int = 100
    seed: int = 0
    freeze_metric: bool = False
    freeze_extractor: bool = False
    constraint_form: str = "per_view"

    def validate(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not self.lam >= 0 or not self.gamma >= 0:
            raise ConfigurationError("lambda and gamma must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.centroid_refresh_period < 1:
            raise ConfigurationError("centroid_refresh_period must be >= 1")
        if self.iterations and self.centroid_refresh_period > self.iterations:
            raise ConfigurationError("centroid_refresh_period exceeds iterations")
        if self.lr_decay_step < 1 or not self.lr_decay_factor > 0:
            raise ConfigurationError("learning-rate schedule must be positive")
        if self.constraint_form not in CONSTRAINT_FORMS:
            raise ConfigurationError(f"constraint_form must be one of {CONSTRAINT_FORMS}")

    def learning_rate_at(self, step):
        if step < self.lr_decay_step:
            return self.learning_rate
        return self.learning_rate / self.lr_decay_factor


def _constraint_value(metric, cov, form):
    if form == "block":
        return f_constraint_block(metric, cov)
    return f_constraint(metric, cov)


def decamel_loss(X, views, targets, metric, cov, lam, gamma, form="per_view") -> float:
    """Batch loss; ``targets`` holds the centroid row of each sample."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    R = metric.project(X, views) - np.asarray(targets, dtype=np.float64)
    intra = float(np.einsum("nt,nt->", R, R)) / X.shape[0]
    return intra + lam * f_consistency(metric) + gamma * _constraint_value(metric, cov, form)


def grad_projected_sample(y, c) -> np.ndarray:
    """Gradient of ``||y - c||^2`` with respect to the projected sample y."""
    return 2.0 * (np.asarray(y, dtype=np.float64) - np.asarray(c, dtype=np.float64))


def grad_regularizers(metric: AsymmetricMetric, cov: ViewCovariances, lam, gamma, form="per_view"):
    """Per-view gradients of ``lam * f_consistency + gamma * f_constraint``."""
    V, d, T = metric.V, metric.d, metric.T
    U_tilde = metric.block()
    G = 2.0 * lam * build_consistency_matrix(V, d) @ U_tilde
    grads = [G[v * d : (v + 1) * d].copy() for v in range(V)]
    if gamma:
        if form == "block":
            S_tilde = cov.block()
            SU = S_tilde @ U_tilde
            block = 4.0 * gamma * SU @ (U_tilde.T @ SU - V * np.eye(T))
            for v in range(V):
                grads[v] += block[v * d : (v + 1) * d]
        else:
            eye = np.eye(T)
            for v, (U, S) in enumerate(zip(metric.transforms, cov.matrices)):
                SU = S @ U
                grads[v] += 4.0 * gamma * SU @ (U.T @ SU - eye)
    return grads


def grad_metric(X, views, targets, metric, cov, lam, gamma, form="per_view"):
    """Per-view gradients of the batch loss with respect to each U_v.

    The intra part averages ``2 (x x^T U_v - x c^T)`` over the batch.
    """
    X = np.asarray(X, dtype=np.float64)
    views = np.asarray(views)
    R = metric.project(X, views) - np.asarray(targets, dtype=np.float64)
    scale = 2.0 / X.shape[0]
    grads = grad_regularizers(metric, cov, lam, gamma, form)
    for v in range(1, metric.V + 1):
        mask = views == v
        if np.any(mask):
            grads[v - 1] += scale * X[mask].T @ R[mask]
    return grads


def feature_gradient(X, views, targets, metric, scale=None) -> np.ndarray:
    """Rows ``dloss/dx_i = scale * 2 U_{v_i} (U_{v_i}^T x_i - c_i)``; scale defaults to 1/B."""
    X = np.asarray(X, dtype=np.float64)
    views = np.asarray(views)
    scale = 1.0 / X.shape[0] if scale is None else scale
    R = grad_projected_sample(metric.project(X, views), targets)
    G = np.empty_like(X)
    for v, U in enumerate(metric.transforms, start=1):
        mask = views == v
        G[mask] = R[mask] @ U.T
    return scale * G


def backprop_feature(raw, views, targets, metric, extractor, scale=None):
    """Push the sample gradient through the metric into the extractor.

    Returns ``(dloss/dX, parameter gradients)``.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    X = extractor.forward(raw)
    if X.shape[1] != metric.d:
        raise ValueError(f"extractor outputs {X.shape[1]} features, metric expects {metric.d}")
    G = feature_gradient(X, np.atleast_1d(views), np.atleast_2d(targets), metric, scale)
    return G, extractor.backward(raw, G)


def batch_view_counts(view_counts, batch_size) -> np.ndarray:
    """Largest-remainder apportionment of a batch across views, at least one each."""
    counts = np.asarray(view_counts, dtype=np.float64)
    V = counts.size
    if batch_size < V:
        raise ConfigurationError(f"batch_size {batch_size} is smaller than the {V} views")
    quota = counts / counts.sum() * batch_size
    out = np.floor(quota).astype(np.int64)
    remainder = batch_size - out.sum()
    # Stable sort: equal fractions go to the lower view.
    order = np.argsort(-(quota - out), kind="stable")
    out[order[:remainder]] += 1
    for v in np.flatnonzero(out == 0):
        out[np.argmax(out)] -= 1
        out[v] = 1
    return out


def make_batches(views, num_views, batch_size, seed):
    """Endless stream of index batches, stratified by view share."""
    views = np.asarray(views)
    members = [np.flatnonzero(views == v) for v in range(1, num_views + 1)]
    members = [m for m in members if m.size]
    counts = batch_view_counts([m.size for m in members], batch_size)
    rng = np.random.default_rng(seed)
    while True:
        parts = []
        for m, c in zip(members, counts):
            parts.append(rng.choice(m, size=c, replace=c > m.size))
        yield np.concatenate(parts)


def refresh_clusters(raw, views, extractor, metric, state: ClusterState) -> ClusterState:
    """Re-project every sample, reassign to the nearest centroid, recompute centroids."""
    Y = metric.project(extractor.forward(raw), views)
    return lloyd_pass(Y, state)


@dataclass(eq=False)
class TrainedModel:
    """Extractor + metric, plus the bookkeeping needed to embed new samples.

    ``view_map`` sends an original view id to the metric's view index; it
    is the identity unless views were merged (symmetric or view-clustered
    training). Views missing from the map are routed through
    ``prototypes`` when those are present; ``prototype_views`` then turns
    the chosen prototype into a metric view (identity when absent).
    """

    extractor: object
    metric: AsymmetricMetric
    state: ClusterState | None = None
    loss_trace: list = field(default_factory=list)
    cov: ViewCovariances | None = None
    config: dict = field(default_factory=dict)
    view_map: dict | None = None
    prototypes: object = None
    prototype_views: dict | None = None

    def metric_views(self, views, raw=None):
        views = np.asarray(views)
        if self.view_map is None:
            if views.size and (views.min() < 1 or views.max() > self.metric.V):
                raise ValueError(f"unknown view id (model has {self.metric.V} views)")
            return views
        out = np.empty_like(views)
        for v in np.unique(views):
            mask = views == v
            if int(v) in self.view_map:
                out[mask] = self.view_map[int(v)]
            elif self.prototypes is not None and raw is not None:
                from .views import assign_unseen_view

                j = assign_unseen_view(np.asarray(raw)[mask], self.prototypes, self.extractor)
                out[mask] = j if self.prototype_views is None else self.prototype_views[j]
            else:
                raise ValueError(f"unknown view id {int(v)}")
        return out

    def features(self, raw):
        return self.extractor.forward(raw)

    def embed(self, raw, views):
        raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
        return self.metric.project(self.extractor.forward(raw), self.metric_views(views, raw))


def decamel_train(dataset, extractor, init, config: DecamelConfig = DecamelConfig()) -> TrainedModel:
    """Run ``config.iterations`` SGD steps starting from ``init = (metric, state)``."""
    config.validate()
    metric0, state = init
    extractor = extractor.copy()
    raw, views, V = dataset.X, dataset.views, dataset.num_views
    if metric0.V != V:
        raise ConfigurationError(f"metric has {metric0.V} views, dataset has {V}")
    if state.N != len(dataset):
        raise ConfigurationError("initial cluster state covers a different dataset")
    U = [np.array(T) for T in metric0.transforms]

    X0 = extractor.forward(raw)
    if X0.shape[1] != metric0.d:
        raise ConfigurationError(f"extractor outputs {X0.shape[1]} features, metric expects {metric0.d}")
    cov = view_covariances(X0, views, V)
    C = cluster_means(metric0.project(X0, views), state.assignments, state.K, fallback=state.centroids)
    state = replace(state, centroids=C, objectives=())

    trace = []
    batches = make_batches(views, V, config.batch_size, config.seed)
    for step in range(config.iterations):
        lr = config.learning_rate_at(step)
        metric = AsymmetricMetric(tuple(U))
        idx = next(batches)
        Mb, vb = raw[idx], views[idx]
        Xb = extractor.forward(Mb)
        targets = state.centroids[state.assignments[idx]]
        with np.errstate(over="ignore", invalid="ignore"):
            loss = decamel_loss(Xb, vb, targets, metric, cov, config.lam, config.gamma, config.constraint_form)
        if not math.isfinite(loss):
            raise TrainingError("loss is not finite", step)
        trace.append(loss)

        if not config.freeze_extractor and extractor.params:
            G = feature_gradient(Xb, vb, targets, metric)
            grads = extractor.backward(Mb, G)
            extractor.apply_update([lr * g for g in grads])
        if not config.freeze_metric:
            grads = grad_metric(Xb, vb, targets, metric, cov, config.lam, config.gamma, config.constraint_form)
            for v in range(V):
                U[v] = U[v] - lr * grads[v]
        if not all(np.all(np.isfinite(u)) for u in U) or not all(
            np.all(np.isfinite(p)) for p in extractor.params
        ):
            raise TrainingError("parameters diverged", step)

        if (step + 1) % config.centroid_refresh_period == 0:
            state = refresh_clusters(raw, views, extractor, AsymmetricMetric(tuple(U)), state)

    log.debug("trained %d steps, final loss %s", config.iterations, trace[-1] if trace else None)
    return TrainedModel(
        extractor=extractor,
        metric=AsymmetricMetric(tuple(U)),
        state=state,
        loss_trace=trace,
        cov=cov,
        config=dict(config.__dict__),
    )


def freeze_variants(dataset, extractor, init, config: DecamelConfig, freeze) -> TrainedModel:
    """Train with one or both components frozen (``freeze`` names them)."""
    names = {freeze} if isinstance(freeze, str) else set(freeze)
    unknown = names - {"metric", "extractor"}
    if unknown:
        raise ConfigurationError(f"cannot freeze {sorted(unknown)}")
    cfg = replace(
        config,
        freeze_metric=config.freeze_metric or "metric" in names,
        freeze_extractor=config.freeze_extractor or "extractor" in names,
    )
    return decamel_train(dataset, extractor, init, cfg)
