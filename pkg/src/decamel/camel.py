"""Clustering-based asymmetric metric learning with a closed-form eigen step.

Samples are stored as rows (N x d). Block matrices follow the stacked
layout ``U_tilde = [U_1; ...; U_V]`` of shape (V*d) x T, and a lifted
sample places ``x`` in the block of its view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .clustering import ClusterState, build_indicator, kmeans, pin_labelled_clusters
from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True, eq=False)
class AsymmetricMetric:
    """One d x T transformation per view."""

    transforms: tuple

    def __post_init__(self):
        mats = tuple(np.array(U, dtype=np.float64) for U in self.transforms)
        if not mats:
            raise ValueError("a metric needs at least one view")
        shape = mats[0].shape
        if len(shape) != 2:
            raise ValueError("transforms must be d x T matrices")
        for U in mats:
            if U.shape != shape:
                raise ValueError("all transforms must share one shape")
            if not np.all(np.isfinite(U)):
                raise NumericalError("transform has non-finite entries")
            U.setflags(write=False)
        object.__setattr__(self, "transforms", mats)

    @classmethod
    def from_block(cls, U_tilde, num_views):
        d = U_tilde.shape[0] // num_views
        if d * num_views != U_tilde.shape[0]:
            raise ValueError("block rows are not divisible by the number of views")
        return cls(tuple(U_tilde[v * d : (v + 1) * d] for v in range(num_views)))

    @classmethod
    def tied(cls, U, num_views):
        return cls(tuple(U for _ in range(num_views)))

    @property
    def V(self) -> int:
        return len(self.transforms)

    @property
    def d(self) -> int:
        return self.transforms[0].shape[0]

    @property
    def T(self) -> int:
        return self.transforms[0].shape[1]

    def block(self) -> np.ndarray:
        return np.vstack(self.transforms)

    def project(self, X, views) -> np.ndarray:
        """Rows ``U_{v_i}^T x_i`` for 1-based view ids."""
        X = np.asarray(X, dtype=np.float64)
        views = np.asarray(views)
        if X.shape[-1] != self.d:
            raise ValueError(f"features have dimension {X.shape[-1]}, metric expects {self.d}")
        if views.size and (views.min() < 1 or views.max() > self.V):
            raise ValueError(f"view id outside [1, {self.V}]")
        Y = np.empty((X.shape[0], self.T))
        for v, U in enumerate(self.transforms, start=1):
            mask = views == v
            Y[mask] = X[mask] @ U
        return Y

    def same_as(self, other: "AsymmetricMetric") -> bool:
        return self.V == other.V and all(
            np.array_equal(a, b) for a, b in zip(self.transforms, other.transforms)
        )


@dataclass(frozen=True, eq=False)
class ViewCovariances:
    matrices: tuple

    @property
    def V(self) -> int:
        return len(self.matrices)

    def block(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.matrices)


@dataclass(frozen=True)
class CamelConfig:
    lam: float = 0.01
    K: int = 500
    target_dim: int | None = None
    max_alternations: int = 20
    tol: float = 1e-6
    seed: int = 0
    kmeans_max_iter: int = 100

    def validate(self, d=None):
        if not self.lam >= 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.max_alternations < 1:
            raise ConfigurationError("max_alternations must be >= 1")
        if not self.tol > 0:
            raise ConfigurationError("tol must be > 0")
        if self.target_dim is not None:
            if self.target_dim < 1 or (d is not None and self.target_dim > d):
                raise ConfigurationError("target_dim must lie in [1, d]")


def view_covariances(X, views, num_views) -> ViewCovariances:
    """``Sigma_v = sum_{x in view v} x x^T / N_v + I`` (uncentered)."""
    X = np.asarray(X, dtype=np.float64)
    views = np.asarray(views)
    mats = []
    for v in range(1, num_views + 1):
        Xv = X[views == v]
        if Xv.shape[0] == 0:
            raise ValueError(f"view {v} has no samples")
        S = Xv.T @ Xv / Xv.shape[0] + np.eye(X.shape[1])
        mats.append((S + S.T) / 2)
    return ViewCovariances(tuple(mats))


def lift_sample(x, v, num_views) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= v <= num_views:
        raise ValueError(f"view {v} outside [1, {num_views}]")
    d = x.shape[0]
    out = np.zeros(num_views * d)
    out[(v - 1) * d : v * d] = x
    return out


def lift(X, views, num_views) -> np.ndarray:
    """All samples lifted at once: an N x (V*d) matrix."""
    X = np.asarray(X, dtype=np.float64)
    views = np.asarray(views)
    if views.size and (views.min() < 1 or views.max() > num_views):
        raise ValueError(f"view id outside [1, {num_views}]")
    N, d = X.shape
    out = np.zeros((N, num_views * d))
    for v in range(1, num_views + 1):
        mask = views == v
        out[mask, (v - 1) * d : v * d] = X[mask]
    return out


def build_consistency_matrix(num_views, d) -> np.ndarray:
    """(V-1) I on the diagonal blocks, -I off the diagonal."""
    if num_views < 1 or d < 1:
        raise ValueError("V and d must be >= 1")
    pattern = num_views * np.eye(num_views) - np.ones((num_views, num_views))
    return np.kron(pattern, np.eye(d))


def f_intra(X, views, metric: AsymmetricMetric, state: ClusterState) -> float:
    Y = metric.project(X, views)
    if Y.shape[0] != state.N:
        raise ValueError("cluster state covers a different number of samples")
    if state.centroids.shape[1] != metric.T:
        raise ValueError("centroid dimension differs from the metric's target dimension")
    R = Y - state.centroids[state.assignments]
    return float(np.einsum("nt,nt->", R, R)) / Y.shape[0]


def f_consistency(metric: AsymmetricMetric) -> float:
    """Sum over unordered view pairs of ``||U_v - U_w||_F^2``."""
    total = 0.0
    for v in range(metric.V):
        for w in range(v + 1, metric.V):
            diff = metric.transforms[v] - metric.transforms[w]
            total += float(np.sum(diff * diff))
    return total


def f_constraint(metric: AsymmetricMetric, cov: ViewCovariances) -> float:
    """Sum over views of ``||U_v^T Sigma_v U_v - I||_F^2``."""
    if cov.V != metric.V:
        raise ValueError("covariances and metric disagree on the number of views")
    total = 0.0
    eye = np.eye(metric.T)
    for U, S in zip(metric.transforms, cov.matrices):
        if S.shape[0] != U.shape[0]:
            raise ValueError("covariance dimension differs from the metric input dimension")
        G = U.T @ S @ U - eye
        total += float(np.sum(G * G))
    return total


def f_constraint_block(metric: AsymmetricMetric, cov: ViewCovariances) -> float:
    """``||U~^T Sigma~ U~ - V I||_F^2``: the relaxed (summed) form of the constraint."""
    G = sum(U.T @ S @ U for U, S in zip(metric.transforms, cov.matrices)) - metric.V * np.eye(metric.T)
    return float(np.sum(G * G))


def camel_objective(X, views, metric, state, lam) -> float:
    """``f_intra + lam * f_consistency`` evaluated term by term."""
    return f_intra(X, views, metric, state) + lam * f_consistency(metric)


def trace_objective(X_lifted, H, U_tilde, D, lam) -> float:
    """The same objective written with traces of the lifted data and indicator matrix."""
    N = X_lifted.shape[0]
    P = X_lifted @ U_tilde
    first = np.einsum("nt,nt->", P, P) / N
    HP = H.T @ P
    third = np.einsum("kt,kt->", HP, HP) / N
    return float(first + lam * np.trace(U_tilde.T @ D @ U_tilde) - third)


def _fix_signs(U):
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def eigen_step(X_lifted, H, Sigma_tilde, D, lam, T, num_views):
    """Minimize the trace objective over U~ for a fixed H.

    Solves ``M u = eta Sigma~ u`` and keeps the T smallest eigenpairs, each
    scaled to ``u^T Sigma~ u = V``. Returns ``(metric, eigenvalues)``.
    """
    N = X_lifted.shape[0]
    XH = X_lifted.T @ H
    M = lam * D + (X_lifted.T @ X_lifted - XH @ XH.T) / N
    M = (M + M.T) / 2
    if not np.all(np.isfinite(M)):
        raise NumericalError("eigen-step matrix has non-finite entries")
    try:
        eta, U = scipy.linalg.eigh(M, Sigma_tilde, subset_by_index=[0, T - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"generalized eigen-solve failed: {exc}") from exc
    U = _fix_signs(U * math.sqrt(num_views))
    return AsymmetricMetric.from_block(U, num_views), eta


def constraint_residual(metric: AsymmetricMetric, cov: ViewCovariances) -> float:
    G = metric.block().T @ cov.block() @ metric.block()
    return float(np.linalg.norm(G - metric.V * np.eye(metric.T)))


@dataclass(eq=False)
class CamelResult:
    metric: AsymmetricMetric
    state: ClusterState
    trace: list = field(default_factory=list)
    converged: bool = False
    alternations: int = 0

    @property
    def objectives(self) -> np.ndarray:
        return np.array([value for _, value in self.trace])


def camel_fit(X, views, num_views, config: CamelConfig = CamelConfig(), labels=None) -> CamelResult:
    """Alternate the eigen step (H fixed) with k-means in the learned space.

    ``labels`` optionally pins ``(sample_index, identity)`` pairs to extra
    clusters, one per labeled identity, on top of the K free ones. ``trace`` records the trace-form objective after each
    half-step as ``("eigen" | "kmeans", value)``.
    """
    X = np.asarray(X, dtype=np.float64)
    views = np.asarray(views)
    N, d = X.shape
    config.validate(d)
    T = config.target_dim or d
    K = min(config.K, N)

    cov = view_covariances(X, views, num_views)
    Sigma_tilde = cov.block()
    D = build_consistency_matrix(num_views, d)
    X_lifted = lift(X, views, num_views)

    state = kmeans(X, K, seed=config.seed, max_iter=config.kmeans_max_iter)
    if labels is not None:
        state = pin_labelled_clusters(state, labels, points=X)
        state = kmeans(X, state.K, init=state, max_iter=config.kmeans_max_iter)

    result = CamelResult(metric=None, state=state)
    previous = None
    for t in range(1, config.max_alternations + 1):
        H = build_indicator(state)
        metric, _ = eigen_step(X_lifted, H, Sigma_tilde, D, config.lam, T, num_views)
        U_tilde = metric.block()
        result.trace.append(("eigen", trace_objective(X_lifted, H, U_tilde, D, config.lam)))

        new_state = kmeans(
            metric.project(X, views), state.K, init=state, max_iter=config.kmeans_max_iter
        )
        H = build_indicator(new_state)
        value = trace_objective(X_lifted, H, U_tilde, D, config.lam)
        result.trace.append(("kmeans", value))
        result.metric, result.state, result.alternations = metric, new_state, t

        unchanged = np.array_equal(new_state.assignments, state.assignments)
        state = new_state
        if unchanged or (
            previous is not None and abs(previous - value) <= config.tol * abs(previous)
        ):
            result.converged = True
            break
        previous = value
    return result


def symmetric_fit(X, views, num_views, config: CamelConfig = CamelConfig(), labels=None) -> CamelResult:
    """The same alternation with one transformation shared by every view."""
    views = np.asarray(views)
    result = camel_fit(X, np.ones_like(views), 1, config, labels=labels)
    result.metric = AsymmetricMetric.tied(result.metric.transforms[0], num_views)
    return result


def identity_metric(d, num_views) -> AsymmetricMetric:
    return AsymmetricMetric.tied(np.eye(d), num_views)


def random_metric(d, T, num_views, seed) -> AsymmetricMetric:
    """Xavier-uniform transforms, one independent draw per view."""
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / (d + T))
    return AsymmetricMetric(tuple(rng.uniform(-bound, bound, size=(d, T)) for _ in range(num_views)))


def metric_to_dict(metric: AsymmetricMetric, lam=None) -> dict:
    return {
        "V": metric.V,
        "d": metric.d,
        "T": metric.T,
        "lambda": lam,
        "transforms": [U.ravel(order="C").tolist() for U in metric.transforms],
    }


def metric_from_dict(doc) -> AsymmetricMetric:
    d, T = int(doc["d"]), int(doc["T"])
    if len(doc["transforms"]) != int(doc["V"]):
        raise ValueError("model document lists the wrong number of transforms")
    return AsymmetricMetric(
        tuple(np.array(flat, dtype=np.float64).reshape(d, T) for flat in doc["transforms"])
    )
