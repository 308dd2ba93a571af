"""Multi-view datasets: the in-memory model, CSV I/O and a synthetic generator.

View ids are 1-based throughout (they are external labels, as in the CSV
format). Identity ids are non-negative; ``-1`` marks an unlabeled row.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigurationError, ParseError, ProtocolError

UNLABELED = -1

# Largest rotation angle (per invariant plane) of a fully distorted view.
MAX_ROTATION_ANGLE = math.pi / 3


class ViewedSample(NamedTuple):
    raw: np.ndarray
    view_id: int
    identity_id: int | None


@dataclass(frozen=True, eq=False)
class Dataset:
    """N raw vectors with their view ids and (optional) identity ids."""

    X: np.ndarray
    views: np.ndarray
    identities: np.ndarray
    num_views: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        views = np.array(self.views, dtype=np.int64, copy=True)
        ids = np.array(self.identities, dtype=np.int64, copy=True)
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValueError("X must be an N x d matrix with d >= 1")
        if views.shape != (X.shape[0],) or ids.shape != (X.shape[0],):
            raise ValueError("views and identities must have one entry per row")
        if not np.all(np.isfinite(X)):
            raise ValueError("raw features must be finite")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if views.size and (views.min() < 1 or views.max() > self.num_views):
            raise ValueError(f"view ids must lie in [1, {self.num_views}]")
        if ids.size and ids.min() < UNLABELED:
            raise ValueError("identity ids must be non-negative (or -1 for unlabeled)")
        for arr in (X, views, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "identities", ids)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(len(self)) and bool(np.all(self.identities != UNLABELED))

    def samples(self) -> Iterator[ViewedSample]:
        for x, v, p in zip(self.X, self.views, self.identities):
            yield ViewedSample(x, int(v), None if p == UNLABELED else int(p))

    def view_counts(self) -> np.ndarray:
        return np.bincount(self.views - 1, minlength=self.num_views)[: self.num_views]

    def missing_views(self) -> list[int]:
        return [v + 1 for v, c in enumerate(self.view_counts()) if c == 0]

    def require_all_views(self):
        missing = self.missing_views()
        if missing:
            raise ConfigurationError(f"views {missing} have no samples")

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.X[index], self.views[index], self.identities[index], self.num_views)

    def with_views(self, views, num_views: int) -> "Dataset":
        return Dataset(self.X, views, self.identities, num_views)

    def with_features(self, X) -> "Dataset":
        return Dataset(X, self.views, self.identities, self.num_views)

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.num_views == other.num_views
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.views, other.views)
            and np.array_equal(self.identities, other.identities)
        )


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic multi-view generator.

    ``view_groups`` optionally partitions the views into families that share
    one base distortion (view ``v`` belongs to family ``(v - 1) % view_groups``);
    ``group_jitter`` scales the per-view deviation from the family distortion.
    """

    num_identities: int = 20
    views: int = 2
    images_per_identity_per_view: int = 4
    dim: int = 8
    identity_spread: float = 0.3
    within_identity_noise: float = 0.09
    view_distortion_strength: float = 0.8
    seed: int = 0
    view_groups: int | None = None
    group_jitter: float = 0.15

    def validate(self):
        counts = {
            "num_identities": self.num_identities,
            "views": self.views,
            "images_per_identity_per_view": self.images_per_identity_per_view,
            "dim": self.dim,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if not self.identity_spread > 0:
            raise ConfigurationError("identity_spread must be > 0")
        if not self.within_identity_noise > 0:
            raise ConfigurationError("within_identity_noise must be > 0")
        if not self.view_distortion_strength >= 0:
            raise ConfigurationError("view_distortion_strength must be >= 0")
        if self.view_groups is not None and not 1 <= self.view_groups <= self.views:
            raise ConfigurationError("view_groups must lie in [1, views]")
        if not self.group_jitter >= 0:
            raise ConfigurationError("group_jitter must be >= 0")


def random_rotation(dim: int, rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Rotation acting by angles drawn from U(0, max_angle) on random orthogonal planes."""
    G = rng.standard_normal((dim, dim))
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))
    rot = np.eye(dim)
    for i in range(dim // 2):
        t = rng.uniform(0.0, max_angle)
        c, s = math.cos(t), math.sin(t)
        rot[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = [[c, -s], [s, c]]
    return Q @ rot @ Q.T


def view_distortions(config: SyntheticConfig, rng: np.random.Generator):
    """Per-view affine maps (A_v, b_v); view 1 is always the identity map."""
    d, s = config.dim, config.view_distortion_strength
    groups = config.view_groups or config.views
    base = []
    for g in range(groups):
        R = random_rotation(d, rng, MAX_ROTATION_ANGLE)
        b = rng.standard_normal(d) * config.identity_spread / math.sqrt(d)
        base.append((R, b))
    maps = []
    for v in range(config.views):
        if v == 0:
            maps.append((np.eye(d), np.zeros(d)))
            continue
        g = v % groups
        if config.view_groups is None:
            R, b = base[g]
        else:
            if g == 0:
                R, b = np.eye(d), np.zeros(d)
            else:
                R, b = base[g]
            jitter = random_rotation(d, rng, config.group_jitter * MAX_ROTATION_ANGLE)
            R = jitter @ R
            b = b + config.group_jitter * rng.standard_normal(d) * config.identity_spread / math.sqrt(d)
        maps.append((s * R + (1.0 - s) * np.eye(d), s * b))
    return maps


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Draw P identities seen in V views under view-specific affine distortion.

    Rows are ordered identity-major, then view, then image.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    maps = view_distortions(config, rng)
    P, V, n, d = (
        config.num_identities,
        config.views,
        config.images_per_identity_per_view,
        config.dim,
    )
    prototypes = rng.normal(0.0, config.identity_spread, size=(P, d))
    noise = rng.normal(0.0, config.within_identity_noise, size=(P, V, n, d))
    X = np.empty((P, V, n, d))
    for v, (A, b) in enumerate(maps):
        X[:, v] = (prototypes[:, None, :] + noise[:, v]) @ A.T + b
    views = np.broadcast_to(np.arange(1, V + 1)[None, :, None], (P, V, n))
    ids = np.broadcast_to(np.arange(P)[:, None, None], (P, V, n))
    return Dataset(X.reshape(-1, d), views.reshape(-1), ids.reshape(-1), V)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view", "identity"] + [f"f{j + 1}" for j in range(dataset.dim)])
        for x, v, p in zip(dataset.X, dataset.views, dataset.identities):
            identity = "" if p == UNLABELED else str(int(p))
            writer.writerow([str(int(v)), identity] + [repr(float(val)) for val in x])


def load_dataset(path) -> Dataset:
    """Parse the ``view,identity,f1,...,fd`` CSV format; V is the largest view id."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"no such dataset file: {path}")
    rows, views, ids = [], [], []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1)
        if len(header) < 3 or header[0].strip() != "view" or header[1].strip() != "identity":
            raise ParseError("header must be view,identity,f1,...,fd", line=1)
        d = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise ParseError(f"expected {d + 2} cells, found {len(row)}", line=lineno)
            try:
                view = int(row[0])
            except ValueError:
                raise ParseError(f"view id {row[0]!r} is not an integer", line=lineno) from None
            if view < 1:
                raise ParseError(f"view id {view} < 1", line=lineno)
            cell = row[1].strip()
            try:
                identity = UNLABELED if cell == "" else int(cell)
            except ValueError:
                raise ParseError(f"identity {cell!r} is not an integer", line=lineno) from None
            if identity < 0 and cell != "":
                raise ParseError(f"identity {identity} is negative", line=lineno)
            try:
                values = [float(c) for c in row[2:]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature cell ({exc})", line=lineno) from None
            if not all(math.isfinite(val) for val in values):
                raise ParseError("non-finite feature value", line=lineno)
            rows.append(values)
            views.append(view)
            ids.append(identity)
    if not rows:
        raise ParseError("no data rows", line=2)
    return Dataset(np.array(rows), np.array(views), np.array(ids), max(views))


def split_train_test(dataset: Dataset, train_fraction: float, seed: int):
    """Split by identity so that no identity appears in both halves."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must lie in (0, 1)")
    if not dataset.labeled:
        raise ProtocolError("split_train_test needs every row to carry an identity")
    identities = np.unique(dataset.identities)
    if identities.size < 2:
        raise ProtocolError("split_train_test needs at least two identities")
    rng = np.random.default_rng(seed)
    order = rng.permutation(identities)
    n_train = int(np.clip(round(train_fraction * identities.size), 1, identities.size - 1))
    train_ids = order[:n_train]
    mask = np.isin(dataset.identities, train_ids)
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))
