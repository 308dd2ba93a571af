"""Small differentiable feature extractors operating on batches of raw rows.

Each extractor exposes ``forward(M)``, ``backward(M, G)`` (the parameter
gradients for upstream gradient ``G = dloss/dX``), ``input_grad(M, G)`` and
``apply_update(step)`` which subtracts ``step`` from the parameters.
"""

from __future__ import annotations

import numpy as np


class IdentityExtractor:
    kind = "identity"

    def __init__(self, dim):
        self.in_dim = self.out_dim = int(dim)

    @property
    def params(self):
        return []

    def forward(self, M):
        return np.array(M, dtype=np.float64, copy=True)

    def backward(self, M, G):
        return []

    def input_grad(self, M, G):
        return np.asarray(G, dtype=np.float64)

    def apply_update(self, step):
        if len(step):
            raise ValueError("the identity extractor has no parameters")

    def copy(self):
        return IdentityExtractor(self.in_dim)

    def to_dict(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim, "params": []}


class LinearExtractor:
    """``x = W m`` with W of shape out_dim x in_dim."""

    kind = "linear"

    def __init__(self, W):
        self.W = np.array(W, dtype=np.float64, copy=True)
        self.out_dim, self.in_dim = self.W.shape

    @property
    def params(self):
        return [self.W]

    def forward(self, M):
        return np.asarray(M, dtype=np.float64) @ self.W.T

    def backward(self, M, G):
        return [np.asarray(G).T @ np.asarray(M, dtype=np.float64)]

    def input_grad(self, M, G):
        return np.asarray(G) @ self.W

    def apply_update(self, step):
        (dW,) = step
        self.W -= dW

    def copy(self):
        return LinearExtractor(self.W)

    def to_dict(self):
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "params": [self.W.ravel().tolist()],
        }


class MLPExtractor:
    """One hidden ReLU layer: ``x = W2 relu(W1 m + b1) + b2``."""

    kind = "mlp"

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.array(W1, dtype=np.float64, copy=True)
        self.b1 = np.array(b1, dtype=np.float64, copy=True)
        self.W2 = np.array(W2, dtype=np.float64, copy=True)
        self.b2 = np.array(b2, dtype=np.float64, copy=True)
        self.hidden, self.in_dim = self.W1.shape
        self.out_dim = self.W2.shape[0]
        if self.W2.shape[1] != self.hidden or self.b1.shape != (self.hidden,):
            raise ValueError("inconsistent hidden layer shapes")
        if self.b2.shape != (self.out_dim,):
            raise ValueError("inconsistent output layer shapes")

    @property
    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def _hidden(self, M):
        Z = np.asarray(M, dtype=np.float64) @ self.W1.T + self.b1
        return Z, np.maximum(Z, 0.0)

    def forward(self, M):
        _, A = self._hidden(M)
        return A @ self.W2.T + self.b2

    def backward(self, M, G):
        M = np.asarray(M, dtype=np.float64)
        G = np.asarray(G, dtype=np.float64)
        Z, A = self._hidden(M)
        dZ = (G @ self.W2) * (Z > 0)
        return [dZ.T @ M, dZ.sum(axis=0), G.T @ A, G.sum(axis=0)]

    def input_grad(self, M, G):
        Z, _ = self._hidden(M)
        return ((np.asarray(G) @ self.W2) * (Z > 0)) @ self.W1

    def apply_update(self, step):
        for p, s in zip(self.params, step):
            p -= s

    def copy(self):
        return MLPExtractor(self.W1, self.b1, self.W2, self.b2)

    def to_dict(self):
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": self.hidden,
            "params": [p.ravel().tolist() for p in self.params],
        }


def make_extractor(kind, in_dim, out_dim=None, seed=0, hidden=None, init="identity"):
    """Build an extractor; ``init="identity"`` starts a square linear map at I."""
    out_dim = in_dim if out_dim is None else out_dim
    rng = np.random.default_rng(seed)
    if kind == "identity":
        if out_dim != in_dim:
            raise ValueError("the identity extractor cannot change dimension")
        return IdentityExtractor(in_dim)
    if kind == "linear":
        if init == "identity" and out_dim == in_dim:
            return LinearExtractor(np.eye(in_dim))
        return LinearExtractor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
    if kind == "mlp":
        hidden = hidden or 2 * max(in_dim, out_dim)
        W1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(hidden, in_dim))
        b1 = np.full(hidden, 0.1)
        W2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(out_dim, hidden))
        return MLPExtractor(W1, b1, W2, np.zeros(out_dim))
    raise ValueError(f"unknown extractor kind {kind!r}")


def extractor_from_dict(doc):
    kind = doc["kind"]
    params = [np.array(p, dtype=np.float64) for p in doc["params"]]
    in_dim, out_dim = int(doc["in_dim"]), int(doc["out_dim"])
    if kind == "identity":
        return IdentityExtractor(in_dim)
    if kind == "linear":
        return LinearExtractor(params[0].reshape(out_dim, in_dim))
    if kind == "mlp":
        h = int(doc["hidden"])
        W1, b1, W2, b2 = params
        return MLPExtractor(W1.reshape(h, in_dim), b1, W2.reshape(out_dim, h), b2)
    raise ValueError(f"unknown extractor kind {kind!r}")
