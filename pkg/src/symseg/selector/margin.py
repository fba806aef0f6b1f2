"""Linear one-vs-rest max-margin classifier (L2-regularized hinge loss)."""

from __future__ import annotations

import numpy as np


def _dual_cd_binary(X: np.ndarray, y: np.ndarray, C: float, max_iter: int, tol: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Dual coordinate descent for min 1/2|w|^2 + C sum max(0, 1 - y w.x).

    ``X`` already carries the bias column. Returns ``w``.
    """
    n, d = X.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.einsum("ij,ij->i", X, X)
    for _ in range(max_iter):
        pg_max, pg_min = -np.inf, np.inf
        for i in rng.permutation(n):
            if qii[i] == 0:
                continue
            g = y[i] * (w @ X[i]) - 1.0
            if alpha[i] == 0:
                pg = min(g, 0.0)
            elif alpha[i] == C:
                pg = max(g, 0.0)
            else:
                pg = g
            pg_max, pg_min = max(pg_max, pg), min(pg_min, pg)
            if pg != 0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qii[i], 0.0), C)
                w += (alpha[i] - old) * y[i] * X[i]
        if pg_max - pg_min < tol:
            break
    return w


class LinearOvR:
    """One binary hinge-loss machine per class; scores are raw decision values."""

    def __init__(self, C: float = 1.0, max_iter: int = 1000, tol: float = 1e-3, seed: int = 0,
                 bias: float = 1.0):
        self.C = float(C)
        self.max_iter = int(max_iter)
        self.tol = float(tol)
        self.seed = int(seed)
        self.bias = float(bias)
        self.weights: np.ndarray | None = None  # (n_classes, dim + 1), last column = bias

    def fit(self, X: np.ndarray, y: np.ndarray, n_classes: int) -> "LinearOvR":
        X = np.asarray(X, dtype=float)
        Xb = np.hstack([X, np.full((X.shape[0], 1), self.bias)])
        W = np.zeros((n_classes, Xb.shape[1]))
        for c in range(n_classes):
            rng = np.random.default_rng([self.seed, c])
            yc = np.where(y == c, 1.0, -1.0)
            W[c] = _dual_cd_binary(Xb, yc, self.C, self.max_iter, self.tol, rng)
        self.weights = W
        return self

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.weights[:, :-1].T + self.bias * self.weights[:, -1]
