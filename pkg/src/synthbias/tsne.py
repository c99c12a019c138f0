"""Exact (O(N^2)) t-SNE with perplexity calibration, early exaggeration and momentum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_POINTS = 4000


class TsneError(ValueError):
    pass


@dataclass
class TsneResult:
    embedding: np.ndarray
    objective: list[float]  # KL(P || Q) after each iteration, unexaggerated P


def _sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_p(dist: np.ndarray, perplexity: float, tol: float = 1e-5, steps: int = 100) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches log(perplexity), by bisection on beta."""
    n = dist.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist[i], i)
        d = d - d.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(steps):
            w = np.exp(-d * beta)
            sw = w.sum()
            h = np.log(sw) + beta * (d * w).sum() / sw
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        p[i, np.arange(n) != i] = w / sw
    return p


def joint_p(x: np.ndarray, perplexity: float) -> np.ndarray:
    p = conditional_p(_sq_dists(x), perplexity)
    p = (p + p.T) / (2.0 * p.shape[0])
    return np.maximum(p, 1e-12)


def tsne_embed(
    x,
    dims: int = 2,
    perplexity: float = 30.0,
    iters: int = 500,
    seed: int = 0,
    learning_rate: float = 200.0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 100,
) -> TsneResult:
    if hasattr(x, "values"):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n > MAX_POINTS:
        raise TsneError(f"{n} points exceeds the exact-method limit of {MAX_POINTS}; subsample first")
    if not perplexity < n / 3:
        raise TsneError(f"perplexity {perplexity} must be below N/3 = {n / 3:.1f}")
    P = joint_p(x, perplexity)
    logP = np.log(P)
    np.fill_diagonal(logP, 0.0)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, dims))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    objective = []

    def affinities(y):
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        logQ = np.log(Q)
        np.fill_diagonal(logQ, 0.0)
        return num, Q, float((P * (logP - logQ)).sum())

    num, Q, _ = affinities(y)
    for it in range(iters):
        ex = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        W = (ex * P - Q) * num
        np.fill_diagonal(W, 0.0)
        grad = 4.0 * (W.sum(axis=1)[:, None] * y - W @ y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        num, Q, kl = affinities(y)
        objective.append(kl)
    return TsneResult(y, objective)
