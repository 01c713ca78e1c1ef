"""Exact t-SNE: perplexity-matched Gaussian affinities embedded in 2-D by
gradient descent on the KL divergence.

O(N^2) throughout, which is fine at the cohort sizes this package handles.
Per-point bandwidths come from a binary search on log-perplexity; the
embedding uses early exaggeration and a two-phase momentum schedule.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12


def _conditional_affinities(sq_dists, perplexity, tol=1e-4, max_iter=50):
    """Row-stochastic P(j|i) whose entropy matches log(perplexity) per point."""
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        d = np.delete(sq_dists[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            sw = w.sum()
            if sw <= 0:
                entropy = 0.0
                row = np.zeros_like(w)
            else:
                row = w / sw
                entropy = np.log(sw) + beta * float((d * w).sum()) / sw
            if abs(entropy - target) < tol:
                break
            if entropy > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        idx = np.arange(n) != i
        p[i, idx] = row
    return p


def _kl(p, q):
    return float((p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)))).sum())


def _low_dim_q(y):
    d = ((y[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    w = 1.0 / (1.0 + d)
    np.fill_diagonal(w, 0.0)
    return np.maximum(w / w.sum(), EPS), w


def tsne(features, perplexity=30.0, seed=0, n_iter=1000, learning_rate=50.0,
         early_exaggeration=12.0, exaggeration_iters=250):
    """Embed row vectors in 2-D. Returns (coords (N, 2), per-iteration KL list).

    The KL history is always computed against the unexaggerated affinities.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    n = x.shape[0]
    if n == 0:
        raise ValueError("tsne requires at least one point")
    if n == 1:
        return np.zeros((1, 2)), [0.0]
    if not 1.0 <= perplexity <= (n - 1) / 3.0:
        raise ValueError(
            f"perplexity must lie in [1, (N-1)/3] = [1, {(n - 1) / 3.0:.2f}], "
            f"got {perplexity}")

    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    cond = _conditional_affinities(sq, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, EPS)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)  # classic per-coordinate gain schedule
    kl_history = []
    for it in range(n_iter):
        q, w = _low_dim_q(y)
        kl_history.append(_kl(p, q))
        p_eff = p * early_exaggeration if it < exaggeration_iters else p
        pq = (p_eff - q) * w
        grad = 4.0 * ((pq.sum(axis=1)[:, None] * y) - pq @ y)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        same_sign = (grad > 0) == (velocity < 0)
        gains = np.where(same_sign, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y, kl_history
