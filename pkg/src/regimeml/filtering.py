"""Forward filtering, likelihood and smoothing for finite regime sets.

Every function accepts any model exposing ``transition_matrix()`` and
``emission_log_matrix(y)`` (the switching AR model and the gridded DOA model
both do).  Computations run in the log domain with per-step renormalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .switching_model import stationary_regime_dist


@dataclass(frozen=True)
class FilterDistribution:
    weights: np.ndarray
    log_norm: float


@dataclass(frozen=True)
class FilterResult:
    """Filter weights at times 0..n and the per-step log predictive densities.

    ``weights[0]`` is the initial law; ``weights[k]`` is the law of ``X_k``
    given ``Y_1..Y_k``.
    """

    weights: np.ndarray
    log_pred: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.log_pred.sum())

    @property
    def log_norm(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.log_pred)])

    def __len__(self):
        return self.weights.shape[0]

    def __getitem__(self, k) -> FilterDistribution:
        return FilterDistribution(self.weights[k], float(self.log_norm[k]))


@dataclass(frozen=True)
class SmoothingResult:
    """Posterior quantities given all observations.

    marginals : (n + 1, d)      P(X_k | Y_1..Y_n), k = 0..n
    pair_marginals : (n, d, d)  P(X_{k-1}, X_k | Y), k = 1..n
    conditional_transitions : (n, d, d)  P(X_k | X_{k-1}, Y), k = 1..n
    """

    marginals: np.ndarray
    pair_marginals: np.ndarray
    conditional_transitions: np.ndarray
    loglik: float


class FilterError(FloatingPointError):
    pass


@numba.njit(cache=True)
def _forward_kernel(q, logg, init):
    n, d = logg.shape
    w = np.empty((n + 1, d))
    w[0] = init
    log_pred = np.empty(n)
    for k in range(n):
        m = logg[k].max()
        c = 0.0
        for b in range(d):
            acc = 0.0
            for a in range(d):
                acc += w[k, a] * q[a, b]
            u = acc * np.exp(logg[k, b] - m)
            w[k + 1, b] = u
            c += u
        if not (c > 0.0) or not np.isfinite(c) or not np.isfinite(m):
            return w, log_pred, k
        for b in range(d):
            w[k + 1, b] /= c
        log_pred[k] = np.log(c) + m
    return w, log_pred, -1


@numba.njit(cache=True)
def _backward_kernel(q, logg):
    n, d = logg.shape
    beta = np.empty((n + 1, d))
    beta[n] = 1.0
    tmp = np.empty(d)
    for k in range(n, 0, -1):
        m = logg[k - 1].max()
        for b in range(d):
            tmp[b] = np.exp(logg[k - 1, b] - m) * beta[k, b]
        tot = 0.0
        for a in range(d):
            acc = 0.0
            for b in range(d):
                acc += q[a, b] * tmp[b]
            beta[k - 1, a] = acc
            tot += acc
        for a in range(d):
            beta[k - 1, a] /= tot
    return beta


def _init_weights(init, d: int) -> np.ndarray:
    if np.isscalar(init) or np.ndim(init) == 0:
        x0 = int(init)
        if not 0 <= x0 < d:
            raise IndexError(f"initial regime {x0} out of range [0, {d})")
        w = np.zeros(d)
        w[x0] = 1.0
        return w
    w = np.asarray(init, dtype=float).reshape(-1)
    if w.size != d or np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
        raise ValueError("initial weights must be a probability vector over the regimes")
    return w


def _forward_arrays(q, logg, init):
    w, log_pred, fail = _forward_kernel(np.ascontiguousarray(q), np.ascontiguousarray(logg), init)
    if fail >= 0:
        raise FilterError(f"zero or non-finite predictive mass at step {fail + 1}")
    return FilterResult(w, log_pred)


def forward_filter(model, init, y) -> FilterResult:
    """Filter from a fixed initial regime (int) or initial weights (vector)."""
    q = model.transition_matrix()
    logg = model.emission_log_matrix(y)
    return _forward_arrays(q, logg, _init_weights(init, q.shape[0]))


def log_likelihood(model, x0, y) -> float:
    """Conditional log-likelihood ``log p(Y_1..Y_n | Ybar_0, X_0 = x0)``."""
    return forward_filter(model, x0, y).loglik


def likelihood_matrix_product(model, x0, y) -> float:
    """Log of ``e_{x0}^T (prod_k Q G_k) 1`` evaluated as a rescaled matrix product."""
    q = model.transition_matrix()
    logg = model.emission_log_matrix(y)
    d = q.shape[0]
    prod = np.eye(d)
    log_scale = 0.0
    for k in range(logg.shape[0]):
        m = logg[k].max()
        prod = prod @ (q * np.exp(logg[k] - m)[None, :])
        c = prod.max()
        prod /= c
        log_scale += m + np.log(c)
    init = _init_weights(x0, d)
    return float(np.log(init @ prod @ np.ones(d)) + log_scale)


def _smooth_arrays(q, logg, init) -> SmoothingResult:
    fr = _forward_arrays(q, logg, init)
    w = fr.weights
    beta = _backward_kernel(np.ascontiguousarray(q), np.ascontiguousarray(logg))
    n = logg.shape[0]
    marg = w * beta
    marg /= marg.sum(axis=1, keepdims=True)
    e = np.exp(logg - logg.max(axis=1, keepdims=True)) * beta[1:]  # (n, d)
    cond = q[None, :, :] * e[:, None, :]
    cond /= cond.sum(axis=2, keepdims=True)
    pair = w[:n, :, None] * q[None, :, :] * e[:, None, :]
    pair /= pair.sum(axis=(1, 2), keepdims=True)
    return SmoothingResult(marg, pair, cond, fr.loglik)


def smooth(model, x0, y) -> SmoothingResult:
    q = model.transition_matrix()
    logg = model.emission_log_matrix(y)
    return _smooth_arrays(q, logg, _init_weights(x0, q.shape[0]))


def total_variation(p1, p2) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p1) - np.asarray(p2)).sum(axis=-1)


def forgetting_gap(model, y, init1, init2) -> np.ndarray:
    """TV distance between two filters at times 0..n (compare ``gap[k]`` with ``rho**k``)."""
    f1 = forward_filter(model, init1, y)
    f2 = forward_filter(model, init2, y)
    return total_variation(f1.weights, f2.weights)


def mixing_rate(model) -> float:
    q = model.transition_matrix()
    return 1.0 - q.min() / q.max()


def stationary_log_likelihood(model, y) -> float:
    """Log-likelihood with ``X_0`` drawn from the stationary regime law (pure HMM only)."""
    if getattr(model, "s", 0) != 0:
        raise NotImplementedError("stationary likelihood is only available for s = 0")
    pi = stationary_regime_dist(model.transition_matrix())
    return forward_filter(model, pi, y).loglik


def _path_log_weights(model, x0, y):
    logq = np.log(model.transition_matrix())
    logg = model.emission_log_matrix(y)
    n, d = logg.shape
    paths = np.array(list(np.ndindex(*(d,) * n)), dtype=int).reshape(-1, n)
    lw = np.zeros(len(paths))
    prev = np.full(len(paths), int(x0))
    for k in range(n):
        lw += logq[prev, paths[:, k]] + logg[k, paths[:, k]]
        prev = paths[:, k]
    return paths, lw


def brute_force_likelihood(model, x0, y) -> float:
    """Sum over every regime path from a fixed ``x0``; exponential in n, for cross-checks only."""
    _, lw = _path_log_weights(model, x0, y)
    m = lw.max()
    return float(m + np.log(np.exp(lw - m).sum()))


def brute_force_marginals(model, x0, y) -> np.ndarray:
    """Posterior regime marginals at times 1..n by path enumeration (fixed ``x0``)."""
    paths, lw = _path_log_weights(model, x0, y)
    n, d = paths.shape[1], model.transition_matrix().shape[0]
    wts = np.exp(lw - lw.max())
    wts /= wts.sum()
    out = np.zeros((n, d))
    for k in range(n):
        np.add.at(out[k], paths[:, k], wts)
    return out
