"""Finite-grid discretization of the DOA model.

The circle is cut into ``n_bins`` equal bins with nodes ``2 pi j / n_bins``;
the transition matrix is the wrapped-normal density at the nodes, normalized
per row.  The result is an ordinary finite HMM, so exact filtering, EM and
Louis information are available and serve as references for the Monte Carlo
estimators.  Parameters are ``(sigma_eta_sq, sigma_s_sq, sigma_eps_sq)`` in
their natural scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import filtering, inference_exact
from .doa import TWO_PI, DoaParams, beamformer_power, emission_log_density, wrapped_log_density_derivatives
from .mcem import golden_section_max


@dataclass(frozen=True)
class GridDoaModel:
    params: DoaParams
    n_bins: int = 256

    @property
    def nodes(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_bins) / self.n_bins

    def node_index(self, angle: float) -> int:
        j = int(round(angle / TWO_PI * self.n_bins)) % self.n_bins
        if not np.isclose(self.nodes[j], angle % TWO_PI, atol=1e-12):
            raise ValueError(f"angle {angle} is not a grid node")
        return j

    def _increments(self):
        x = self.nodes
        a = np.abs(x[None, :] - x[:, None])
        return np.where(a > np.pi, TWO_PI - a, a)

    def _log_transition_parts(self, v=None):
        v = self.params.sigma_eta_sq if v is None else v
        logq, d1, d2 = wrapped_log_density_derivatives(v, self._increments())
        m = logq.max(axis=1, keepdims=True)
        w = np.exp(logq - m)
        z = w.sum(axis=1, keepdims=True)
        logQ = logq - m - np.log(z)
        return logQ, d1, d2

    def transition_matrix(self) -> np.ndarray:
        return np.exp(self._log_transition_parts()[0])

    def log_transition_matrix(self, v: float) -> np.ndarray:
        return self._log_transition_parts(v)[0]

    def emission_log_matrix(self, y) -> np.ndarray:
        y = np.asarray(y)
        return np.array([emission_log_density(self.params, yk, self.nodes) for yk in y])

    def beam_matrix(self, y) -> np.ndarray:
        return np.array([beamformer_power(yk, self.nodes) for yk in np.asarray(y)])

    def score_tensors(self, y):
        y = np.asarray(y)
        n, d = y.shape
        N = self.n_bins
        logQ, d1, d2 = self._log_transition_parts()
        Q = np.exp(logQ)
        m1 = (Q * d1).sum(axis=1, keepdims=True)
        m2 = (Q * (d2 + d1**2)).sum(axis=1, keepdims=True) - m1**2
        A = np.zeros((N, N, 3))
        Ah = np.zeros((N, N, 3, 3))
        A[:, :, 0] = d1 - m1
        Ah[:, :, 0, 0] = d2 - m2

        sa, sb = self.params.sigma_s_sq, self.params.sigma_eps_sq
        D = d * sa + sb
        yy = np.sum(np.abs(y) ** 2, axis=1)[:, None]
        bm = self.beam_matrix(y)
        B = np.zeros((n, N, 3))
        Bh = np.zeros((n, N, 3, 3))
        c_b = -sa * (d * sa + 2 * sb) / (sb**2 * D**2)
        c_bb = 2 * sa * (sa**2 * d**2 + 3 * sa * sb * d + 3 * sb**2) / (sb**3 * D**3)
        B[:, :, 1] = -d / D + bm / D**2
        B[:, :, 2] = -(d - 1) / sb - 1 / D + yy / sb**2 + c_b * bm
        Bh[:, :, 1, 1] = d**2 / D**2 - 2 * d * bm / D**3
        Bh[:, :, 1, 2] = Bh[:, :, 2, 1] = d / D**2 - 2 * bm / D**3
        Bh[:, :, 2, 2] = (d - 1) / sb**2 + 1 / D**2 - 2 * yy / sb**3 + c_bb * bm
        return A, Ah, B, Bh


def grid_log_likelihood(model: GridDoaModel, y, x0: float = np.pi) -> float:
    return filtering.log_likelihood(model, model.node_index(x0), y)


def grid_louis_information(model: GridDoaModel, y, x0: float = np.pi) -> inference_exact.InformationEstimate:
    return inference_exact.observed_information_louis(model, model.node_index(x0), y)


@dataclass
class GridEmStep:
    params: DoaParams
    loglik: float
    beta: float


def grid_em(y, x0: float, init: DoaParams, iterations: int, n_bins: int = 256,
            eta_search_interval=(np.log(1e-4), np.log(25.0))) -> list[GridEmStep]:
    """Exact EM on the grid HMM; ``loglik`` is evaluated at each step's parameters."""
    y = np.asarray(y)
    n, d = y.shape
    yy = float(np.sum(np.abs(y) ** 2))
    params = init
    out = []
    for it in range(iterations + 1):
        model = GridDoaModel(params, n_bins)
        j0 = model.node_index(x0)
        sm = filtering.smooth(model, j0, y)
        beta = float(np.sum(sm.marginals[1:] * model.beam_matrix(y)))
        out.append(GridEmStep(params, sm.loglik, beta))
        if it == iterations:
            break
        xi_tot = sm.pair_marginals.sum(axis=0)
        obj = lambda logv: float(np.sum(xi_tot * model.log_transition_matrix(np.exp(logv))))
        logv = golden_section_max(obj, *eta_search_interval)
        if obj(logv) < obj(np.log(params.sigma_eta_sq)):
            logv = np.log(params.sigma_eta_sq)
        s_sq = max((beta - yy) / (n * d * (d - 1)), 1e-10)
        e_sq = max((yy - beta / d) / (n * (d - 1)), 1e-10)
        params = DoaParams(float(np.exp(logv)), s_sq, e_sq)
    return out


def sample_posterior_paths(model: GridDoaModel, y, x0: float, size: int, rng, jitter: bool = True) -> np.ndarray:
    """Exact draws of ``X_1..X_n`` from the grid posterior (forward filter, backward sample).

    With ``jitter`` each node is spread uniformly over its bin.
    """
    rng = np.random.default_rng(rng)
    q = model.transition_matrix()
    fr = filtering.forward_filter(model, model.node_index(x0), y)
    w = fr.weights
    n, N = w.shape[0] - 1, model.n_bins
    idx = np.empty((size, n), dtype=int)
    cum = np.cumsum(w[n])
    idx[:, n - 1] = np.minimum(np.searchsorted(cum, rng.random(size) * cum[-1], side="right"), N - 1)
    for k in range(n - 1, 0, -1):
        probs = w[k][None, :] * q[:, idx[:, k]].T  # (size, N)
        cum = np.cumsum(probs, axis=1)
        u = rng.random(size) * cum[:, -1]
        idx[:, k - 1] = np.minimum((cum < u[:, None]).sum(axis=1), N - 1)
    x = model.nodes[idx]
    if jitter:
        x = np.mod(x + (rng.random(x.shape) - 0.5) * TWO_PI / N, TWO_PI)
    return x


def grid_marginal_cdf(model: GridDoaModel, y, x0: float):
    """Posterior CDFs of each ``X_k`` treating node mass as uniform over its bin.

    Returns a function ``cdf(k, x)`` for k = 1..n (1-based) and x in [0, 2pi).
    """
    sm = filtering.smooth(model, model.node_index(x0), y)
    N = model.n_bins
    h = TWO_PI / N
    lo = (np.arange(N) - 0.5) * h  # bin j covers [lo[j], lo[j] + h), bin 0 straddles 0

    def cdf(k, x):
        w = sm.marginals[k]
        x = np.asarray(x, dtype=float)[..., None]
        frac = np.clip((x - lo) / h, 0.0, 1.0)
        # bin 0 is split into [0, h/2) and [2pi - h/2, 2pi)
        frac[..., 0] = (np.minimum(x[..., 0], h / 2) + np.maximum(x[..., 0] - (TWO_PI - h / 2), 0.0)) / h
        return (frac * w).sum(axis=-1)

    return cdf, sm.marginals
