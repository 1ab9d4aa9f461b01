"""Monte Carlo EM for the DOA model.

The E-step samples angle paths from ``P(X_1..X_n | Y_1..Y_n, X_0 = x0)`` with
a random-scan single-site Metropolis-Hastings chain whose proposal at site
``i`` is the wrapped-normal transition out of site ``i - 1``.  The proposal
density cancels against the left transition, leaving only the right
transition and the emission in the acceptance ratio.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .doa import (
    TWO_PI,
    DoaParams,
    _beam_power,
    _wrapped_logq,
    beamformer_power,
    emission_log_density,
    wrap_angle,
    wrap_truncation,
    wrapped_log_density_folded,
    wrapped_transition_log_density,
)
from .inference_exact import InformationEstimate

log = logging.getLogger(__name__)

DEFAULT_ETA_INTERVAL = (math.log(1e-4), math.log(25.0))


@dataclass
class MhState:
    path: np.ndarray
    accepted: int = 0
    proposed: int = 0

    def __post_init__(self):
        self.path = np.array(self.path, dtype=float).reshape(-1)
        if np.any(self.path < 0) or np.any(self.path >= TWO_PI):
            raise ValueError("path entries must lie in [0, 2pi)")
        if self.accepted > self.proposed:
            raise ValueError("accepted count exceeds proposed count")

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


@dataclass
class McemConfig:
    iterations: int = 50
    mh_samples: int = 40_000
    burn_in: int = 20_000
    eta_thin: int = 400
    seed: int | None = None
    eta_search_interval: tuple = DEFAULT_ETA_INTERVAL
    warm_start: bool = True
    sample_growth: float = 1.0  # >1 turns on a geometric m_p schedule
    info_burn_in: int = 100_000
    info_samples: int = 200_000

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mh_samples < 1:
            raise ValueError("mh_samples must be >= 1")
        if not 0 <= self.burn_in < self.mh_samples:
            raise ValueError("burn_in must satisfy 0 <= burn_in < mh_samples")
        if self.eta_thin < 1:
            raise ValueError("eta_thin must be >= 1")
        if self.sample_growth < 1:
            raise ValueError("sample_growth must be >= 1")
        lo, hi = self.eta_search_interval
        if not lo < hi:
            raise ValueError("eta_search_interval must be increasing")
        self.eta_search_interval = (float(lo), float(hi))


@dataclass
class EStepEstimates:
    beta_hat: float
    eta_paths: np.ndarray
    sum_abs_y_sq: float
    n: int
    d: int
    x0: float
    accept_rate: float
    final_path: np.ndarray = field(repr=False)


@numba.njit(cache=True)
def _wrapped_logq_derivs(v, x, x_next, L):
    a = abs(x_next - x) % (2.0 * np.pi)
    if a > np.pi:
        a = 2.0 * np.pi - a
    m = -a * a / (2.0 * v)
    tot = 0.0
    s1w = 0.0
    s2w = 0.0
    for ell in range(-L, L + 1):
        z2 = (a + 2.0 * np.pi * ell) ** 2
        w = np.exp(-z2 / (2.0 * v) - m)
        s1 = -0.5 / v + z2 / (2.0 * v * v)
        s2 = 0.5 / (v * v) - z2 / (v * v * v)
        tot += w
        s1w += w * s1
        s2w += w * (s2 + s1 * s1)
    d1 = s1w / tot
    return d1, s2w / tot - d1 * d1


@numba.njit(cache=True)
def _mh_chain(path, x0, yre, yim, v, c, L, sites, normals, uniforms, burn, thin, paths_out, louis):
    """Run ``sites.size`` single-site proposals in place.

    Returns accepted count, sum over post-burn-in steps of sum_k |a(x_k)^H Y_k|^2,
    number of stored paths, and (if ``louis``) post-burn-in moment sums of
    (T1, Bt, T1^2, Bt^2, T1*Bt, T2) where Bt is the summed beam power and
    T1, T2 the summed first and second sigma_eta^2-derivatives of log q.
    """
    n = path.size
    sd = np.sqrt(v)
    b = np.empty(n)
    for k in range(n):
        b[k] = _beam_power(yre[k], yim[k], path[k])
    t1 = np.zeros(n)
    t2 = np.zeros(n)
    if louis:
        prev = x0
        for k in range(n):
            t1[k], t2[k] = _wrapped_logq_derivs(v, prev, path[k], L)
            prev = path[k]
    bt = b.sum()
    s1 = t1.sum()
    s2 = t2.sum()
    accepted = 0
    beta_sum = 0.0
    stored = 0
    mom = np.zeros(6)
    for step in range(sites.size):
        i = sites[step]
        prev = x0 if i == 0 else path[i - 1]
        prop = (prev + sd * normals[step]) % (2.0 * np.pi)
        if prop >= 2.0 * np.pi:
            prop = 0.0
        bnew = _beam_power(yre[i], yim[i], prop)
        logr = c * (bnew - b[i])
        if i < n - 1:
            logr += _wrapped_logq(v, prop, path[i + 1], L) - _wrapped_logq(v, path[i], path[i + 1], L)
        if np.log(uniforms[step]) < logr:
            accepted += 1
            path[i] = prop
            bt += bnew - b[i]
            b[i] = bnew
            if louis:
                d1, d2 = _wrapped_logq_derivs(v, prev, prop, L)
                s1 += d1 - t1[i]
                s2 += d2 - t2[i]
                t1[i] = d1
                t2[i] = d2
                if i < n - 1:
                    d1, d2 = _wrapped_logq_derivs(v, prop, path[i + 1], L)
                    s1 += d1 - t1[i + 1]
                    s2 += d2 - t2[i + 1]
                    t1[i + 1] = d1
                    t2[i + 1] = d2
        if (step + 1) % 4096 == 0:
            bt = b.sum()
            s1 = t1.sum()
            s2 = t2.sum()
        if step >= burn:
            beta_sum += bt
            if paths_out.shape[0] > 0 and (step - burn + 1) % thin == 0 and stored < paths_out.shape[0]:
                paths_out[stored] = path
                stored += 1
            if louis:
                mom[0] += s1
                mom[1] += bt
                mom[2] += s1 * s1
                mom[3] += bt * bt
                mom[4] += s1 * bt
                mom[5] += s2
    return accepted, beta_sum, stored, mom


def _emission_coefficient(params: DoaParams, d: int) -> float:
    A, B = params.sigma_s_sq, params.sigma_eps_sq
    return A / (B * (d * A + B))


def _split(y):
    y = np.asarray(y, dtype=complex)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValueError("snapshots must have shape (n, d) with d >= 2")
    return np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag)


def _random_draws(rng, n, count):
    sites = rng.integers(0, n, size=count)
    normals = rng.standard_normal(count)
    uniforms = 1.0 - rng.random(count)  # (0, 1]
    return sites, normals, uniforms


def sample_wrapped_proposal(sigma_eta_sq: float, center, rng, size=None):
    """``center + N(0, sigma_eta_sq)`` wrapped to ``[0, 2pi)``."""
    if not sigma_eta_sq > 0:
        raise ValueError("sigma_eta_sq must be positive")
    rng = np.random.default_rng(rng)
    out = wrap_angle(np.asarray(center) + math.sqrt(sigma_eta_sq) * rng.standard_normal(size))
    return out if np.ndim(out) else float(out)


def acceptance_log_ratio(params: DoaParams, y, x0: float, path, i: int, proposal: float) -> float:
    """Log of the simplified acceptance ratio for replacing site ``i`` (0-based) by ``proposal``."""
    y = np.asarray(y)
    n = len(path)
    c = _emission_coefficient(params, y.shape[1])
    out = c * (beamformer_power(y[i], proposal) - beamformer_power(y[i], path[i]))
    if i < n - 1:
        v = params.sigma_eta_sq
        out += wrapped_transition_log_density(v, proposal, path[i + 1]) - wrapped_transition_log_density(v, path[i], path[i + 1])
    return float(out)


def full_joint_log_density(params: DoaParams, y, x0: float, path) -> float:
    """``sum log q(x_{k-1}, x_k) + sum log g(Y_k | x_k)`` with ``x_0 = x0``."""
    y = np.asarray(y)
    path = np.asarray(path, dtype=float)
    prev = np.concatenate([[x0], path[:-1]])
    trans = wrapped_transition_log_density(params.sigma_eta_sq, prev, path)
    emis = sum(emission_log_density(params, y[k], path[k]) for k in range(len(path)))
    return float(np.sum(trans) + emis)


def mh_sweep(params: DoaParams, y, x0: float, state: MhState, rng) -> MhState:
    """One random-scan proposal; returns a new state."""
    rng = np.random.default_rng(rng)
    yre, yim = _split(y)
    path = state.path.copy()
    sites, normals, uniforms = _random_draws(rng, path.size, 1)
    acc, _, _, _ = _mh_chain(path, float(x0), yre, yim, params.sigma_eta_sq,
                             _emission_coefficient(params, yre.shape[1]), wrap_truncation(params.sigma_eta_sq),
                             sites, normals, uniforms, 1, 1, np.empty((0, path.size)), False)
    return MhState(path, state.accepted + acc, state.proposed + 1)


def run_chain(params: DoaParams, y, x0: float, path, proposals: int, rng, burn_in: int = 0,
              thin: int = 0, louis: bool = False):
    """Run the sampler; returns ``(final_path, accepted, beta_sum, stored_paths, moments)``."""
    rng = np.random.default_rng(rng)
    yre, yim = _split(y)
    path = np.array(path, dtype=float).copy()
    sites, normals, uniforms = _random_draws(rng, path.size, proposals)
    n_keep = (proposals - burn_in) // thin if thin > 0 else 0
    out = np.empty((n_keep, path.size))
    acc, beta_sum, stored, mom = _mh_chain(
        path, float(x0), yre, yim, params.sigma_eta_sq, _emission_coefficient(params, yre.shape[1]),
        wrap_truncation(params.sigma_eta_sq), sites, normals, uniforms, burn_in, max(thin, 1), out, louis,
    )
    return path, int(acc), float(beta_sum), out[:stored], mom


def prior_path(sigma_eta_sq: float, n: int, x0: float, rng) -> np.ndarray:
    rng = np.random.default_rng(rng)
    return wrap_angle(x0 + np.cumsum(math.sqrt(sigma_eta_sq) * rng.standard_normal(n)))


def beam_path(y, n_grid: int = 720) -> np.ndarray:
    """Per-snapshot beamformer peak on an ``n_grid`` point grid.

    The default chain start.  A random-walk start can wrap whole segments of
    weakly informed snapshots around the circle, which single-site moves
    take a very long time to undo.
    """
    grid = TWO_PI * np.arange(n_grid) / n_grid
    power = np.array([beamformer_power(yk, grid) for yk in np.asarray(y)])
    return grid[power.argmax(axis=1)]


def e_step(params: DoaParams, y, x0: float, config: McemConfig, rng, init_path=None,
           mh_samples: int | None = None) -> EStepEstimates:
    """Monte Carlo E-step: ``burn_in + mh_samples`` proposals."""
    y = np.asarray(y)
    m = config.mh_samples if mh_samples is None else mh_samples
    if m < 1:
        raise ValueError("mh_samples must be >= 1; an empty average is undefined")
    rng = np.random.default_rng(rng)
    n, d = y.shape
    path = beam_path(y) if init_path is None else init_path
    total = config.burn_in + m
    final, acc, beta_sum, paths, _ = run_chain(params, y, x0, path, total, rng, config.burn_in, config.eta_thin)
    return EStepEstimates(
        beta_hat=beta_sum / m,
        eta_paths=paths,
        sum_abs_y_sq=float(np.sum(np.abs(y) ** 2)),
        n=n,
        d=d,
        x0=float(x0),
        accept_rate=acc / total,
        final_path=final,
    )


def golden_section_max(fun, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Maximizer of a unimodal function on ``[lo, hi]``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    e = a + invphi * (b - a)
    fc, fe = fun(c), fun(e)
    while b - a > tol:
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, e, fe
            e = a + invphi * (b - a)
            fe = fun(e)
    return 0.5 * (a + b)


@numba.njit(cache=True)
def _sum_folded_logq(v, a, L):
    tot = 0.0
    for j in range(a.size):
        tot += _wrapped_logq(v, 0.0, a[j], L)
    return tot


def eta_objective(paths, x0: float):
    """Monte Carlo average of ``sum_k log q_v(x_{k-1}, x_k)`` as a function of ``log v``."""
    paths = np.atleast_2d(paths)
    prev = np.concatenate([np.full((paths.shape[0], 1), x0), paths[:, :-1]], axis=1)
    a = np.abs(paths - prev) % TWO_PI
    a = np.where(a > np.pi, TWO_PI - a, a).ravel()
    m = paths.shape[0]

    def obj(logv):
        v = math.exp(logv)
        return _sum_folded_logq(v, a, wrap_truncation(v)) / m

    return obj


@dataclass
class MStepResult:
    params: DoaParams
    clamped: tuple


def m_step(est: EStepEstimates, eta_search_interval=DEFAULT_ETA_INTERVAL) -> MStepResult:
    n, d, yy, beta = est.n, est.d, est.sum_abs_y_sq, est.beta_hat
    s_sq = (beta - yy) / (n * d * (d - 1))
    e_sq = (yy - beta / d) / (n * (d - 1))
    clamped = []
    if not 0 <= beta <= d * yy:
        log.warning("beta_hat=%.6g outside [0, d * sum|Y|^2]; Monte Carlo noise", beta)
    if s_sq < 1e-10:
        log.warning("sigma_s^2 estimate %.3g clamped to 1e-10", s_sq)
        s_sq, clamped = 1e-10, clamped + ["sigma_s_sq"]
    if e_sq < 1e-10:
        log.warning("sigma_eps^2 estimate %.3g clamped to 1e-10", e_sq)
        e_sq, clamped = 1e-10, clamped + ["sigma_eps_sq"]
    if est.eta_paths.shape[0] == 0:
        raise ValueError("no retained paths for the sigma_eta^2 update")
    obj = eta_objective(est.eta_paths, est.x0)
    logv = golden_section_max(obj, *eta_search_interval, tol=1e-6)
    return MStepResult(DoaParams(math.exp(logv), s_sq, e_sq), tuple(clamped))


TRAJECTORY_COLUMNS = ["iter", "sigma_eta_sq", "sigma_s_sq", "sigma_eps_sq", "beta_hat", "accept_rate"]


@dataclass
class McemTrajectory:
    params: list
    beta_hat: list
    accept_rate: list
    clamped: list
    final_path: np.ndarray = field(repr=False, default=None)

    def as_array(self) -> np.ndarray:
        return np.array([p.as_array() for p in self.params])

    def tail_mean(self, k: int = 25) -> DoaParams:
        arr = self.as_array()
        return DoaParams.from_array(arr[-k:].mean(axis=0) if len(arr) > 1 else arr[0])

    def rows(self):
        for i, p in enumerate(self.params):
            yield [i, p.sigma_eta_sq, p.sigma_s_sq, p.sigma_eps_sq, self.beta_hat[i], self.accept_rate[i]]

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRAJECTORY_COLUMNS)
            for row in self.rows():
                wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def diagnostics_jsonl(self, path) -> None:
        with open(Path(path), "w") as fh:
            for row, cl in zip(self.rows(), [()] + list(self.clamped)):
                rec = dict(zip(TRAJECTORY_COLUMNS, row))
                rec["clamped"] = list(cl)
                fh.write(json.dumps(rec, allow_nan=True) + "\n")


def mcem_fit(y, x0: float, init: DoaParams, config: McemConfig, rng=None) -> McemTrajectory:
    """Alternate Monte Carlo E-steps and M-steps; ``params[0]`` is ``init``."""
    y = np.asarray(y)
    rng = np.random.default_rng(config.seed if rng is None else rng)
    params = init
    traj = McemTrajectory([init], [float("nan")], [float("nan")], [])
    path = beam_path(y)
    m = float(config.mh_samples)
    for it in range(config.iterations):
        if not config.warm_start:
            path = beam_path(y)
        est = e_step(params, y, x0, config, rng, init_path=path, mh_samples=int(round(m)))
        res = m_step(est, config.eta_search_interval)
        params = res.params
        path = est.final_path
        traj.params.append(params)
        traj.beta_hat.append(est.beta_hat)
        traj.accept_rate.append(est.accept_rate)
        traj.clamped.append(res.clamped)
        m *= config.sample_growth
        log.debug("iter %d: %s accept=%.3f", it + 1, params, est.accept_rate)
    traj.final_path = path
    return traj


@dataclass
class McInformationResult:
    info: InformationEstimate
    accept_rate: float
    score_mean: np.ndarray
    asymmetry: float


def louis_from_moments(params: DoaParams, y, mom, count: int):
    """Observed information from post-burn-in moment sums of ``_mh_chain``."""
    y = np.asarray(y)
    n, d = y.shape
    A, B = params.sigma_s_sq, params.sigma_eps_sq
    D = d * A + B
    yy = float(np.sum(np.abs(y) ** 2))
    e_t1, e_bt, e_t1t1, e_btbt, e_t1bt, e_t2 = np.asarray(mom) / count
    var_t1 = e_t1t1 - e_t1**2
    var_bt = e_btbt - e_bt**2
    cov_t1bt = e_t1bt - e_t1 * e_bt
    c_b = -A * (d * A + 2 * B) / (B**2 * D**2)
    c_bb = 2 * A * (A**2 * d**2 + 3 * A * B * d + 3 * B**2) / (B**3 * D**3)
    # summed complete score is (T1, alpha_A + Bt / D^2, alpha_B + c_b * Bt)
    lin = np.array([0.0, 1.0 / D**2, c_b])
    cov = np.zeros((3, 3))
    cov[0, 0] = var_t1
    cov[0, 1:] = cov[1:, 0] = lin[1:] * cov_t1bt
    cov[1:, 1:] = np.outer(lin[1:], lin[1:]) * var_bt
    score_mean = np.array([
        e_t1,
        -n * d / D + e_bt / D**2,
        n * (-(d - 1) / B - 1 / D) + yy / B**2 + c_b * e_bt,
    ])
    hess = np.zeros((3, 3))
    hess[0, 0] = e_t2
    hess[1, 1] = n * d**2 / D**2 - 2 * d * e_bt / D**3
    hess[1, 2] = hess[2, 1] = n * d / D**2 - 2 * e_bt / D**3
    hess[2, 2] = n * ((d - 1) / B**2 + 1 / D**2) - 2 * yy / B**3 + c_bb * e_bt
    return -(hess + cov), score_mean


def mc_observed_information(params: DoaParams, y, x0: float, burn_in: int = 100_000, samples: int = 200_000,
                            rng=None, init_path=None) -> McInformationResult:
    """Monte Carlo missing-information estimate of ``-hess l_n`` at ``params``."""
    y = np.asarray(y)
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(rng)
    path = beam_path(y) if init_path is None else init_path
    _, acc, _, _, mom = run_chain(params, y, x0, path, burn_in + samples, rng, burn_in, 0, louis=True)
    raw, score_mean = louis_from_moments(params, y, mom, samples)
    asym = float(np.abs(raw - raw.T).max())
    if asym > 1e-6:
        log.warning("information estimate asymmetric by %.3g before symmetrization", asym)
    info = InformationEstimate(0.5 * (raw + raw.T), "louis-monte-carlo")
    return McInformationResult(info, acc / (burn_in + samples), score_mean, asym)


def config_dict(config: McemConfig) -> dict:
    out = asdict(config)
    out["eta_search_interval"] = list(config.eta_search_interval)
    return out
