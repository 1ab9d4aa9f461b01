"""Score, observed information and maximum likelihood for finite regime sets.

The score uses the Fisher identity: it is the posterior mean of the summed
complete-data scores.  The observed information uses the missing information
principle,

    -hess l_n = -E[sum phidot | Y] - var[sum phi | Y],

with the conditional variance obtained by propagating the posterior regime
chain (an inhomogeneous Markov chain given the data) backwards.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from . import filtering
from .switching_model import (
    SwitchingArModel,
    ThetaVector,
    as_series,
    child_seeds,
    require_valid,
    simulate,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompleteScoreTerm:
    phi: np.ndarray
    phidot: np.ndarray


@dataclass(frozen=True)
class InformationEstimate:
    matrix: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.provenance not in {"louis-exact", "louis-monte-carlo", "finite-difference"}:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


def complete_score(model: SwitchingArModel, x_prev: int, x: int, ybar, y: float) -> CompleteScoreTerm:
    """Gradient and Hessian of ``log q(x_prev, x) + log g(y | ybar, x)``."""
    ybar = np.asarray(ybar, dtype=float).reshape(-1)
    if ybar.size != model.s:
        raise ValueError(f"lag window must have {model.s} values")
    series = np.concatenate([ybar[::-1], [y]])
    A, Ah, B, Bh = model.score_tensors(as_series(series, model.s))
    return CompleteScoreTerm(A[x_prev, x] + B[0, x], Ah[x_prev, x] + Bh[0, x])


def _posterior(model, x0, y):
    y = as_series(y, model.s) if hasattr(model, "s") else y
    q = model.transition_matrix()
    logg = model.emission_log_matrix(y)
    sm = filtering._smooth_arrays(q, logg, filtering._init_weights(x0, q.shape[0]))
    return sm, model.score_tensors(y)


def _score_from(sm, tensors) -> np.ndarray:
    A, _, B, _ = tensors
    pair_total = sm.pair_marginals.sum(axis=0)
    return np.einsum("ab,abp->p", pair_total, A) + np.einsum("kb,kbp->p", sm.marginals[1:], B)


def fisher_score(model, x0, y) -> np.ndarray:
    """Gradient of the conditional log-likelihood in the unconstrained scale."""
    sm, tensors = _posterior(model, x0, y)
    return _score_from(sm, tensors)


def loglik_and_score(model, x0, y):
    sm, tensors = _posterior(model, x0, y)
    return sm.loglik, _score_from(sm, tensors)


def _louis_terms(sm, tensors):
    A, Ah, B, Bh = tensors
    xi, cond, marg = sm.pair_marginals, sm.conditional_transitions, sm.marginals
    n = xi.shape[0]
    p = A.shape[-1]
    e_term = np.einsum("ab,abpq->pq", xi.sum(axis=0), Ah) + np.einsum("kb,kbpq->pq", marg[1:], Bh)

    means = np.einsum("kab,abp->kp", xi, A) + np.einsum("kb,kbp->kp", marg[1:], B)

    d = A.shape[0]
    h = np.zeros((d, p))  # E[sum_{j>k} centred phi_j | X_k = b, Y]
    var = np.zeros((p, p))
    for k in range(n - 1, -1, -1):
        f = A + B[k][None, :, :] - means[k]
        wf = xi[k][:, :, None] * f
        var += np.einsum("abp,abq->pq", wf, f)
        cross = np.einsum("abp,bq->pq", wf, h)
        var += cross + cross.T
        h = np.einsum("ab,abp->ap", cond[k], f + h[None, :, :])
    return e_term, var


def observed_information_louis(model, x0, y, normalized: bool = False) -> InformationEstimate:
    """Exact observed information ``-hess l_n`` via the missing information principle."""
    sm, tensors = _posterior(model, x0, y)
    e_term, var = _louis_terms(sm, tensors)
    info = -(e_term + var)
    info = 0.5 * (info + info.T)
    if normalized:
        info = info / max(sm.pair_marginals.shape[0], 1)
    return InformationEstimate(info, "louis-exact")


def louis_components(model, x0, y):
    """``(E[sum phidot | Y], var[sum phi | Y])`` separately."""
    sm, tensors = _posterior(model, x0, y)
    return _louis_terms(sm, tensors)


def conditional_score_covariances(model, x0, y) -> np.ndarray:
    """``cov(phi_i, phi_j | Y)`` for every pair of steps, shape (n, n, p, p).

    Builds the joint posterior law of ``(X_{i-1}, X_i, X_{j-1}, X_j)`` from the
    pair marginals and products of conditional transitions.  Quadratic in n;
    meant for small problems and diagnostics.
    """
    sm, (A, _, B, _) = _posterior(model, x0, y)
    xi, cond = sm.pair_marginals, sm.conditional_transitions
    n, d = xi.shape[0], A.shape[0]
    p = A.shape[-1]
    f = A[None] + B[:, None, :, :]  # (n, d, d, p)
    means = np.einsum("kab,kabp->kp", xi, f)
    out = np.zeros((n, n, p, p))
    for i in range(n):
        out[i, i] = np.einsum("ab,abp,abq->pq", xi[i], f[i], f[i]) - np.outer(means[i], means[i])
        t = np.eye(d)
        for j in range(i + 1, n):
            joint = np.einsum("ab,bc,ce->abce", xi[i], t, cond[j])
            second = np.einsum("abce,abp,ceq->pq", joint, f[i], f[j])
            out[i, j] = second - np.outer(means[i], means[j])
            out[j, i] = out[i, j].T
            t = t @ cond[j]
    return out


# -- numerical differentiation (cross-check oracles) --

def fd_gradient(fun, x, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def fd_hessian(fun, x, step: float = 1e-4) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    p = x.size
    h = np.empty((p, p))
    f0 = fun(x)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = step
        h[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / step**2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = step
            v = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * step**2)
            h[i, j] = h[j, i] = v
    return h


def fd_information(model, x0, y, step: float = 1e-4) -> InformationEstimate:
    theta = model.to_vector()
    fun = lambda v: filtering.log_likelihood(model.with_vector(v), x0, y)
    return InformationEstimate(-fd_hessian(fun, theta, step), "finite-difference")


# -- optimizer --

@dataclass
class OptimizerConfig:
    gtol: float = 1e-6
    xtol: float = 1e-9
    maxiter: int = 500
    armijo: float = 1e-4
    max_backtracks: int = 40


@dataclass
class AscentResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    reason: str
    line_search_failures: int = 0
    used_nelder_mead: bool = False
    path: list = field(default_factory=list)


def maximize(fun_and_grad, x0, config: OptimizerConfig | None = None) -> AscentResult:
    """BFGS ascent with backtracking line search and a Nelder-Mead fallback.

    ``fun_and_grad(x)`` returns ``(value, gradient)``.  ``path`` records every
    accepted iterate as ``(x, value)``.
    """
    cfg = config or OptimizerConfig()
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_and_grad(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    p = x.size
    hinv = np.eye(p) / max(1.0, np.abs(g).max())
    path = [(x.copy(), f)]
    failures = 0
    used_nm = False
    reason = "maxiter"
    converged = False
    it = 0
    for it in range(1, cfg.maxiter + 1):
        if np.abs(g).max() < cfg.gtol:
            reason, converged, it = "gradient", True, it - 1
            break
        direction = hinv @ g
        slope = direction @ g
        if not slope > 0:
            hinv = np.eye(p) / max(1.0, np.abs(g).max())
            direction = hinv @ g
            slope = direction @ g
        t = 1.0
        accepted = False
        noise = 1e-12 * (1.0 + abs(f))
        for _ in range(cfg.max_backtracks):
            xn = x + t * direction
            fn, gn = fun_and_grad(xn)
            if np.isfinite(fn) and (fn >= f + cfg.armijo * t * slope
                                    or (fn >= f - noise and np.abs(gn).max() < np.abs(g).max())):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            failures += 1
            hinv = np.eye(p) / max(1.0, np.abs(g).max())
            if failures >= 2 and not used_nm:
                used_nm = True
                res = optimize.minimize(lambda v: -fun_and_grad(v)[0], x, method="Nelder-Mead",
                                        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 200 * p})
                fn, gn = fun_and_grad(res.x)
                if fn > f:
                    x, f, g = res.x.copy(), fn, gn
                    path.append((x.copy(), f))
                continue
            if failures >= 2:
                reason = "line-search-failure"
                break
            continue
        step = xn - x
        yk = g - gn  # gradient difference of the minimized objective -f
        sy = step @ yk
        if sy > 1e-300:
            if it == 1 or failures:
                hinv = np.eye(p) * (sy / (yk @ yk))
            rho = 1.0 / sy
            v = np.eye(p) - rho * np.outer(step, yk)
            hinv = v @ hinv @ v.T + rho * np.outer(step, step)
        x, f, g = xn, fn, gn
        path.append((x.copy(), f))
        if np.abs(g).max() < cfg.gtol:
            reason, converged = "gradient", True
            break
        if np.abs(step).max() < cfg.xtol:
            reason, converged = "step", True
            break
    return AscentResult(x, f, g, it, converged, reason, failures, used_nm, path)


@dataclass
class FitResult:
    model: SwitchingArModel
    theta: np.ndarray
    loglik: float
    grad_inf_norm: float
    iterations: int
    converged: bool
    reason: str
    line_search_failures: int
    used_nelder_mead: bool
    path: list = field(repr=False, default_factory=list)

    def report(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "loglik": self.loglik,
            "grad_inf_norm": self.grad_inf_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
            "line_search_failures": self.line_search_failures,
            "used_nelder_mead": self.used_nelder_mead,
        }


def mle_fit(model_init: SwitchingArModel, y, x0: int = 0, config: OptimizerConfig | None = None) -> FitResult:
    """Maximize ``l_n(theta, x0)`` starting from ``model_init``."""
    require_valid(model_init)
    y = as_series(y, model_init.s)
    d, s = model_init.d_x, model_init.s

    def fg(v):
        try:
            return loglik_and_score(ThetaVector(v, d, s).to_model(), x0, y)
        except (filtering.FilterError, FloatingPointError):
            return -np.inf, np.zeros_like(v)

    res = maximize(fg, model_init.to_vector(), config)
    return FitResult(
        ThetaVector(res.x, d, s).to_model(), res.x, float(res.fun), float(np.abs(res.grad).max()),
        res.iterations, res.converged, res.reason, res.line_search_failures, res.used_nelder_mead, res.path,
    )


def random_start(template: SwitchingArModel, y, rng) -> SwitchingArModel:
    """Diffuse starting point: random kernel, regime means spread over the data range."""
    y = as_series(y, template.s)
    d = template.d_x
    rng = np.random.default_rng(rng)
    q = rng.dirichlet(np.full(d, 2.0), size=d) * 0.5 + 0.5 * np.eye(d)
    q /= q.sum(axis=1, keepdims=True)
    ar = np.zeros_like(template.ar)
    t = y.targets()
    ar[:, 0] = np.sort(rng.choice(t, size=d, replace=False))
    sigma = np.full(d, t.std() / np.sqrt(d))
    return SwitchingArModel(q, ar, sigma)


def mle_fit_multistart(template: SwitchingArModel, y, x0: int = 0, n_starts: int = 5, seed=None,
                       config: OptimizerConfig | None = None) -> tuple[FitResult, list[FitResult]]:
    """Run ``n_starts`` fits (the template plus random starts); return the best and all."""
    rng = np.random.default_rng(seed)
    starts = [template] + [random_start(template, y, rng) for _ in range(n_starts - 1)]
    fits = []
    for st in starts:
        try:
            fits.append(mle_fit(st, y, x0, config))
        except ValueError as exc:
            log.warning("start skipped: %s", exc)
    best = max(fits, key=lambda r: r.loglik)
    return best, fits


# -- intervals and tests --

def confidence_intervals(theta_hat, info, level: float = 0.95, transform=None, jacobian=None) -> np.ndarray:
    """Wald intervals ``theta_j +/- z * sd_j``; rows are ``(low, high)``.

    ``info`` is the (total, not per-observation) information in the scale of
    ``theta_hat``.  With ``transform`` and ``jacobian`` the intervals are
    reported for ``transform(theta_hat)`` using the delta method.
    """
    mat = info.matrix if isinstance(info, InformationEstimate) else np.asarray(info, dtype=float)
    mat = 0.5 * (mat + mat.T)
    lam = np.linalg.eigvalsh(mat)
    if lam.min() <= 0:
        raise np.linalg.LinAlgError(f"information is not positive definite (smallest eigenvalue {lam.min():.3e})")
    cov = np.linalg.inv(mat)
    center = np.asarray(theta_hat, dtype=float)
    if transform is not None:
        jac = np.asarray(jacobian(center) if callable(jacobian) else jacobian)
        cov = jac @ cov @ jac.T
        center = np.asarray(transform(center), dtype=float)
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(np.diag(cov))
    return np.column_stack([center - half, center + half])


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    p_value: float
    df: int


def chi_square_test(theta_tilde, theta_star, info) -> ChiSquareResult:
    mat = info.matrix if isinstance(info, InformationEstimate) else np.asarray(info, dtype=float)
    diff = np.asarray(theta_tilde, dtype=float) - np.asarray(theta_star, dtype=float)
    if mat.shape != (diff.size, diff.size):
        raise ValueError("dimension mismatch between parameters and information")
    stat = float(diff @ mat @ diff)
    return ChiSquareResult(stat, float(stats.chi2.sf(stat, diff.size)), diff.size)


@dataclass
class ApproxEstimatorReport:
    slack: float
    theta_hat: np.ndarray
    theta_tilde: np.ndarray
    loglik_hat: float
    loglik_tilde: float
    displacement: float
    bound: float
    min_eigenvalue: float
    holds: bool | None
    status: str


def approx_estimator_check(model_init: SwitchingArModel, y, x0: int, slack: float,
                           fit: FitResult | None = None) -> ApproxEstimatorReport:
    """Stop the ascent once within ``slack`` of the optimum and bound the displacement.

    The displacement of the early-stopped iterate must not exceed
    ``1.1 * sqrt(2 * slack / lambda_min)`` with ``lambda_min`` the smallest
    eigenvalue of the observed information at the optimum.
    """
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    fit = fit or mle_fit(model_init, y, x0)
    # the ascent is not monotone at the roundoff level, so the reference is the best iterate visited
    vals = [l for _, l in fit.path]
    theta_hat, lhat = fit.path[int(np.argmax(vals))]
    for theta_t, l_t in fit.path:
        if l_t >= lhat - slack:
            break
    info = observed_information_louis(ThetaVector(theta_hat, model_init.d_x, model_init.s).to_model(), x0, y)
    lam = info.min_eigenvalue
    disp = float(np.linalg.norm(theta_t - theta_hat))
    if lam <= 0:
        return ApproxEstimatorReport(slack, theta_hat, theta_t, lhat, l_t, disp, float("nan"), lam, None, "inconclusive")
    bound = float(np.sqrt(2.0 * slack / lam) * 1.1)
    holds = disp <= bound
    return ApproxEstimatorReport(slack, theta_hat, theta_t, lhat, l_t, disp, bound, lam, holds,
                                 "holds" if holds else "violated")


# -- Monte Carlo harness --

def align_regimes(model: SwitchingArModel, reference: SwitchingArModel) -> SwitchingArModel:
    """Relabel regimes to minimize the L2 distance of emission parameters to ``reference``."""
    from itertools import permutations

    emis = np.column_stack([model.ar, np.log(model.sigma)])
    ref = np.column_stack([reference.ar, np.log(reference.sigma)])
    best = min(permutations(range(model.d_x)), key=lambda p: np.sum((emis[list(p)] - ref) ** 2))
    perm = list(best)
    q = model.kernel.q[np.ix_(perm, perm)]
    return SwitchingArModel(q, model.ar[perm], model.sigma[perm])


def _worker_count() -> int:
    env = os.environ.get("REGIMEML_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _harness_replication(model_star, n, x0, seed):
    rng = np.random.default_rng(seed)
    _, y = simulate(model_star, n, x0, seed=rng)
    fit = mle_fit(model_star, y, x0)
    aligned = align_regimes(fit.model, model_star)
    info = observed_information_louis(aligned, x0, y)
    lam = info.min_eigenvalue
    if not fit.converged or lam <= 0:
        return None
    theta_hat = aligned.to_vector()
    sd = np.sqrt(np.diag(np.linalg.inv(info.matrix)))
    return (theta_hat - model_star.to_vector()) / sd


@dataclass
class HarnessReport:
    coverage: np.ndarray
    standardized_mean: np.ndarray
    standardized_var: np.ndarray
    replications: int
    failures: int
    z: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "coverage": self.coverage.tolist(),
            "standardized_mean": self.standardized_mean.tolist(),
            "standardized_var": self.standardized_var.tolist(),
            "replications": self.replications,
            "failures": self.failures,
        }


def asymptotic_normality_harness(model_star: SwitchingArModel, n: int, replications: int, seed=None,
                                 x0: int = 0, level: float = 0.95, n_jobs: int | None = None) -> HarnessReport:
    """Simulate, refit and standardize ``theta_hat - theta_star`` by the observed information.

    Coverage, mean and variance are per unconstrained coordinate.
    """
    if replications < 50:
        raise ValueError("at least 50 replications are required")
    seeds = child_seeds(seed, replications)
    n_jobs = n_jobs or _worker_count()
    if n_jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_harness_replication)(model_star, n, x0, s) for s in seeds)
    else:
        results = [_harness_replication(model_star, n, x0, s) for s in seeds]
    ok = [r for r in results if r is not None]
    z = np.array(ok)
    crit = stats.norm.ppf(0.5 + level / 2)
    return HarnessReport(
        coverage=np.mean(np.abs(z) <= crit, axis=0),
        standardized_mean=z.mean(axis=0),
        standardized_var=z.var(axis=0, ddof=1),
        replications=len(ok),
        failures=len(results) - len(ok),
        z=z,
    )
