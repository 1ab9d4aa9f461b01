"""Finite-state Gaussian switching autoregression.

The regime ``X_k`` lives on ``{0, ..., d_x - 1}`` and moves according to a
row-stochastic kernel.  Given the regime and the ``s`` previous observations,

    Y_k = a_0(X_k) + a_1(X_k) Y_{k-1} + ... + a_s(X_k) Y_{k-s} + sigma(X_k) e_k

with standard normal ``e_k``.  Transition densities are taken with respect to
the uniform probability measure on the regime set, so the density of a move
``x -> x'`` is ``d_x * Q[x, x']``.  With that convention the minorization
constants are ``sigma_minus = d_x * min(Q)`` and ``sigma_plus = d_x * max(Q)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class RegimeKernel:
    """Transition matrix of the hidden regime chain."""

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise ValueError(f"kernel must be a square matrix, got shape {q.shape}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def d_x(self) -> int:
        return self.q.shape[0]

    @property
    def sigma_minus(self) -> float:
        return float(self.q.min() * self.d_x)

    @property
    def sigma_plus(self) -> float:
        return float(self.q.max() * self.d_x)

    @property
    def rho(self) -> float:
        """Deterministic mixing rate ``1 - sigma_minus / sigma_plus``."""
        return 1.0 - self.sigma_minus / self.sigma_plus

    def is_valid(self) -> bool:
        return bool(np.all(self.q > 0) and np.allclose(self.q.sum(axis=1), 1.0, rtol=0, atol=1e-12))


@dataclass(frozen=True)
class SwitchingArModel:
    """Gaussian AR(s) model with Markov regime.

    Parameters
    ----------
    kernel : RegimeKernel
    ar : array, shape (d_x, s + 1)
        Row ``x`` holds ``(a_0(x), a_1(x), ..., a_s(x))``.
    sigma : array, shape (d_x,)
        Innovation standard deviation per regime.
    """

    kernel: RegimeKernel
    ar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if not isinstance(self.kernel, RegimeKernel):
            object.__setattr__(self, "kernel", RegimeKernel(self.kernel))
        ar = np.array(self.ar, dtype=float)
        if ar.ndim == 1:
            ar = ar[:, None]
        sigma = np.array(self.sigma, dtype=float).reshape(-1)
        d = self.kernel.d_x
        if ar.shape[0] != d or ar.shape[1] < 1:
            raise ValueError(f"ar must have shape ({d}, s+1), got {ar.shape}")
        if sigma.shape != (d,):
            raise ValueError(f"sigma must have shape ({d},), got {sigma.shape}")
        ar.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "ar", ar)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d_x(self) -> int:
        return self.kernel.d_x

    @property
    def s(self) -> int:
        return self.ar.shape[1] - 1

    @property
    def n_params(self) -> int:
        d = self.d_x
        return d * (d - 1) + d * (self.s + 1) + d

    # -- finite-HMM interface used by the filtering and inference modules --

    def transition_matrix(self) -> np.ndarray:
        return self.kernel.q

    def emission_log_matrix(self, y) -> np.ndarray:
        """``log g(Y_k | Ybar_{k-1}, x)`` for k = 1..n, shape (n, d_x)."""
        y = as_series(y, self.s)
        z = y.design_matrix()
        resid = y.targets()[:, None] - z @ self.ar.T
        return -0.5 * LOG_2PI - np.log(self.sigma) - 0.5 * (resid / self.sigma) ** 2

    def score_tensors(self, y):
        """Per-transition complete-data score pieces in the unconstrained scale.

        The complete log density of step k splits as
        ``log q(x_prev, x) + log g_k(x)``, so its gradient is
        ``A[x_prev, x] + B[k, x]`` and its Hessian ``Ah[x_prev, x] + Bh[k, x]``.
        Returns ``(A, Ah, B, Bh)`` with shapes (d, d, p), (d, d, p, p),
        (n, d, p), (n, d, p, p).
        """
        y = as_series(y, self.s)
        d, s, p = self.d_x, self.s, self.n_params
        n = y.n
        q = self.kernel.q
        A = np.zeros((d, d, p))
        Ah = np.zeros((d, d, p, p))
        m = d - 1
        for a in range(d):
            sl = slice(a * m, (a + 1) * m)
            for b in range(d):
                g = -q[a, :m].copy()
                if b < m:
                    g[b] += 1.0
                A[a, b, sl] = g
                Ah[a, b, sl, sl] = np.outer(q[a, :m], q[a, :m]) - np.diag(q[a, :m])

        z = y.design_matrix()
        resid = y.targets()[:, None] - z @ self.ar.T
        var = self.sigma**2
        B = np.zeros((n, d, p))
        Bh = np.zeros((n, d, p, p))
        off = d * m
        for x in range(d):
            ca = slice(off + x * (s + 1), off + (x + 1) * (s + 1))
            ls = off + d * (s + 1) + x
            r = resid[:, x]
            B[:, x, ca] = (r / var[x])[:, None] * z
            B[:, x, ls] = -1.0 + r**2 / var[x]
            Bh[:, x, ca, ca] = -np.einsum("ki,kj->kij", z, z) / var[x]
            cross = -2.0 * (r / var[x])[:, None] * z
            Bh[:, x, ca, ls] = cross
            Bh[:, x, ls, ca] = cross
            Bh[:, x, ls, ls] = -2.0 * r**2 / var[x]
        return A, Ah, B, Bh

    # -- parameter vector --

    def to_vector(self) -> np.ndarray:
        return ThetaVector.from_model(self).values

    def with_vector(self, values) -> "SwitchingArModel":
        return ThetaVector(np.asarray(values, dtype=float), self.d_x, self.s).to_model()


@dataclass(frozen=True)
class ObservationSeries:
    """Observations ``Y_{-s+1}, ..., Y_n``; the first ``s`` values are the initial lags."""

    values: np.ndarray
    s: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if self.s < 0:
            raise ValueError("order s must be nonnegative")
        if v.size < self.s:
            raise ValueError(f"series of length {v.size} has no initial lag window for s={self.s}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.size - self.s

    def lag_window(self, k: int) -> np.ndarray:
        """``Ybar_k = (Y_k, Y_{k-1}, ..., Y_{k-s+1})`` for 0 <= k <= n."""
        if not 0 <= k <= self.n:
            raise IndexError(f"lag index {k} outside [0, {self.n}]")
        j = self.s + k  # position of Y_k + 1
        return self.values[j - self.s : j][::-1].copy()

    def targets(self) -> np.ndarray:
        return self.values[self.s :]

    def design_matrix(self) -> np.ndarray:
        """Rows ``(1, Y_{k-1}, ..., Y_{k-s})`` for k = 1..n."""
        n, s = self.n, self.s
        z = np.ones((n, s + 1))
        for i in range(1, s + 1):
            z[:, i] = self.values[s - i : s - i + n]
        return z


def as_series(y, s: int) -> ObservationSeries:
    if isinstance(y, ObservationSeries):
        if y.s != s:
            raise ValueError(f"series has order {y.s}, model has order {s}")
        return y
    return ObservationSeries(np.asarray(y, dtype=float), s)


@dataclass(frozen=True)
class ThetaVector:
    """Unconstrained coordinates of a :class:`SwitchingArModel`.

    Layout: for every kernel row, ``d_x - 1`` logits ``log(Q[x, j] / Q[x, -1])``;
    then the AR coefficients regime by regime; then ``log sigma`` per regime.
    """

    values: np.ndarray
    d_x: int
    s: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != n_params(self.d_x, self.s):
            raise ValueError(f"expected {n_params(self.d_x, self.s)} values, got {v.size}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_model(cls, model: SwitchingArModel) -> "ThetaVector":
        q = model.kernel.q
        logits = np.log(q[:, :-1]) - np.log(q[:, -1:])
        v = np.concatenate([logits.ravel(), model.ar.ravel(), np.log(model.sigma)])
        return cls(v, model.d_x, model.s)

    def to_model(self) -> SwitchingArModel:
        d, s = self.d_x, self.s
        m = d - 1
        logits = np.concatenate([self.values[: d * m].reshape(d, m), np.zeros((d, 1))], axis=1)
        q = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        ar = self.values[d * m : d * m + d * (s + 1)].reshape(d, s + 1)
        sigma = np.exp(self.values[d * m + d * (s + 1) :])
        return SwitchingArModel(RegimeKernel(q), ar, sigma)

    def constrained(self) -> np.ndarray:
        """Free natural parameters: ``Q[:, :-1]`` row-major, AR coefficients, sigmas."""
        mod = self.to_model()
        return np.concatenate([mod.kernel.q[:, :-1].ravel(), mod.ar.ravel(), mod.sigma])

    def constrained_jacobian(self) -> np.ndarray:
        """d(constrained) / d(unconstrained), block diagonal."""
        d, s = self.d_x, self.s
        m = d - 1
        p = self.values.size
        mod = self.to_model()
        J = np.zeros((p, p))
        q = mod.kernel.q
        for a in range(d):
            sl = slice(a * m, (a + 1) * m)
            qa = q[a, :m]
            J[sl, sl] = np.diag(qa) - np.outer(qa, qa)
        k = d * m
        J[k : k + d * (s + 1), k : k + d * (s + 1)] = np.eye(d * (s + 1))
        k += d * (s + 1)
        J[k:, k:] = np.diag(mod.sigma)
        return J


def n_params(d_x: int, s: int) -> int:
    return d_x * (d_x - 1) + d_x * (s + 1) + d_x


def param_names(d_x: int, s: int, constrained: bool = False) -> list[str]:
    names = []
    for a in range(d_x):
        for j in range(d_x - 1):
            names.append(f"q[{a},{j}]" if constrained else f"logit_q[{a},{j}]")
    for x in range(d_x):
        for i in range(s + 1):
            names.append(f"a{i}[{x}]")
    for x in range(d_x):
        names.append(f"sigma[{x}]" if constrained else f"log_sigma[{x}]")
    return names


@dataclass
class ValidationReport:
    sigma_minus: float
    sigma_plus: float
    rho: float
    checks: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def validate_model(model: SwitchingArModel) -> ValidationReport:
    """Check the computable assumptions: positive kernel, stochastic rows, positive scales.

    Violations are reported, never raised.
    """
    q = model.kernel.q
    d = model.d_x
    row_sums = q.sum(axis=1)
    checks = {
        "kernel_positive": bool(np.all(q > 0)),
        "rows_stochastic": bool(np.all(np.abs(row_sums - 1.0) <= 1e-12)),
        "sigma_positive": bool(np.all(model.sigma > 0)),
        "finite": bool(np.all(np.isfinite(q)) and np.all(np.isfinite(model.ar)) and np.all(np.isfinite(model.sigma))),
    }
    messages = []
    if not checks["kernel_positive"]:
        bad = np.argwhere(q <= 0)
        messages.append(f"non-positive transition entries at {bad.tolist()}")
    if not checks["rows_stochastic"]:
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-12)
        messages.append(f"rows {bad.tolist()} do not sum to 1 (sums {row_sums[bad].tolist()})")
    if not checks["sigma_positive"]:
        messages.append(f"non-positive noise scale in regimes {np.flatnonzero(model.sigma <= 0).tolist()}")
    s_minus = float(q.min() * d)
    s_plus = float(q.max() * d)
    rho = 1.0 - s_minus / s_plus if s_plus > 0 else float("nan")
    return ValidationReport(s_minus, s_plus, rho, checks, messages)


def require_valid(model: SwitchingArModel) -> None:
    report = validate_model(model)
    if not report.ok:
        raise ValueError("invalid model: " + "; ".join(report.messages))


def transition_log_density(model: SwitchingArModel, x: int, x_next: int) -> float:
    """Log density of ``x -> x_next`` w.r.t. the uniform probability on regimes."""
    d = model.d_x
    if not (0 <= x < d and 0 <= x_next < d):
        raise IndexError(f"regime index out of range [0, {d})")
    return float(np.log(model.kernel.q[x, x_next] * d))


def emission_log_density(model: SwitchingArModel, ybar, x: int, y: float) -> float:
    ybar = np.asarray(ybar, dtype=float).reshape(-1)
    if ybar.size != model.s:
        raise ValueError(f"lag window must have {model.s} values, got {ybar.size}")
    if not 0 <= x < model.d_x:
        raise IndexError(f"regime index {x} out of range")
    coef = model.ar[x]
    mean = coef[0] + coef[1:] @ ybar
    sd = model.sigma[x]
    return float(-0.5 * LOG_2PI - np.log(sd) - 0.5 * ((y - mean) / sd) ** 2)


def stationary_regime_dist(kernel) -> np.ndarray:
    """Solve ``pi Q = pi`` with ``sum(pi) = 1``."""
    q = kernel.q if isinstance(kernel, RegimeKernel) else np.asarray(kernel, dtype=float)
    d = q.shape[0]
    a = np.vstack([q.T - np.eye(d), np.ones((1, d))])
    b = np.zeros(d + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    if not np.all(np.isfinite(pi)):
        raise np.linalg.LinAlgError("stationary distribution solve failed")
    # one power step polishes the residual to machine precision
    pi = pi @ q
    return pi / pi.sum()


def simulate(model: SwitchingArModel, n: int, x0: int, ybar0=None, seed=None):
    """Draw ``(X_1..X_n, series)`` started from ``X_0 = x0`` and lags ``ybar0``.

    ``ybar0`` is ordered ``(Y_0, Y_{-1}, ..., Y_{-s+1})``; it defaults to zeros.
    ``seed`` may be an int, a SeedSequence or a Generator.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    s, d = model.s, model.d_x
    ybar0 = np.zeros(s) if ybar0 is None else np.asarray(ybar0, dtype=float).reshape(-1)
    if ybar0.size != s:
        raise ValueError(f"ybar0 must have {s} values")
    cum = np.cumsum(model.kernel.q, axis=1)
    u = rng.random(n)
    e = rng.standard_normal(n)
    xs = np.empty(n, dtype=int)
    values = np.empty(s + n)
    values[:s] = ybar0[::-1]
    x = x0
    for k in range(n):
        x = min(int(np.searchsorted(cum[x], u[k], side="right")), d - 1)
        xs[k] = x
        coef = model.ar[x]
        lags = values[k : k + s][::-1]
        values[s + k] = coef[0] + coef[1:] @ lags + model.sigma[x] * e[k]
    return xs, ObservationSeries(values, s)


def child_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """One independent child stream per replication."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(count)


# -- model file --

def model_to_dict(model: SwitchingArModel) -> dict:
    return {
        "d_x": model.d_x,
        "s": model.s,
        "kernel": model.kernel.q.tolist(),
        "ar": model.ar.tolist(),
        "sigma": model.sigma.tolist(),
    }


def model_from_dict(obj: dict) -> SwitchingArModel:
    required = {"d_x", "s", "kernel", "ar", "sigma"}
    missing = required - set(obj)
    if missing:
        raise ValueError(f"model file missing fields: {sorted(missing)}")
    extra = set(obj) - required
    if extra:
        raise ValueError(f"model file has unknown fields: {sorted(extra)}")
    model = SwitchingArModel(RegimeKernel(obj["kernel"]), obj["ar"], obj["sigma"])
    if model.d_x != int(obj["d_x"]) or model.s != int(obj["s"]):
        raise ValueError("d_x / s do not match the array shapes")
    return model


def load_model(path) -> SwitchingArModel:
    with open(Path(path)) as fh:
        return model_from_dict(json.load(fh))


def save_model(model: SwitchingArModel, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
