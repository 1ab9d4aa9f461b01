"""Direction-of-arrival tracking model on a uniform linear array.

The angle follows a Gaussian random walk ``W_k = W_{k-1} + eta_k`` and is
observed through ``Y_k = S_k a(W_k) + eps_k`` with circular complex Gaussian
source ``S_k`` and sensor noise ``eps_k``.  Wrapping the angle to ``[0, 2pi)``
gives a hidden chain on the circle with a wrapped-normal transition density.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

TWO_PI = 2.0 * np.pi
LOG_PI = math.log(math.pi)


@dataclass(frozen=True)
class DoaParams:
    sigma_eta_sq: float
    sigma_s_sq: float
    sigma_eps_sq: float

    def __post_init__(self):
        for name in ("sigma_eta_sq", "sigma_s_sq", "sigma_eps_sq"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_eta_sq, self.sigma_s_sq, self.sigma_eps_sq])

    @classmethod
    def from_array(cls, values) -> "DoaParams":
        a, b, c = (float(v) for v in values)
        return cls(a, b, c)


def steering_vector(w: float, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be >= 1")
    return np.exp(1j * np.arange(d) * w)


def beamformer_power(y, w) -> np.ndarray:
    """``|a(w)^H y|^2`` for a snapshot ``y`` (d,) and angles ``w`` (any shape)."""
    y = np.asarray(y)
    w = np.asarray(w, dtype=float)
    phase = np.exp(-1j * np.multiply.outer(w, np.arange(y.shape[-1])))
    return np.abs(phase @ y) ** 2


def _check_snapshot(y):
    y = np.asarray(y, dtype=complex).reshape(-1)
    if y.size < 2:
        raise ValueError("an array snapshot needs at least 2 sensors")
    if not np.all(np.isfinite(y)):
        raise ValueError("snapshot has non-finite components")
    return y


def emission_log_density(params: DoaParams, y, w) -> np.ndarray:
    """Closed-form log-density of a snapshot given the angle ``w`` (scalar or array)."""
    y = _check_snapshot(y)
    d = y.size
    A, B = params.sigma_s_sq, params.sigma_eps_sq
    c = A / (B * (d * A + B))
    const = -d * LOG_PI - (d - 1) * math.log(B) - math.log(d * A + B) - np.vdot(y, y).real / B
    out = const + c * beamformer_power(y, w)
    return out if np.ndim(out) else float(out)


def covariance(params: DoaParams, w: float, d: int) -> np.ndarray:
    a = steering_vector(w, d)
    return params.sigma_s_sq * np.outer(a, a.conj()) + params.sigma_eps_sq * np.eye(d)


def covariance_inverse(params: DoaParams, w: float, d: int) -> np.ndarray:
    """Closed-form inverse of ``sigma_s^2 a a^H + sigma_eps^2 I``."""
    A, B = params.sigma_s_sq, params.sigma_eps_sq
    a = steering_vector(w, d)
    return -A / (B * (d * A + B)) * np.outer(a, a.conj()) + np.eye(d) / B


def emission_log_density_dense(params: DoaParams, y, w: float) -> float:
    """Same density computed with a dense determinant and solve."""
    y = _check_snapshot(y)
    sig = covariance(params, w, y.size)
    _, logdet = np.linalg.slogdet(sig)
    quad = np.vdot(y, np.linalg.solve(sig, y)).real
    return float(-y.size * LOG_PI - logdet - quad)


def wrap_truncation(sigma_eta_sq: float) -> int:
    """Number of wraps kept on each side.

    With the increment folded to ``[0, pi]`` every omitted term sits at least
    ``2 pi L`` (>= 8 standard deviations) from the origin, so the dropped mass
    is below ``exp(-32)`` relative to the retained mass.
    """
    return max(3, int(math.ceil(8.0 * math.sqrt(sigma_eta_sq) / TWO_PI)))


def _folded_increment(x, x_next):
    a = np.abs(np.asarray(x_next, dtype=float) - np.asarray(x, dtype=float))
    a = np.mod(a, TWO_PI)
    return np.where(a > np.pi, TWO_PI - a, a)


def wrapped_log_density_folded(sigma_eta_sq: float, a) -> np.ndarray:
    """Wrapped-normal log-density at folded increments ``a`` in ``[0, pi]``."""
    L = wrap_truncation(sigma_eta_sq)
    ell = np.arange(-L, L + 1) * TWO_PI
    z = np.asarray(a, dtype=float)[..., None] + ell
    logr = -0.5 * math.log(TWO_PI * sigma_eta_sq) - z**2 / (2.0 * sigma_eta_sq)
    m = logr.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(logr - m).sum(axis=-1, keepdims=True)))[..., 0]


def wrapped_transition_log_density(sigma_eta_sq: float, x, x_next):
    """Log-density (w.r.t. Lebesgue on ``[0, 2pi)``) of moving from ``x`` to ``x_next``."""
    if not sigma_eta_sq > 0:
        raise ValueError("sigma_eta_sq must be positive")
    out = wrapped_log_density_folded(sigma_eta_sq, _folded_increment(x, x_next))
    return out if np.ndim(out) else float(out)


def wrapped_log_density_derivatives(sigma_eta_sq: float, a):
    """Value, first and second derivative in ``sigma_eta_sq`` of the wrapped log-density."""
    v = sigma_eta_sq
    L = wrap_truncation(v)
    ell = np.arange(-L, L + 1) * TWO_PI
    z2 = (np.asarray(a, dtype=float)[..., None] + ell) ** 2
    logr = -0.5 * math.log(TWO_PI * v) - z2 / (2.0 * v)
    m = logr.max(axis=-1, keepdims=True)
    w = np.exp(logr - m)
    tot = w.sum(axis=-1, keepdims=True)
    w = w / tot
    s1 = -0.5 / v + z2 / (2.0 * v**2)
    s2 = 0.5 / v**2 - z2 / v**3
    d1 = (w * s1).sum(axis=-1)
    d2 = (w * (s2 + s1**2)).sum(axis=-1) - d1**2
    return (m + np.log(tot))[..., 0], d1, d2


def wrap_angle(w):
    x = np.mod(np.asarray(w, dtype=float), TWO_PI)
    return np.where(x >= TWO_PI, 0.0, x)


@dataclass(frozen=True)
class DoaData:
    angles: np.ndarray      # wrapped X_1..X_n
    unwrapped: np.ndarray   # W_1..W_n
    snapshots: np.ndarray   # (n, d) complex

    @property
    def n(self) -> int:
        return self.snapshots.shape[0]

    @property
    def d(self) -> int:
        return self.snapshots.shape[1]


def simulate_doa(params: DoaParams, n: int, d: int, w0: float = np.pi, seed=None) -> DoaData:
    if n < 1:
        raise ValueError("n must be >= 1")
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    w = w0 + np.cumsum(math.sqrt(params.sigma_eta_sq) * rng.standard_normal(n))
    src = math.sqrt(params.sigma_s_sq / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    noise = math.sqrt(params.sigma_eps_sq / 2) * (rng.standard_normal((n, d)) + 1j * rng.standard_normal((n, d)))
    y = src[:, None] * np.exp(1j * np.outer(w, np.arange(d))) + noise
    return DoaData(wrap_angle(w), w, y)


# -- fast scalar kernels shared with the sampler --

@numba.njit(cache=True)
def _wrapped_logq(v, x, x_next, L):
    a = abs(x_next - x) % (2.0 * np.pi)
    if a > np.pi:
        a = 2.0 * np.pi - a
    base = -0.5 * np.log(2.0 * np.pi * v)
    m = -a * a / (2.0 * v)  # the l = 0 term dominates for a in [0, pi]
    tot = 0.0
    for ell in range(-L, L + 1):
        z = a + 2.0 * np.pi * ell
        tot += np.exp(-z * z / (2.0 * v) - m)
    return base + m + np.log(tot)


@numba.njit(cache=True)
def _beam_power(yre, yim, x):
    sr = 0.0
    si = 0.0
    for j in range(yre.size):
        c = np.cos(j * x)
        s = np.sin(j * x)
        # conj(e^{ijx}) * y_j
        sr += c * yre[j] + s * yim[j]
        si += c * yim[j] - s * yre[j]
    return sr * sr + si * si


# -- file formats --

def write_snapshots_csv(path, snapshots) -> None:
    snapshots = np.asarray(snapshots)
    d = snapshots.shape[1]
    header = [f"{p}{j}" for j in range(d) for p in ("re", "im")]
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in snapshots:
            wr.writerow([repr(float(v)) for z in row for v in (z.real, z.imag)])


def read_snapshots_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    d = len(header) // 2
    expect = [f"{p}{j}" for j in range(d) for p in ("re", "im")]
    if header != expect or len(header) % 2:
        raise ValueError(f"{path}: header must be re0,im0,...; got {header}")
    out = np.empty((len(rows) - 1, d), dtype=complex)
    for i, row in enumerate(rows[1:]):
        if len(row) != 2 * d:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} columns, expected {2 * d}")
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise ValueError(f"{path}: row {i + 2}: {exc}") from None
        out[i] = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
    return out


def write_angles_csv(path, angles, column: str = "x") -> None:
    with open(Path(path), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([column])
        for v in np.asarray(angles).reshape(-1):
            wr.writerow([repr(float(v))])
