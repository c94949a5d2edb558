"""Empirical measures of paths and their spectral representation.

A path average ``psi_m(t) = (1/t) int_0^t (phi_m / phi_0)(X_s) ds`` is the
``m``-th coordinate of the occupation measure relative to ``mu_0``.  From
the coefficients we build the semigroup-smoothed density, its regularised
version and the two transport controls used in the convergence proofs:
the spectral ``H^{-1}`` functional and the logarithmic-mean upper bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np

from ._quadrature import box_rule, graded_rule
from .spectral import TabulatedGround, TruncatedValue

__all__ = [
    "EmpiricalMeasure",
    "SpectralCoefficients",
    "SpectralDensity",
    "path_to_empirical",
    "psi_coefficients",
    "smoothed_density",
    "regularize_density",
    "hminus1_functional",
    "log_mean",
    "amb_upper_bound",
    "grid_measure",
    "density_measure_1d",
    "write_psi_csv",
]

# 1/phi_0 above this along a path flags the replica
PHI0_INV_MAX = 1e12
_CHUNK = 8192


@dataclass
class EmpiricalMeasure:
    """Weighted atoms ``points`` of shape ``(n, d)``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.points):
            raise ValueError("points and weights differ in length")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def mass(self):
        return math.fsum(self.weights)

    def __len__(self):
        return len(self.weights)


@dataclass
class SpectralCoefficients:
    """``values[m] = psi_m(t)`` for ``0 <= m < M`` (``values[0] = 1``)."""

    t: float
    values: np.ndarray
    flagged: bool = False
    min_phi0: float = math.nan

    @property
    def n_modes(self):
        return len(self.values)


def _n_grid(path, t):
    n = int(round(t / path.h))
    if abs(n * path.h - t) > 1e-9 * max(t, 1.0):
        raise ValueError(f"t={t} is not on the path's time grid (h={path.h})")
    if n + 1 > len(path.positions) or not np.all(np.isfinite(path.positions[: n + 1])):
        raise ValueError(f"path does not cover [0, {t}] (killed or not recorded)")
    return n


def _trapezoid_weights(n):
    if n == 0:
        return np.ones(1)
    w = np.full(n + 1, 1.0 / n)
    w[0] = w[-1] = 0.5 / n
    return w


def path_to_empirical(path, t):
    """Occupation measure of ``path`` on ``[0, t]`` with trapezoidal weights.

    A path recorded at a single grid point gives one atom of full mass.
    """
    if len(path.positions) == 1:
        return EmpiricalMeasure(path.positions[:1].copy(), np.ones(1))
    n = _n_grid(path, t)
    return EmpiricalMeasure(path.positions[: n + 1].copy(), _trapezoid_weights(n))


@numba.njit(cache=True, nogil=True)
def _psi_sine(pts, w, lengths, index, kmax):
    """``sum_s w_s prod_i U_{k_i}(cos(pi x_si / L_i))`` for each mode row of ``index``."""
    n, d = pts.shape
    M = index.shape[0]
    acc = np.zeros(M)
    U = np.empty((d, kmax + 1))
    for s in range(n):
        for i in range(d):
            c = 2.0 * math.cos(math.pi * pts[s, i] / lengths[i])
            U[i, 0] = 1.0
            if kmax >= 1:
                U[i, 1] = c
            for j in range(2, kmax + 1):
                U[i, j] = c * U[i, j - 1] - U[i, j - 2]
        ws = w[s]
        for m in range(M):
            v = ws
            for i in range(d):
                v *= U[i, index[m, i]]
            acc[m] += v
    return acc


@numba.njit(cache=True, nogil=True)
def _psi_sine_1d(x, w, L, M):
    acc = np.zeros(M)
    U = np.empty(M)
    for s in range(x.shape[0]):
        c = 2.0 * math.cos(math.pi * x[s] / L)
        U[0] = 1.0
        if M > 1:
            U[1] = c
        for j in range(2, M):
            U[j] = c * U[j - 1] - U[j - 2]
        ws = w[s]
        for j in range(M):
            acc[j] += ws * U[j]
    return acc


def psi_coefficients(path, E, t, M=None):
    """Trapezoidal path averages of ``phi_m / phi_0`` for ``m < M``."""
    M = E.n_modes if M is None else int(M)
    if not 1 <= M <= E.n_modes:
        raise ValueError(f"M must lie in [1, {E.n_modes}]")
    n = _n_grid(path, t) if len(path.positions) > 1 else 0
    pts = path.positions[: n + 1]
    w = _trapezoid_weights(n)
    modes = np.arange(M)
    min_phi0 = math.inf
    for s in range(0, len(pts), _CHUNK):
        min_phi0 = min(min_phi0, float(E.phi0(pts[s : s + _CHUNK]).min()))
    if E.dim == 1 and E.factors[0].closed_form:
        acc = _psi_sine_1d(np.ascontiguousarray(pts[:, 0]), w, float(E.domain.lengths[0]), M)
    elif all(f.closed_form for f in E.factors):
        index = np.ascontiguousarray(E.index[:M])
        acc = _psi_sine(np.ascontiguousarray(pts, dtype=float), w,
                        np.asarray(E.domain.lengths, dtype=float), index, int(index.max()))
    else:
        acc = np.zeros(M)
        for s in range(0, len(pts), _CHUNK):
            acc += w[s : s + _CHUNK] @ E.ratio(pts[s : s + _CHUNK], modes)
    acc[0] = 1.0
    flagged = not (min_phi0 > 1.0 / PHI0_INV_MAX) or not np.all(np.isfinite(acc))
    return SpectralCoefficients(float(t), acc, flagged, min_phi0)


class SpectralDensity:
    """``(1 - mix) * (1 + sum_m coef_m phi_m / phi_0) + mix`` relative to ``mu_0``."""

    def __init__(self, E, coef, mix=0.0):
        self.E = E
        self.coef = np.asarray(coef, dtype=float)
        self.coef[0] = 0.0
        self.mix = float(mix)
        self._modes = np.flatnonzero(self.coef)

    def __call__(self, x):
        x = self.E._points(x)
        if len(self._modes) == 0:
            base = np.ones(len(x))
        else:
            base = 1.0 + self.E.ratio(x, self._modes) @ self.coef[self._modes]
        return (1.0 - self.mix) * base + self.mix

    def grad_potential(self, x):
        """``grad L_0^{-1}(rho - 1)`` at ``x``; shape ``(n, d)``."""
        x = self.E._points(x)
        if len(self._modes) == 0:
            return np.zeros_like(x)
        c = -(1.0 - self.mix) * self.coef[self._modes] / self.E.gaps[self._modes]
        return np.einsum("nmd,m->nd", self.E.grad_ratio(x, self._modes), c)


def smoothed_density(coeffs, E, r):
    """Density of the path measure smoothed by the conditioned semigroup for time ``r``."""
    if not r > 0:
        raise ValueError("smoothing time r must be positive")
    M = coeffs.n_modes
    c = np.exp(-E.gaps[:M] * r) * coeffs.values
    return SpectralDensity(E, c)


def regularize_density(rho, r):
    """Convex combination ``(1 - r) rho + r``.

    ``rho`` may be a :class:`SpectralDensity`, another callable, or an array
    of values.
    """
    if not 0 < r <= 1:
        raise ValueError("r must lie in (0, 1]")
    if isinstance(rho, SpectralDensity):
        return SpectralDensity(rho.E, rho.coef.copy(), 1.0 - (1.0 - r) * (1.0 - rho.mix))
    if callable(rho):
        return lambda x: (1.0 - r) * np.asarray(rho(x)) + r
    return (1.0 - r) * np.asarray(rho, dtype=float) + r


def _ratio_tail(E, r, power):
    """Bound on ``sum_{m >= M} exp(-2 g_m r) R_m^2 / g_m^power`` via the Weyl constants."""
    c = E.weyl_constants()
    d = E.dim
    a, R = c["lower"], c["ratio_sup"]
    if r <= 0:
        return math.inf
    total, start, block = 0.0, E.n_modes, 4096
    while True:
        m = np.arange(start, start + block, dtype=float)
        g = a * m ** (2.0 / d)
        terms = np.exp(-2 * g * r) * R ** 2 * m ** ((d + 2.0) / d) / g ** power
        total += float(terms.sum())
        if terms[-1] <= 1e-18 * max(total, 1e-300) or terms[-1] == 0.0 or start > 10 ** 9:
            return total
        start += block
        block *= 2


def hminus1_functional(coeffs, E, r=0.0):
    """``sum_{m >= 1} exp(-2 g_m r) psi_m^2 / g_m`` with a Weyl tail bound.

    The tail uses ``|psi_m| <= sup |phi_m / phi_0|``; it is infinite at
    ``r = 0`` where no damping controls the omitted modes.
    """
    if r < 0:
        raise ValueError("r must be nonnegative")
    M = coeffs.n_modes
    g = E.gaps[1:M]
    val = math.fsum(np.exp(-2 * g * r) * coeffs.values[1:M] ** 2 / g)
    tail = _ratio_tail(E, r, 1.0) if M == E.n_modes else 0.0
    return TruncatedValue(val, tail, M)


def log_mean(a, b):
    """Logarithmic mean ``(a - b) / (log a - log b)`` with ``log_mean(a, a) = a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.log(a) - np.log(b)
        safe = np.where(np.abs(u) < 1e-6, 1.0, u)
        far = b * np.expm1(safe) / safe
    near = b * (1.0 + u / 2 + u * u / 6)
    return np.where(np.abs(u) < 1e-6, near, far)


def _mu0_rule(E, n_mc=2 ** 14):
    d = E.dim
    if d == 1:
        x, w = graded_rule(E.domain.lengths[0], 256, 8)
        x = x[:, None]
        return x, w * E.ground.pdf(x)
    if d == 2:
        x, w = box_rule(E.domain.lengths, 16, 8)
        return x, w * E.ground.pdf(x)
    x = E.ground.qmc_points(n_mc)
    return x, np.full(len(x), 1.0 / len(x))


def amb_upper_bound(rho, coeffs, E, r):
    """``int |grad L_0^{-1}(rho - 1)|^2 / log_mean(rho, 1) d mu_0``.

    ``rho`` is normally the output of :func:`smoothed_density` or
    :func:`regularize_density`, which carries its own spectral gradient.
    A plain callable is evaluated for the logarithmic mean while the
    gradient is taken from ``coeffs`` smoothed for time ``r``.
    """
    if isinstance(rho, SpectralDensity):
        field = rho
    else:
        field = SpectralDensity(E, np.exp(-E.gaps[: coeffs.n_modes] * r) * coeffs.values)
    x, w = _mu0_rule(E)
    vals = np.asarray(rho(x), dtype=float)
    if np.any(vals <= 0):
        raise ValueError("density is not strictly positive at a quadrature node")
    grad = field.grad_potential(x)
    return math.fsum(w * np.sum(grad ** 2, axis=1) / log_mean(vals, 1.0))


def grid_measure(path, t, N):
    """``N`` equally weighted atoms at times ``(i - 1) t / N``, ``i = 1..N``."""
    if N < 1:
        raise ValueError("N must be positive")
    if N == 1:
        return EmpiricalMeasure(path.positions[:1].copy(), np.ones(1))
    n = _n_grid(path, t)
    idx = np.rint(np.arange(N) * (n / N)).astype(np.int64)
    return EmpiricalMeasure(path.positions[idx].copy(), np.full(N, 1.0 / N))


def density_measure_1d(rho, E, n=20001):
    """The 1-D law ``rho * mu_0`` as a tabulated smooth measure."""
    if E.dim != 1:
        raise ValueError("density_measure_1d needs a one-dimensional system")
    L = E.domain.lengths[0]
    xs = np.linspace(0.0, L, n)
    vals = np.asarray(rho(xs[:, None]), dtype=float) * E.ground.pdf(xs[:, None])
    if np.any(vals < -1e-12):
        raise ValueError("density takes negative values; regularise it first")
    return TabulatedGround(xs, vals)


def write_psi_csv(rows, file):
    """Write ``(replica, m, psi_m)`` rows, one per coefficient."""
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "m", "psi_m"])
        for replica, coeffs in rows:
            for m, v in enumerate(coeffs.values):
                w.writerow([int(replica), m, repr(float(v))])
