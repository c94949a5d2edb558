"""Dirichlet eigen-systems on intervals and flat boxes.

Everything here is expressed relative to the probability measure
``mu(dx) = exp(V(x)) dx / Z`` on the domain, so eigenfunctions are
normalised in ``L^2(mu)``.  The ground state ``phi_0`` defines the
measure ``mu_0 = phi_0^2 mu`` and the conditioned (h-transformed)
semigroup whose eigenbasis is ``phi_m / phi_0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import eigh_tridiagonal
from scipy.stats import qmc

from ._quadrature import box_rule, integrate_interval

__all__ = [
    "Domain",
    "EigenSystem",
    "GroundMeasure",
    "SineGround",
    "TabulatedGround",
    "TruncatedValue",
    "solve_interval_eigensystem",
    "tensorize_box",
    "box_eigensystem",
    "dirichlet_heat_kernel",
    "spectral_survival",
    "h_semigroup_apply",
    "h_semigroup_coefficients",
    "h_heat_kernel",
    "limit_constant",
]

_SAFE_MATH = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "cosh", "sinh", "tanh", "arctan", "abs")
}
_SAFE_MATH["pi"] = np.pi


def _compile_potential(potential):
    if potential is None:
        return None
    if callable(potential):
        return potential
    if isinstance(potential, str):
        expr = compile(potential, "<potential>", "eval")

        def V(x):
            return np.broadcast_to(
                np.asarray(eval(expr, {"__builtins__": {}}, dict(_SAFE_MATH, x=x)), dtype=float),
                np.shape(x),
            ).copy()

        return V
    raise TypeError(f"potential must be None, a string or a callable, got {type(potential)!r}")


@dataclass(frozen=True)
class Domain:
    """An interval ``[0, L]`` (optionally with a potential) or a box of intervals."""

    kind: str
    lengths: tuple
    potential: object = None

    def __post_init__(self):
        if self.kind not in ("interval", "box"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        lengths = tuple(float(L) for L in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if any(not (L > 0 and math.isfinite(L)) for L in lengths):
            raise ValueError(f"side lengths must be positive, got {lengths}")
        if self.kind == "interval" and len(lengths) != 1:
            raise ValueError("an interval has exactly one length")
        if self.kind == "box":
            if not 1 <= len(lengths) <= 8:
                raise ValueError(f"box dimension must be in [1, 8], got {len(lengths)}")
            if self.potential is not None:
                raise ValueError("boxes support only a constant potential")

    @classmethod
    def interval(cls, length=1.0, potential=None):
        return cls("interval", (length,), potential)

    @classmethod
    def box(cls, lengths):
        return cls("box", tuple(lengths))

    @property
    def dim(self):
        return len(self.lengths)

    @property
    def diameter(self):
        return float(np.sqrt(np.sum(np.square(self.lengths))))

    def potential_fn(self):
        return _compile_potential(self.potential)

    def contains(self, x, closed=True):
        x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, self.dim))
        L = np.asarray(self.lengths)
        if closed:
            return np.all((x >= 0) & (x <= L), axis=1)
        return np.all((x > 0) & (x < L), axis=1)

    def to_dict(self):
        if self.potential is not None and not isinstance(self.potential, str):
            raise ValueError("only string potentials can be serialised")
        if self.kind == "interval":
            return {"kind": "interval", "length": self.lengths[0], "potential": self.potential}
        return {"kind": "box", "lengths": list(self.lengths)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        if kind == "interval":
            allowed = {"length", "potential"}
            extra = set(d) - allowed
            if extra:
                raise ValueError(f"domain: unknown field(s) {sorted(extra)}")
            return cls.interval(d.get("length", 1.0), d.get("potential"))
        if kind == "box":
            extra = set(d) - {"lengths"}
            if extra:
                raise ValueError(f"domain: unknown field(s) {sorted(extra)}")
            if "lengths" not in d:
                raise ValueError("domain.lengths is required for a box")
            return cls.box(d["lengths"])
        raise ValueError(f"domain.kind must be 'interval' or 'box', got {kind!r}")


# ---------------------------------------------------------------------------
# ground measures
# ---------------------------------------------------------------------------


class GroundMeasure:
    """Product measure ``mu_0`` with one 1-D factor per coordinate."""

    def __init__(self, factors):
        self.factors = list(factors)

    @property
    def dim(self):
        return len(self.factors)

    def pdf(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        out = np.ones(len(x))
        for i, f in enumerate(self.factors):
            out *= f.pdf(x[:, i])
        return out

    def sample(self, rng, n):
        u = rng.random((n, self.dim))
        return self._from_uniform(u)

    def qmc_points(self, n):
        """Deterministic low-discrepancy discretisation (unscrambled Sobol)."""
        if self.dim == 1:
            u = (np.arange(n) + 0.5) / n
            return self._from_uniform(u[:, None])
        sob = qmc.Sobol(self.dim, scramble=False)
        m = int(math.ceil(math.log2(n + 1)))
        u = sob.random_base2(m)[1 : n + 1]
        # shift off the cube faces so every point is interior
        u = (u * (2 ** m) + 0.5) / (2 ** m)
        u = np.clip(u, 0.5 / 2 ** m, 1 - 0.5 / 2 ** m)
        return self._from_uniform(u)

    def _from_uniform(self, u):
        return np.stack([f.ppf(u[:, i]) for i, f in enumerate(self.factors)], axis=1)

    def cell_masses(self, edges):
        """Masses of the tensor cells given per-axis edge arrays."""
        per_axis = [np.diff(f.cdf(e)) for f, e in zip(self.factors, edges)]
        out = per_axis[0]
        for p in per_axis[1:]:
            out = np.multiply.outer(out, p)
        return out


class SineGround:
    """Density ``(2/L) sin^2(pi x / L)`` on ``[0, L]`` with closed-form moments."""

    def __init__(self, length):
        self.length = float(length)
        self.k = 2 * np.pi / self.length

    def pdf(self, y):
        y = np.asarray(y, dtype=float)
        L = self.length
        return np.where((y >= 0) & (y <= L), (2.0 / L) * np.sin(np.pi * y / L) ** 2, 0.0)

    def cdf(self, y):
        y = np.clip(np.asarray(y, dtype=float), 0.0, self.length)
        return y / self.length - np.sin(self.k * y) / (2 * np.pi)

    def partial_moment(self, order, y):
        """``int_0^y s^order pdf(s) ds`` for order 0, 1, 2."""
        y = np.clip(np.asarray(y, dtype=float), 0.0, self.length)
        L, k = self.length, self.k
        s, c = np.sin(k * y), np.cos(k * y)
        if order == 0:
            return self.cdf(y)
        if order == 1:
            return y ** 2 / (2 * L) - (y * s / k + (c - 1.0) / k ** 2) / L
        if order == 2:
            return y ** 3 / (3 * L) - (y ** 2 * s / k + 2 * y * c / k ** 2 - 2 * s / k ** 3) / L
        raise ValueError("order must be 0, 1 or 2")

    def ppf(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        L = self.length
        # solve on the lower half (the law is symmetric) with Newton on F^(1/3),
        # which is close to linear near the endpoint where F ~ x^3
        upper = u > 0.5
        v = np.where(upper, 1.0 - u, u)
        x = _sine_ppf_guess(v) * L
        target = np.cbrt(v)
        pos = v > 0
        for _ in range(12):
            F = np.maximum(self.cdf(x), 1e-300)
            c = np.cbrt(F)
            d = self.pdf(x) / (3.0 * c * c)
            step = np.where(pos & (d > 0), (c - target) / np.where(d > 0, d, 1.0), 0.0)
            x = np.clip(x - step, 0.0, 0.5 * L)
            if np.max(np.abs(step), initial=0.0) <= 1e-15 * L:
                break
        x = np.where(pos, x, 0.0)
        return np.where(upper, L - x, x)


_GUESS_S = np.linspace(0.0, 1.0, 4097)
_GUESS_F = _GUESS_S - np.sin(2 * np.pi * _GUESS_S) / (2 * np.pi)


def _sine_ppf_guess(u):
    return np.interp(u, _GUESS_F, _GUESS_S)


class TabulatedGround:
    """A smooth 1-D density tabulated on a fine grid, with cumulative moments."""

    def __init__(self, xs, density):
        from scipy.integrate import cumulative_simpson

        xs = np.asarray(xs, dtype=float)
        density = np.maximum(np.asarray(density, dtype=float), 0.0)
        total = cumulative_simpson(density, x=xs, initial=0.0)[-1]
        self.xs = xs
        self.length = float(xs[-1])
        self.density = density / total
        self._m = [
            cumulative_simpson(self.density * xs ** k, x=xs, initial=0.0) for k in range(3)
        ]
        self._m[0] = np.maximum.accumulate(self._m[0])
        self._m[0] /= self._m[0][-1]

    def pdf(self, y):
        return np.interp(y, self.xs, self.density, left=0.0, right=0.0)

    def cdf(self, y):
        return np.interp(y, self.xs, self._m[0])

    def partial_moment(self, order, y):
        return np.interp(y, self.xs, self._m[order])

    def ppf(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        x = np.interp(u, self._m[0], self.xs)
        for _ in range(3):
            d = self.pdf(x)
            step = np.where(d > 1e-12, (self.cdf(x) - u) / np.maximum(d, 1e-12), 0.0)
            x = np.clip(x - step, 0.0, self.length)
        return x


# ---------------------------------------------------------------------------
# 1-D factors
# ---------------------------------------------------------------------------


def _extrapolate_ends(values):
    """Fill entries 0 and -1 of ``values`` by quadratic extrapolation."""
    v = values
    v[0] = 3 * v[1] - 3 * v[2] + v[3]
    v[-1] = 3 * v[-2] - 3 * v[-3] + v[-4]
    return v


class _SineFactor:
    """Closed-form modes ``sqrt(2) sin((k+1) pi x / L)`` (constant potential)."""

    closed_form = True

    def __init__(self, length, n_modes):
        self.length = float(length)
        self.n_modes = int(n_modes)
        k = np.arange(1, self.n_modes + 1)
        self.eigenvalues = (np.pi * k / self.length) ** 2
        self.ground = SineGround(self.length)
        self.normalization_residuals = np.zeros(self.n_modes)

    def _theta(self, x):
        return np.pi * np.asarray(x, dtype=float) / self.length

    def phi(self, x, modes):
        k = np.asarray(modes) + 1
        return np.sqrt(2.0) * np.sin(np.multiply.outer(self._theta(x), k))

    def dphi(self, x, modes):
        k = np.asarray(modes) + 1
        return np.sqrt(2.0) * (np.pi / self.length) * k * np.cos(np.multiply.outer(self._theta(x), k))

    def ratio(self, x, modes, derivative=False):
        """``phi_k / phi_0`` (a Chebyshev polynomial of the second kind in cos)."""
        modes = np.asarray(modes)
        kmax = int(modes.max()) if modes.size else 0
        c = np.cos(self._theta(x))
        n = c.shape[0] if c.ndim else 1
        c = c.reshape(n)
        U = np.empty((n, kmax + 1))
        U[:, 0] = 1.0
        if kmax >= 1:
            U[:, 1] = 2 * c
        for j in range(2, kmax + 1):
            U[:, j] = 2 * c * U[:, j - 1] - U[:, j - 2]
        if not derivative:
            return U[:, modes]
        dU = np.zeros_like(U)
        if kmax >= 1:
            dU[:, 1] = 2.0
        for j in range(2, kmax + 1):
            dU[:, j] = 2 * U[:, j - 1] + 2 * c * dU[:, j - 1] - dU[:, j - 2]
        dc = -np.sin(self._theta(x)).reshape(n) * np.pi / self.length
        return dU[:, modes] * dc[:, None]

    def phi_sup(self, modes):
        return np.full(len(np.atleast_1d(modes)), np.sqrt(2.0))

    def ratio_sup(self, modes):
        return np.asarray(modes, dtype=float) + 1.0

    def mu_phi(self, modes):
        k = np.asarray(modes) + 1
        return np.where(k % 2 == 1, 2 * np.sqrt(2.0) / (np.pi * k), 0.0)

    def logphi0(self, x):
        return 0.5 * np.log(2.0) + np.log(np.sin(self._theta(x)))

    def tables(self, n_tab=4097):
        L = self.length
        x = np.linspace(0.0, L, n_tab)
        xi = x[1:-1]
        th = np.pi * xi / L
        w = np.pi / L
        logg = np.empty(n_tab)
        d1 = np.empty(n_tab)
        d2 = np.empty(n_tab)
        logg[1:-1] = 0.5 * np.log(2.0) + np.log(np.sin(th)) - np.log(xi) - np.log(L - xi)
        d1[1:-1] = w / np.tan(th) - 1.0 / xi + 1.0 / (L - xi)
        d2[1:-1] = -(w ** 2) / np.sin(th) ** 2 + 1.0 / xi ** 2 + 1.0 / (L - xi) ** 2
        logg[0] = logg[-1] = 0.5 * np.log(2.0) + np.log(np.pi / L) - np.log(L)
        d1[0], d1[-1] = 1.0 / L, -1.0 / L
        _extrapolate_ends(d2)
        zeros = np.zeros(n_tab)
        return {"vp": zeros, "s1": 2 * d1, "s2": 2 * d2, "logg": logg}


class _GridFactor:
    """Finite-difference Sturm-Liouville modes for a non-constant potential."""

    closed_form = False

    def __init__(self, length, V, n_modes, n_grid):
        L = float(length)
        n = int(n_grid)
        h = L / (n + 1)
        xs = np.linspace(0.0, L, n + 2)
        xi = xs[1:-1]
        Vi = V(xi)
        Vh = V(0.5 * (xs[1:] + xs[:-1]))
        if not (np.all(np.isfinite(Vi)) and np.all(np.isfinite(Vh)) and np.all(np.isfinite(V(xs)))):
            raise ValueError("potential is not finite on the closed interval")
        shift = float(np.max(Vh))
        wi = np.exp(Vi - shift)
        wh = np.exp(Vh - shift)
        diag = (wh[:-1] + wh[1:]) / h ** 2 / wi
        off = -wh[1:-1] / h ** 2 / np.sqrt(wi[:-1] * wi[1:])
        try:
            # bisection to full relative accuracy; the default tolerance scales with the
            # largest eigenvalue (~4/h^2) and swamps the lowest modes on fine grids
            lam, vec = eigh_tridiagonal(diag, off, select="i", select_range=(0, n_modes - 1),
                                        lapack_driver="stebz", tol=np.finfo(float).tiny)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
            raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
        u = vec / np.sqrt(wi)[:, None]
        # normalising constant of mu with the same (rectangle) rule on the nodes
        Zi = np.sum(wi) * h
        norms = np.sum(u ** 2 * wi[:, None], axis=0) * h / Zi
        u = u / np.sqrt(norms)
        if u[np.argmax(np.abs(u[:, 0])), 0] < 0:
            u[:, 0] *= -1
        for j in range(1, n_modes):
            # deterministic sign: positive slope at the left boundary
            if u[0, j] < 0:
                u[:, j] *= -1
        self.length = L
        self.n_modes = n_modes
        self.eigenvalues = lam
        self.V = V
        self.xs = xs
        G = (u * wi[:, None]).T @ u * h / Zi
        self.normalization_residuals = np.abs(np.diag(G) - 1.0)
        self.orthogonality_residual = float(np.max(np.abs(G - np.diag(np.diag(G)))))
        full = np.zeros((n + 2, n_modes))
        full[1:-1] = u
        self._phi = CubicSpline(xs, full, axis=0)
        r = np.empty_like(full)
        r[1:-1] = u / u[:, :1]
        _extrapolate_ends(r)
        self._ratio = CubicSpline(xs, r, axis=0)
        self._ratio_d = self._ratio.derivative()
        self._dphi = self._phi.derivative()
        g = np.empty(n + 2)
        g[1:-1] = u[:, 0] / (xi * (L - xi))
        _extrapolate_ends(g)
        self._logg = CubicSpline(xs, np.log(g))
        self._phi_sup = np.max(np.abs(full), axis=0)
        self._ratio_sup = np.max(np.abs(r), axis=0)
        fine = np.linspace(0.0, L, 20001)
        dens = self._phi(fine)[:, 0] ** 2 * np.exp(V(fine) - shift)
        self.ground = TabulatedGround(fine, dens)
        Zq, _ = integrate_interval(lambda x: np.exp(V(x) - shift), L)
        self._Z = Zq
        self._shift = shift

    def phi(self, x, modes):
        return self._phi(np.asarray(x, dtype=float))[..., modes]

    def dphi(self, x, modes):
        return self._dphi(np.asarray(x, dtype=float))[..., modes]

    def ratio(self, x, modes, derivative=False):
        x = np.asarray(x, dtype=float)
        if derivative:
            return self._ratio_d(x)[..., modes]
        out = self._ratio(x)[..., modes]
        return out

    def phi_sup(self, modes):
        return self._phi_sup[modes]

    def ratio_sup(self, modes):
        return self._ratio_sup[modes]

    def mu_phi(self, modes):
        V, shift, Z = self.V, self._shift, self._Z
        val, _ = integrate_interval(lambda x: self._phi(x)[:, modes] * np.exp(V(x) - shift)[:, None], self.length)
        return val / Z

    def logphi0(self, x):
        x = np.asarray(x, dtype=float)
        return self._logg(x) + np.log(x) + np.log(self.length - x)

    def tables(self, n_tab=4097):
        L = self.length
        x = np.linspace(0.0, L, n_tab)
        dx = 1e-5 * L
        V = self.V
        vp = (V(x + dx) - V(x - dx)) / (2 * dx)
        dx2 = 1e-4 * L
        vpp = (V(x + dx2) - 2 * V(x) + V(x - dx2)) / dx2 ** 2
        d1 = self._logg.derivative(1)(x)
        d2 = self._logg.derivative(2)(x)
        return {"vp": vp, "s1": vp + 2 * d1, "s2": vpp + 2 * d2, "logg": self._logg(x)}


# ---------------------------------------------------------------------------
# eigen-system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TruncatedValue:
    """A truncated series value together with a bound on the omitted tail."""

    value: float
    tail_bound: float
    n_terms: int
    divergent: bool = False

    def __float__(self):
        return float(self.value)


class EigenSystem:
    """Ordered Dirichlet eigenpairs ``(lambda_m, phi_m)`` of ``-L`` on a domain.

    Modes are products of 1-D factor modes indexed by ``index`` (one row
    per retained mode).  The object is immutable after construction and
    can be shared between threads.
    """

    def __init__(self, domain, factors, index, eigenvalues):
        self.domain = domain
        self.factors = list(factors)
        self.index = np.asarray(index, dtype=np.int64)
        self.index.setflags(write=False)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.eigenvalues.setflags(write=False)
        self.ground = GroundMeasure([f.ground for f in self.factors])
        res = np.zeros(len(self.eigenvalues))
        for i, f in enumerate(self.factors):
            res = np.maximum(res, f.normalization_residuals[self.index[:, i]])
        self.normalization_residuals = res
        self._tables = None

    # basic properties -----------------------------------------------------
    @property
    def n_modes(self):
        return len(self.eigenvalues)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def lambda0(self):
        return float(self.eigenvalues[0])

    @property
    def gaps(self):
        """``lambda_m - lambda_0`` for every retained mode."""
        return self.eigenvalues - self.eigenvalues[0]

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and x.ndim <= 1:
            return x.reshape(-1, 1)
        return x.reshape(-1, self.dim)

    def _modes(self, modes):
        if modes is None:
            return np.arange(self.n_modes)
        if isinstance(modes, slice):
            return np.arange(self.n_modes)[modes]
        return np.atleast_1d(np.asarray(modes, dtype=np.int64))

    # field evaluators -----------------------------------------------------
    def phi(self, x, modes=None):
        """Eigenfunctions at points ``x``; returns shape ``(n, len(modes))``."""
        x = self._points(x)
        modes = self._modes(modes)
        idx = self.index[modes]
        out = np.ones((len(x), len(modes)))
        for i, f in enumerate(self.factors):
            uniq, inv = np.unique(idx[:, i], return_inverse=True)
            out *= f.phi(x[:, i], uniq)[:, inv]
        return out

    def grad_phi(self, x, modes=None):
        """Gradients, shape ``(n, len(modes), d)``."""
        x = self._points(x)
        modes = self._modes(modes)
        idx = self.index[modes]
        vals, ders = [], []
        for i, f in enumerate(self.factors):
            uniq, inv = np.unique(idx[:, i], return_inverse=True)
            vals.append(f.phi(x[:, i], uniq)[:, inv])
            ders.append(f.dphi(x[:, i], uniq)[:, inv])
        out = np.empty((len(x), len(modes), self.dim))
        for j in range(self.dim):
            g = ders[j].copy()
            for i in range(self.dim):
                if i != j:
                    g *= vals[i]
            out[:, :, j] = g
        return out

    def ratio(self, x, modes=None):
        """``phi_m / phi_0`` (eigenbasis of the conditioned generator)."""
        x = self._points(x)
        modes = self._modes(modes)
        idx = self.index[modes]
        out = np.ones((len(x), len(modes)))
        for i, f in enumerate(self.factors):
            uniq, inv = np.unique(idx[:, i], return_inverse=True)
            out *= f.ratio(x[:, i], uniq)[:, inv]
        return out

    def grad_ratio(self, x, modes=None):
        x = self._points(x)
        modes = self._modes(modes)
        idx = self.index[modes]
        vals, ders = [], []
        for i, f in enumerate(self.factors):
            uniq, inv = np.unique(idx[:, i], return_inverse=True)
            vals.append(f.ratio(x[:, i], uniq)[:, inv])
            ders.append(f.ratio(x[:, i], uniq, derivative=True)[:, inv])
        out = np.empty((len(x), len(modes), self.dim))
        for j in range(self.dim):
            g = ders[j].copy()
            for i in range(self.dim):
                if i != j:
                    g *= vals[i]
            out[:, :, j] = g
        return out

    def phi0(self, x):
        return np.exp(self.log_phi0(x))

    def log_phi0(self, x):
        x = self._points(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.zeros(len(x))
            for i, f in enumerate(self.factors):
                out += f.logphi0(x[:, i])
        return out

    def mu_phi(self, modes=None):
        """``mu(phi_m)``."""
        modes = self._modes(modes)
        idx = self.index[modes]
        out = np.ones(len(modes))
        for i, f in enumerate(self.factors):
            uniq, inv = np.unique(idx[:, i], return_inverse=True)
            out *= np.asarray(f.mu_phi(uniq))[inv]
        return out

    def phi_sup(self, modes=None):
        modes = self._modes(modes)
        out = np.ones(len(modes))
        for i, f in enumerate(self.factors):
            out *= f.phi_sup(self.index[modes, i])
        return out

    def ratio_sup(self, modes=None):
        modes = self._modes(modes)
        out = np.ones(len(modes))
        for i, f in enumerate(self.factors):
            out *= f.ratio_sup(self.index[modes, i])
        return out

    def h_drift(self, x):
        """Drift ``grad(V + 2 log phi_0)`` of the conditioned diffusion."""
        x = self._points(x)
        out = np.empty_like(x)
        for i, f in enumerate(self.factors):
            xi = x[:, i]
            if f.closed_form:
                out[:, i] = 2 * np.pi / f.length / np.tan(np.pi * xi / f.length)
            else:
                dx = 1e-5 * f.length
                vp = (f.V(xi + dx) - f.V(xi - dx)) / (2 * dx)
                out[:, i] = vp + 2 * f.dphi(xi, [0])[:, 0] / f.phi(xi, [0])[:, 0]
        return out

    def numba_tables(self):
        """Uniform-grid tables used by the compiled path simulators."""
        if self._tables is None:
            tabs = [f.tables() for f in self.factors]
            self._tables = {
                key: np.ascontiguousarray(np.stack([t[key] for t in tabs])) for key in tabs[0]
            }
            self._tables["lengths"] = np.asarray(self.domain.lengths, dtype=float)
            self._tables["constant_v"] = all(f.closed_form for f in self.factors)
        return self._tables

    # Weyl-type calibration ---------------------------------------------------
    def weyl_constants(self):
        """Empirical constants of the growth bounds over the computed modes.

        Returns a dict with ``lower`` (min of ``gap_m / m^{2/d}``), ``upper``
        (max of the same ratio), ``sup`` (max of ``||phi_m||_inf / sqrt(m)``),
        ``ratio_sup`` (max of ``||phi_m/phi_0||_inf / m^{(d+2)/(2d)}``) and
        the combined ``alpha0``.
        """
        if self.n_modes < 2:
            raise ValueError("need at least two modes")
        d = self.dim
        m = np.arange(1, self.n_modes)
        q = self.gaps[1:] / m ** (2.0 / d)
        sup = self.phi_sup()[1:] / np.sqrt(m)
        rs = self.ratio_sup()[1:] / m ** ((d + 2.0) / (2 * d))
        lower, upper = float(q.min()), float(q.max())
        return {
            "lower": lower,
            "upper": upper,
            "sup": float(sup.max()),
            "ratio_sup": float(rs.max()),
            "alpha0": float(max(1.0 / lower, upper, sup.max(), 1.0)),
        }

    # serialisation -------------------------------------------------------
    def to_dict(self):
        return {
            "domain": self.domain.to_dict(),
            "M": self.n_modes,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "normalization_residuals": [float(v) for v in self.normalization_residuals],
            "closed_form": bool(all(f.closed_form for f in self.factors)),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text, n_grid=None):
        """Rebuild the system (field evaluators are recomputed, not read)."""
        d = json.loads(text) if isinstance(text, str) else dict(text)
        domain = Domain.from_dict(d["domain"])
        M = int(d["M"])
        if domain.kind == "box":
            E = box_eigensystem(domain.lengths, M)
        else:
            method = "closed" if d.get("closed_form", True) else "fd"
            n = n_grid or max(4 * M, 2048)
            E = solve_interval_eigensystem(domain.lengths[0], domain.potential, M, n, method=method)
        stored = np.asarray(d["eigenvalues"], dtype=float)
        if not np.allclose(E.eigenvalues, stored, rtol=1e-8, atol=0.0):
            raise ValueError("rebuilt eigenvalues do not match the stored spectrum")
        return E


def _is_constant(V, L):
    if V is None:
        return True
    xs = np.linspace(0.0, L, 257)
    v = np.asarray(V(xs), dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("potential is not finite on the closed interval")
    return float(np.ptp(v)) <= 1e-14 * max(1.0, float(np.max(np.abs(v))))


def solve_interval_eigensystem(L=1.0, V=None, M=256, n=None, method="auto"):
    """Dirichlet eigen-system of ``-(Delta + V')`` on ``[0, L]``.

    With a constant potential the closed form is used unless
    ``method="fd"`` forces the finite-difference path.  The discretisation
    is the symmetric three-point scheme for ``-(e^V u')' = lambda e^V u`` on
    ``n`` interior nodes.
    """
    if not L > 0:
        raise ValueError(f"interval length must be positive, got {L}")
    if M < 1:
        raise ValueError("M must be at least 1")
    n = 4 * M if n is None else int(n)
    domain = Domain.interval(L, V if (V is None or isinstance(V, str)) else V)
    Vf = _compile_potential(V)
    constant = _is_constant(Vf, L)
    if method not in ("auto", "closed", "fd"):
        raise ValueError(f"unknown method {method!r}")
    if method == "closed" and not constant:
        raise ValueError("closed form requires a constant potential")
    if method == "fd" or (method == "auto" and not constant):
        if M > n // 4:
            raise ValueError(f"M={M} exceeds n/4={n // 4}: grid too coarse for the requested modes")
        factor = _GridFactor(L, Vf if Vf is not None else (lambda x: np.zeros_like(np.asarray(x, float))), M, n)
    else:
        factor = _SineFactor(L, M)
    index = np.arange(M)[:, None]
    return EigenSystem(domain, [factor], index, factor.eigenvalues[:M])


def _lexsort_modes(lam, idx):
    decimals = 11 - int(math.floor(math.log10(max(float(np.max(np.abs(lam))), 1e-300))))
    lam_q = np.round(lam, decimals)
    keys = tuple(idx[:, j] for j in range(idx.shape[1] - 1, -1, -1)) + (lam_q,)
    return np.lexsort(keys)


def _enumerate_smallest(factor_eigs, M):
    """Multi-indices of the ``M`` smallest sums of factor eigenvalues."""
    d = len(factor_eigs)
    base = sum(float(e[0]) for e in factor_eigs)

    def collect(budget):
        out_idx, out_lam = [], []

        def rec(level, prefix, acc):
            if level == d:
                out_idx.append(tuple(prefix))
                out_lam.append(acc)
                return
            rest = sum(float(e[0]) for e in factor_eigs[level + 1 :])
            e = factor_eigs[level]
            for k in range(len(e)):
                val = acc + float(e[k])
                if val + rest > budget * (1 + 1e-12):
                    break
                rec(level + 1, prefix + [k], val)

        rec(0, [], 0.0)
        return out_idx, out_lam

    if math.prod(len(e) for e in factor_eigs) < M:
        raise ValueError("factor truncation insufficient for the requested number of modes")
    lo, hi = base, base
    step = max(base, 1.0)
    while True:
        idx, lam = collect(hi)
        if len(idx) >= M:
            break
        lo = hi
        hi = hi + step
        step *= 2
    idx = np.asarray(idx, dtype=np.int64)
    lam = np.asarray(lam)
    order = _lexsort_modes(lam, idx)[:M]
    idx, lam = idx[order], lam[order]
    # every factor must have at least one unused mode above the threshold
    for j, e in enumerate(factor_eigs):
        others = base - float(e[0])
        if len(e) <= idx[:, j].max() + 1 and others + float(e[-1]) < lam[-1]:
            raise ValueError("factor truncation insufficient for the requested number of modes")
    return idx, lam


def tensorize_box(factors: Sequence[EigenSystem], M):
    """Separation of variables for a product of intervals with constant potential."""
    if M < 1:
        raise ValueError("M must be at least 1")
    parts = []
    for E in factors:
        if E.dim != 1:
            raise ValueError("factors must be one-dimensional")
        f = E.factors[0]
        if not f.closed_form and f.V is not None and not _is_constant(f.V, f.length):
            raise ValueError("box factors must have a constant potential")
        parts.append(f)
    if len(parts) == 1:
        E = factors[0]
        M = min(M, E.n_modes)
        return EigenSystem(E.domain, parts, E.index[:M], E.eigenvalues[:M])
    idx, lam = _enumerate_smallest([p.eigenvalues for p in parts], M)
    domain = Domain.box([p.length for p in parts])
    return EigenSystem(domain, parts, idx, lam)


def box_eigensystem(lengths, M=512):
    """Closed-form eigen-system of the box ``prod [0, L_i]``."""
    lengths = [float(L) for L in lengths]
    d = len(lengths)
    if d == 1:
        return solve_interval_eigensystem(lengths[0], None, M)
    # enough modes per factor that the M-th product mode is certainly covered
    lam_needed = sum((np.pi / L) ** 2 for L in lengths)
    K = 2
    while True:
        eigs = [(np.pi * np.arange(1, K + 1) / L) ** 2 for L in lengths]
        try:
            idx, lam = _enumerate_smallest(eigs, M)
        except ValueError:
            K *= 2
            continue
        if all(idx[:, j].max() + 1 < K for j in range(d)):
            break
        K *= 2
    del lam_needed
    factors = [_SineFactor(L, K) for L in lengths]
    return EigenSystem(Domain.box(lengths), factors, idx, lam)


# ---------------------------------------------------------------------------
# kernels and semigroups
# ---------------------------------------------------------------------------


def _weyl_tail(E, t, weight_power=1.0):
    """Bound on ``sum_{m >= M} exp(-lambda_m t) * sup^2 * m^weight_power``."""
    c = E.weyl_constants()
    d = E.dim
    lam0, a, s = E.lambda0, c["lower"], c["sup"]
    M = E.n_modes
    total = 0.0
    start = M
    block = 4096
    while True:
        m = np.arange(start, start + block, dtype=float)
        terms = np.exp(-(lam0 + a * m ** (2.0 / d)) * t) * s ** 2 * m ** weight_power
        total += float(terms.sum())
        if terms[-1] <= 1e-18 * max(total, 1e-300) or terms[-1] == 0.0 or start > 10 ** 8:
            break
        start += block
        block *= 2
    return total


def dirichlet_heat_kernel(E, t, x, y, tol=None, return_bound=False):
    """``p_t^D(x, y) = sum_m exp(-lambda_m t) phi_m(x) phi_m(y)`` w.r.t. ``mu``."""
    if not t > 0:
        raise ValueError("t must be positive")
    px = E.phi(x)
    py = E.phi(y)
    val = (px * py) @ np.exp(-E.eigenvalues * t)
    bound = _weyl_tail(E, t)
    if tol is not None and bound > tol:
        raise ValueError(f"truncation bound {bound:.3e} exceeds tolerance {tol:.3e}; t too small")
    val = val if val.size > 1 else float(val[0])
    return (val, bound) if return_bound else val


def _as_measure(nu, dim):
    """Accept a point, an array of points, or ``(points, weights)``."""
    if hasattr(nu, "points") and hasattr(nu, "weights"):
        return np.asarray(nu.points, dtype=float).reshape(-1, dim), np.asarray(nu.weights, dtype=float)
    if isinstance(nu, tuple) and len(nu) == 2:
        pts, w = nu
        return np.asarray(pts, dtype=float).reshape(-1, dim), np.asarray(w, dtype=float)
    pts = np.asarray(nu, dtype=float).reshape(-1, dim)
    return pts, np.full(len(pts), 1.0 / len(pts))


def spectral_survival(E, nu, t, return_bound=False):
    """``P^nu(t < tau) = sum_m exp(-lambda_m t) mu(phi_m) nu(phi_m)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    pts, w = _as_measure(nu, E.dim)
    inside = E.domain.contains(pts, closed=False)
    # atoms on (or outside) the boundary are killed immediately
    nu_phi = (w * inside) @ E.phi(np.clip(pts, 0.0, np.asarray(E.domain.lengths)))
    val = float(np.sum(np.exp(-E.eigenvalues * t) * E.mu_phi() * nu_phi))
    if return_bound:
        return val, _weyl_tail(E, t)
    return val


def _mu0_integrate(E, g, n_cells=None):
    """Integrate ``g(x)`` (vector-valued) against ``mu_0`` with an error estimate."""
    d = E.dim
    if d == 1:
        L = E.domain.lengths[0]
        return integrate_interval(lambda x: g(x[:, None]) * E.ground.pdf(x[:, None])[:, None], L, n_cells or 64)
    if d <= 3:
        n1 = n_cells or (16 if d == 2 else 6)
        p1, w1 = box_rule(E.domain.lengths, n1)
        p2, w2 = box_rule(E.domain.lengths, 2 * n1)
        v1 = (w1 * E.ground.pdf(p1)) @ g(p1)
        v2 = (w2 * E.ground.pdf(p2)) @ g(p2)
        return v2, np.abs(v2 - v1)
    n = 2 ** 14
    p1 = E.ground.qmc_points(n // 2)
    p2 = E.ground.qmc_points(n)
    v1 = g(p1).mean(axis=0)
    v2 = g(p2).mean(axis=0)
    return v2, np.abs(v2 - v1)


def h_semigroup_coefficients(E, f, modes=None):
    """``mu_0(f * phi_m / phi_0)`` with quadrature error estimates."""
    modes = E._modes(modes)

    def g(x):
        fx = np.asarray(f(x), dtype=float).reshape(len(x))
        return fx[:, None] * E.ratio(x, modes)

    return _mu0_integrate(E, g)


def h_semigroup_apply(E, f, t, x, return_error=False):
    """``P_t^0 f(x)`` from the spectral expansion in ``phi_m / phi_0``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    coef, err = h_semigroup_coefficients(E, f)
    damp = np.exp(-E.gaps * t)
    R = E.ratio(x)
    val = R @ (coef * damp)
    qerr = np.abs(R) @ (err * damp)
    val = val if val.size > 1 else float(val[0])
    if return_error:
        return val, qerr if qerr.size > 1 else float(qerr[0])
    return val


def h_heat_kernel(E, t, x, y, return_bound=False):
    """Kernel of ``P_t^0`` with respect to ``mu_0``."""
    if not t > 0:
        raise ValueError("t must be positive")
    rx = E.ratio(x)
    ry = E.ratio(y)
    val = (rx * ry) @ np.exp(-E.gaps * t)
    val = val if val.size > 1 else float(val[0])
    if return_bound:
        c = E.weyl_constants()
        d = E.dim
        m = np.arange(E.n_modes, E.n_modes + 10 ** 6, dtype=float)
        terms = np.exp(-c["lower"] * m ** (2.0 / d) * t) * c["ratio_sup"] ** 2 * m ** ((d + 2.0) / d)
        return val, float(terms.sum())
    return val


def limit_constant(E):
    """``sum_{m >= 1} 2 / (lambda_m - lambda_0)^2`` with a Weyl tail bound.

    Divergent (``d >= 4``) systems return a value of ``inf`` flagged as
    divergent.
    """
    if E.n_modes < 2:
        raise ValueError("limit constant needs at least two modes")
    d = E.dim
    gaps = E.gaps[1:]
    partial = math.fsum(2.0 / gaps ** 2)
    if d >= 4:
        return TruncatedValue(math.inf, math.inf, E.n_modes, divergent=True)
    a = E.weyl_constants()["lower"]
    M = E.n_modes
    p = 4.0 / d
    tail = 2.0 / a ** 2 * (M - 1) ** (1.0 - p) / (p - 1.0)
    return TruncatedValue(partial, tail, M)


def partial_limit_sums(E):
    """Cumulative partial sums of the limit-constant series."""
    return np.cumsum(2.0 / E.gaps[1:] ** 2)
