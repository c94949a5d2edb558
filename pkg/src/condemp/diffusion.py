"""Path simulation for the killed diffusion and its ground-state conditioning.

Both processes use the convention ``dX = b(X) dt + sqrt(2) dB``: the killed
process has ``b = grad V`` and is stopped at the boundary, the conditioned
process has ``b = grad(V + 2 log phi_0)`` and never leaves the interior.
The inner loops are compiled with numba and consume a per-replica numpy
``Generator`` so that a replica's path depends only on its key.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from . import rng as _rng

__all__ = [
    "SdeConfig",
    "PathSample",
    "NoSurvivorError",
    "ConditionalEstimate",
    "bridge_kill_probability",
    "simulate_killed_path",
    "simulate_h_path",
    "survival_fraction",
    "scaled_survival",
    "conditional_estimator",
    "bismut_gradient",
    "ricci_h",
    "write_path_csv",
]


@dataclass(frozen=True)
class SdeConfig:
    """Euler-Maruyama settings.

    ``phi0_min`` is relative to ``sup phi_0``: below it the conditioned
    process checks that each substep satisfies ``dt <= layer_ratio * delta^2``
    (``delta`` = distance to the nearest face) and otherwise splits the step
    into ``substep_factor`` pieces, recursively.
    """

    h: float = 1e-3
    scheme: str = "euler_maruyama"
    substep_factor: int = 2
    phi0_min: float = 0.75
    layer_ratio: float = 0.05
    max_halvings: int = 60
    max_resamples: int = 32

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("step h must be positive")
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.substep_factor < 2:
            raise ValueError("substep_factor must be at least 2")
        if not self.layer_ratio > 0:
            raise ValueError("layer_ratio must be positive")


@dataclass
class PathSample:
    """One trajectory on the uniform grid ``k * h`` (recorded prefix only)."""

    h: float
    positions: np.ndarray
    survived: bool
    tau: float
    weight: float = 1.0
    seed: int = 0
    replica: int = 0
    final: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.h * np.arange(len(self.positions))

    @property
    def horizon(self):
        return self.h * (len(self.positions) - 1)


class NoSurvivorError(RuntimeError):
    """Raised when a rejection estimate has no surviving replica."""


def bridge_kill_probability(a, b, h):
    """Probability that a Brownian bridge with variance rate 2 from distance
    ``a`` to distance ``b`` (same side of a face) touches the face in time ``h``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.where((a <= 0) | (b <= 0), 1.0, np.exp(-a * b / h))


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@numba.njit(inline="always")
def _interp(row, L, x):
    n = row.shape[0]
    s = x / L * (n - 1)
    i = int(s)
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    f = s - i
    return row[i] * (1.0 - f) + row[i + 1] * f


@numba.njit(nogil=True, cache=True)
def _killed_kernel(x0, n_steps, n_record, h, lengths, vp, use_drift, gen, out, info):
    d = x0.shape[0]
    x = x0.copy()
    xn = np.empty(d)
    info[0] = 0.0  # survived flag
    info[1] = 0.0  # tau
    info[2] = 0.0  # number of recorded positions
    for i in range(d):
        if x[i] <= 0.0 or x[i] >= lengths[i]:
            return
    if n_record > 0:
        out[0, :] = x
    sq = math.sqrt(2.0 * h)
    for k in range(n_steps):
        surv = 1.0
        exit_frac = 2.0
        for i in range(d):
            L = lengths[i]
            mean = x[i]
            if use_drift:
                mean += _interp(vp[i], L, x[i]) * h
            y = mean + sq * gen.standard_normal()
            xn[i] = y
            if y <= 0.0:
                f = x[i] / (x[i] - y)
                if f < exit_frac:
                    exit_frac = f
            elif y >= L:
                f = (L - x[i]) / (y - x[i])
                if f < exit_frac:
                    exit_frac = f
            else:
                surv *= (1.0 - math.exp(-x[i] * y / h)) * (1.0 - math.exp(-(L - x[i]) * (L - y) / h))
        u = gen.random()
        if exit_frac <= 1.0:
            info[1] = (k + exit_frac) * h
            info[2] = min(k + 1, n_record)
            return
        if u >= surv:
            info[1] = (k + 0.5) * h
            info[2] = min(k + 1, n_record)
            return
        for i in range(d):
            x[i] = xn[i]
        if k + 1 < n_record:
            out[k + 1, :] = x
    info[0] = 1.0
    info[1] = np.inf
    info[2] = min(n_steps + 1, n_record)
    info[3:3 + d] = x


@numba.njit(inline="always")
def _delta(x, lengths):
    d = x.shape[0]
    m = np.inf
    for i in range(d):
        a = x[i]
        b = lengths[i] - x[i]
        if a < m:
            m = a
        if b < m:
            m = b
    return m


@numba.njit(inline="always")
def _log_phi0(x, lengths, logg):
    s = 0.0
    for i in range(x.shape[0]):
        L = lengths[i]
        s += _interp(logg[i], L, x[i]) + math.log(x[i]) + math.log(L - x[i])
    return s


@numba.njit(nogil=True, cache=True)
def _h_kernel(x0, n_steps, n_record, h, lengths, s1, s2, logg, log_phi0_min, layer_ratio,
              factor, max_depth, max_resamples, gen, out, gprime, bismut, info, I, Q):
    d = x0.shape[0]
    x = x0.copy()
    y = np.empty(d)
    z = np.empty(d)
    drift = np.empty(d)
    stack_dt = np.empty(factor * (max_depth + 2) + 2)
    stack_dep = np.empty(factor * (max_depth + 2) + 2, dtype=np.int64)
    halvings = 0
    resamples = 0
    phi_int = 0.0
    max_dep_seen = 0
    if n_record > 0:
        out[0, :] = x
    for i in range(d):
        Q[i] = 1.0
        I[i] = 0.0
    info[0] = 1.0
    for k in range(n_steps):
        gp = gprime[k] if bismut else 0.0
        top = 0
        stack_dt[0] = h
        stack_dep[0] = 0
        top = 1
        while top > 0:
            top -= 1
            dt = stack_dt[top]
            dep = stack_dep[top]
            split = False
            dl = _delta(x, lengths)
            if dt > layer_ratio * dl * dl:
                if _log_phi0(x, lengths, logg) < log_phi0_min:
                    split = True
            if split:
                if dep + 1 > max_depth:
                    info[0] = -1.0
                    info[1] = (k + 1) * h
                    info[2] = halvings
                    info[3] = resamples
                    info[4] = phi_int
                    info[5] = max_dep_seen
                    return
                halvings += 1
                if dep + 1 > max_dep_seen:
                    max_dep_seen = dep + 1
                for j in range(factor):
                    stack_dt[top] = dt / factor
                    stack_dep[top] = dep + 1
                    top += 1
                continue
            # one Euler-Maruyama substep with exit rejection
            for i in range(d):
                L = lengths[i]
                drift[i] = _interp(s1[i], L, x[i]) + 2.0 / x[i] - 2.0 / (L - x[i])
            sq = math.sqrt(2.0 * dt)
            tries = 0
            while True:
                ok = True
                for i in range(d):
                    z[i] = gen.standard_normal()
                    y[i] = x[i] + drift[i] * dt + sq * z[i]
                    if y[i] <= 0.0 or y[i] >= lengths[i]:
                        ok = False
                if ok:
                    break
                tries += 1
                resamples += 1
                if tries >= max_resamples:
                    break
            if not ok:
                # persistent exits: treat like the boundary layer and split
                if dep + 1 > max_depth:
                    info[0] = -1.0
                    info[1] = (k + 1) * h
                    info[2] = halvings
                    info[3] = resamples
                    info[4] = phi_int
                    info[5] = max_dep_seen
                    return
                halvings += 1
                for j in range(factor):
                    stack_dt[top] = dt / factor
                    stack_dep[top] = dep + 1
                    top += 1
                continue
            lp = _log_phi0(x, lengths, logg)
            phi_int += math.exp(-2.0 * lp) * dt
            if bismut:
                for i in range(d):
                    L = lengths[i]
                    hess = _interp(s2[i], L, x[i]) - 2.0 / (x[i] * x[i]) - 2.0 / ((L - x[i]) * (L - x[i]))
                    I[i] += gp * Q[i] * math.sqrt(dt) * z[i]
                    # Ric = -Hess(V + 2 log phi0); frozen over the substep
                    Q[i] *= math.exp(hess * dt)
            for i in range(d):
                x[i] = y[i]
        if k + 1 < n_record:
            out[k + 1, :] = x
    info[1] = np.inf
    info[2] = halvings
    info[3] = resamples
    info[4] = phi_int
    info[5] = max_dep_seen
    info[6:6 + d] = x


# ---------------------------------------------------------------------------
# python API
# ---------------------------------------------------------------------------


def _sample_initial(E, nu, gen, conditioned=False):
    """Draw a starting point from ``nu`` (a point, DiscreteMeasure, 'ground' or 'uniform').

    With ``conditioned=True`` atoms are reweighted by ``phi_0`` (the law of
    the starting point of the h-process that reproduces ``E^nu[.|T<tau]``).
    """
    d = E.dim
    L = np.asarray(E.domain.lengths)
    if isinstance(nu, str):
        if nu == "ground":
            return E.ground.sample(gen, 1)[0]
        if nu == "uniform":
            if conditioned:
                # density proportional to phi_0 on the box: rejection from uniform
                sup = E.phi_sup([0])[0]
                while True:
                    x = gen.random(d) * L
                    if gen.random() * sup <= E.phi0(x)[0]:
                        return x
            return gen.random(d) * L
        raise ValueError(f"unknown initial law {nu!r}")
    if hasattr(nu, "points"):
        pts = np.asarray(nu.points, dtype=float).reshape(-1, d)
        w = np.asarray(nu.weights, dtype=float)
    else:
        pts = np.asarray(nu, dtype=float).reshape(-1, d)
        w = np.full(len(pts), 1.0 / len(pts))
    if conditioned:
        w = w * np.where(E.domain.contains(pts, closed=False), E.phi0(np.clip(pts, 1e-300, L)), 0.0)
        if not w.sum() > 0:
            raise ValueError("initial law gives no mass to the interior")
    if len(pts) == 1:
        return pts[0].copy()
    j = int(np.searchsorted(np.cumsum(w) / w.sum(), gen.random(), side="right"))
    return pts[min(j, len(pts) - 1)].copy()


def _steps(T, h):
    n = int(round(T / h))
    if abs(n * h - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"horizon {T} is not a multiple of the step {h}")
    return n


def simulate_killed_path(E, nu, T, cfg=SdeConfig(), seed=0, replica=0, record=None, stream=0):
    """Killed ``L``-diffusion up to ``T`` with Brownian-bridge exit checks.

    ``record`` is the recorded horizon (defaults to ``T``; 0 stores only the
    starting point).
    """
    if not T > 0:
        raise ValueError("T must be positive")
    tabs = E.numba_tables()
    gen0 = _rng.stream(seed, stream, _rng.INIT, replica)
    x0 = _sample_initial(E, nu, gen0)
    n = _steps(T, cfg.h)
    n_rec = n + 1 if record is None else _steps(record, cfg.h) + 1 if record > 0 else 1
    out = np.full((n_rec, E.dim), np.nan)
    info = np.zeros(3 + E.dim)
    gen = _rng.stream(seed, stream, _rng.PATH, replica)
    _killed_kernel(np.asarray(x0, dtype=float), n, n_rec, cfg.h, tabs["lengths"], tabs["vp"],
                   not tabs["constant_v"], gen, out, info)
    survived = bool(info[0] == 1.0)
    k = int(info[2])
    if not survived and info[1] == 0.0:
        out = np.asarray(x0, dtype=float).reshape(1, E.dim)
        k = 1
    return PathSample(
        h=cfg.h,
        positions=out[:k],
        survived=survived,
        tau=float(info[1]),
        seed=int(seed),
        replica=int(replica),
        final=info[3:].copy() if survived else None,
    )


def simulate_h_path(E, nu0, T, cfg=SdeConfig(), seed=0, replica=0, record=None, stream=0,
                    x0=None, gamma_prime=None):
    """Conditioned (ground-state transformed) diffusion up to ``T``.

    The starting point is drawn from ``nu0`` reweighted by ``phi_0``.  A
    replica that needs more than ``cfg.max_halvings`` nested splits is
    aborted and returned with ``survived=False`` and a diagnostic.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    tabs = E.numba_tables()
    if x0 is None:
        gen0 = _rng.stream(seed, stream, _rng.INIT, replica)
        x0 = _sample_initial(E, nu0, gen0, conditioned=True)
    x0 = np.asarray(x0, dtype=float).reshape(E.dim)
    if not np.all(E.domain.contains(x0, closed=False)):
        raise ValueError("the conditioned process must start in the interior")
    n = _steps(T, cfg.h)
    n_rec = n + 1 if record is None else (_steps(record, cfg.h) + 1 if record > 0 else 1)
    out = np.empty((n_rec, E.dim))
    info = np.zeros(6 + E.dim)
    I = np.zeros(E.dim)
    Q = np.ones(E.dim)
    bismut = gamma_prime is not None
    gp = np.ascontiguousarray(gamma_prime, dtype=float) if bismut else np.zeros(1)
    log_min = math.log(cfg.phi0_min * float(E.phi_sup([0])[0])) if cfg.phi0_min > 0 else -np.inf
    gen = _rng.stream(seed, stream, _rng.PATH, replica)
    _h_kernel(x0, n, n_rec, cfg.h, tabs["lengths"], tabs["s1"], tabs["s2"], tabs["logg"], log_min,
              cfg.layer_ratio, int(cfg.substep_factor), int(cfg.max_halvings), int(cfg.max_resamples),
              gen, out, gp, bismut, info, I, Q)
    aborted = info[0] < 0
    diag = {
        "halvings": int(info[2]),
        "resamples": int(info[3]),
        "phi0_inv2_integral": float(info[4]),
        "max_depth": int(info[5]),
    }
    if aborted:
        diag["aborted"] = "step halving exceeded max_halvings; h too coarse"
    sample = PathSample(
        h=cfg.h,
        positions=out,
        survived=not aborted,
        tau=float(info[1]),
        seed=int(seed),
        replica=int(replica),
        final=None if aborted else info[6:].copy(),
        diagnostics=diag,
    )
    if bismut:
        sample.diagnostics["bismut_integral"] = I.copy()
        sample.diagnostics["Q"] = Q.copy()
    return sample


def survival_fraction(E, nu, T, n, cfg=SdeConfig(), seed=0, workers=1, stream=0):
    """Monte-Carlo ``P^nu(T < tau)`` from ``n`` killed replicas: ``(p, se)``."""

    def one(i):
        return simulate_killed_path(E, nu, T, cfg, seed, i, record=0, stream=stream).survived

    alive = np.asarray(_rng.replica_map(one, n, workers), dtype=float)
    p = float(alive.mean())
    return p, float(math.sqrt(max(p * (1 - p), 0.0) / n))


def scaled_survival(E, nu, T, n, cfg=SdeConfig(), seed=0, workers=1, stream=0):
    """``exp(lambda_0 T) P^nu(T < tau)`` from conditioned paths: ``(value, se)``.

    Uses ``P^nu(T < tau) = exp(-lambda_0 T) nu(phi_0) E[1 / phi_0(X_T)]`` for
    the conditioned process started from ``nu`` reweighted by ``phi_0``.
    This stays usable when the survival probability itself is far too
    small for direct counting.
    """
    d = E.dim
    L = np.asarray(E.domain.lengths)
    if hasattr(nu, "points"):
        pts, w = np.asarray(nu.points, dtype=float).reshape(-1, d), np.asarray(nu.weights, dtype=float)
    else:
        pts = np.asarray(nu, dtype=float).reshape(-1, d)
        w = np.full(len(pts), 1.0 / len(pts))
    inside = E.domain.contains(pts, closed=False)
    nu_phi0 = math.fsum(w[inside] * E.phi0(np.clip(pts[inside], 1e-300, L)))

    def one(i):
        p = simulate_h_path(E, nu, T, cfg, seed, i, record=0, stream=stream)
        return float(np.exp(-E.log_phi0(p.final)[0])) if p.survived else math.nan

    v = np.asarray(_rng.replica_map(one, n, workers))
    v = v[np.isfinite(v)]
    return nu_phi0 * float(v.mean()), nu_phi0 * float(v.std(ddof=1) / math.sqrt(len(v)))


@dataclass
class ConditionalEstimate:
    estimate: float
    se: float
    method: str
    n_replicas: int
    n_used: int
    ess: float
    n_failed: int = 0
    low_ess: bool = False
    values: np.ndarray | None = None
    weights: np.ndarray | None = None


def _weighted_mean_se(values, weights):
    w = np.asarray(weights, dtype=float)
    v = np.asarray(values, dtype=float)
    sw = math.fsum(w)
    est = math.fsum(w * v) / sw
    # delta method for the ratio estimator
    var = math.fsum((w * (v - est)) ** 2) / sw ** 2
    ess = sw ** 2 / math.fsum(w ** 2)
    return est, math.sqrt(var), ess


def conditional_estimator(E, nu, F, t, T, method="h_importance", N=1000, cfg=SdeConfig(), seed=0,
                          workers=1, stream=0):
    """``E^nu[F(X|[0,t]) | T < tau]`` by rejection or ground-state importance sampling.

    ``F`` receives a :class:`PathSample` whose recorded positions cover
    ``[0, t]``.  The importance estimator simulates the conditioned process
    from ``nu`` reweighted by ``phi_0`` and weights replica ``i`` by
    ``1 / phi_0(X_T^i)``.
    """
    if T < t:
        raise ValueError("conditioning horizon T must be at least t")
    if method not in ("rejection", "h_importance"):
        raise ValueError(f"unknown method {method!r}")

    if method == "rejection":
        def one(i):
            p = simulate_killed_path(E, nu, T, cfg, seed, i, record=t, stream=stream)
            return (float(F(p)), 1.0) if p.survived else (math.nan, 0.0)
    else:
        def one(i):
            p = simulate_h_path(E, nu, T, cfg, seed, i, record=t, stream=stream)
            if not p.survived:
                return math.nan, math.nan
            return float(F(p)), float(np.exp(-E.log_phi0(p.final)[0]))

    res = _rng.replica_map(one, N, workers)
    vals = np.array([r[0] for r in res])
    w = np.array([r[1] for r in res])
    if method == "rejection":
        ok = w > 0
        n_failed = 0
        if not ok.any():
            raise NoSurvivorError(f"no replica survived to T={T} out of {N}")
    else:
        ok = np.isfinite(w)
        n_failed = int((~ok).sum())
        if not ok.any():
            raise NoSurvivorError("every conditioned replica aborted")
    est, se, ess = _weighted_mean_se(vals[ok], w[ok])
    low = ess < 10
    if low:
        warnings.warn(f"effective sample size {ess:.1f} below 10", RuntimeWarning, stacklevel=2)
    return ConditionalEstimate(est, se, method, N, int(ok.sum()), ess, n_failed, low, vals, w)


def ricci_h(E, x):
    """Bakry-Emery curvature of the conditioned generator (diagonal on boxes)."""
    x = E._points(x)
    out = np.empty_like(x)
    for i, f in enumerate(E.factors):
        xi = x[:, i]
        if f.closed_form:
            w = np.pi / f.length
            out[:, i] = 2 * w ** 2 / np.sin(w * xi) ** 2
        else:
            tabs = f.tables()
            grid = np.linspace(0.0, f.length, len(tabs["s2"]))
            out[:, i] = -(np.interp(xi, grid, tabs["s2"]) - 2 / xi ** 2 - 2 / (f.length - xi) ** 2)
    return out


def bismut_gradient(E, f, t, x, N=10000, cfg=SdeConfig(), gamma=None, seed=0, workers=1, stream=0):
    """Monte-Carlo ``grad P_t^0 f(x)`` from the Bismut formula.

    ``gamma`` is a weight with ``gamma(0) = 0`` and ``gamma(t) = 1``; its
    derivative is evaluated at the left end of each base step (default
    ``gamma(s) = s / t``).  With the ``sqrt(2)`` noise convention the
    estimator is ``f(X_t) / sqrt(2) * int_0^t gamma'(s) Q_s dB_s``.
    Returns ``(gradient, standard error)`` arrays of length ``d``.
    """
    n = _steps(t, cfg.h)
    if gamma is None:
        gp = np.full(n, 1.0 / t)
    else:
        s = cfg.h * np.arange(n + 1)
        g = np.asarray(gamma(s), dtype=float)
        if abs(g[0]) > 1e-12 or abs(g[-1] - 1.0) > 1e-12:
            raise ValueError("gamma must satisfy gamma(0) = 0 and gamma(t) = 1")
        gp = np.diff(g) / cfg.h
    x = np.asarray(x, dtype=float).reshape(E.dim)

    def one(i):
        p = simulate_h_path(E, None, t, cfg, seed, i, record=0, stream=stream, x0=x, gamma_prime=gp)
        if not p.survived:
            return np.full(E.dim, np.nan)
        fx = float(np.asarray(f(p.final.reshape(1, -1))).reshape(-1)[0])
        return fx * p.diagnostics["bismut_integral"] / math.sqrt(2.0)

    vals = np.array(_rng.replica_map(one, N, workers))
    vals = vals[np.all(np.isfinite(vals), axis=1)]
    return vals.mean(axis=0), vals.std(axis=0, ddof=1) / math.sqrt(len(vals))


def write_path_csv(path, file, E=None):
    """Dump ``time, x_1..x_d, phi0`` rows of one replica."""
    pos = path.positions
    phi0 = E.phi0(pos) if E is not None else np.full(len(pos), np.nan)
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x{i + 1}" for i in range(pos.shape[1])] + ["phi0"])
        for t, x, p in zip(path.times, pos, phi0):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(p))])
