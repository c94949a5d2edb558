"""Experiment configuration, replica orchestration, rate fits and persistence."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import rng as _rng
from .diffusion import SdeConfig, simulate_h_path, simulate_killed_path
from .measures import (
    SpectralDensity,
    density_measure_1d,
    hminus1_functional,
    path_to_empirical,
    psi_coefficients,
)
from .spectral import Domain, box_eigensystem, limit_constant, solve_interval_eigensystem
from .transport import DiscreteMeasure, w2_1d_exact, w2_against_ground

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "RateEstimate",
    "build_eigensystem",
    "run_convergence_experiment",
    "run_rate_sweep",
    "fit_rate",
    "lipschitz_diagnostic",
    "write_results",
    "load_config",
    "save_config",
    "AGGREGATE_COLUMNS",
    "REPLICA_COLUMNS",
]

AGGREGATE_COLUMNS = [
    "t", "T", "n_replicas", "n_failures", "mean_w2sq", "se_w2sq", "t_times_mean",
    "mean_hminus1", "se_hminus1", "r_smooth", "ot_method", "tail_bound",
]
REPLICA_COLUMNS = [
    "t", "T", "replica", "weight", "failed", "w2sq", "hminus1", "ot_residual",
    "phi0_inv2_integral", "halvings", "resamples",
]

_SMOOTHING_KEYS = {"mode", "r", "alpha"}
_OT_KEYS = {"method", "eps", "n_ref", "n_atoms", "grid", "tol", "max_iters"}
_SDE_KEYS = {f.name for f in dataclasses.fields(SdeConfig)}


@dataclass
class ExperimentConfig:
    """All inputs of a convergence experiment.

    ``t_list`` and ``T_list`` are paired: run ``j`` observes the path on
    ``[0, t_list[j]]`` conditioned on survival to ``T_list[j]``.
    ``smoothing`` selects the time ``r`` at which the spectral functional is
    evaluated: ``{"mode": "schedule", "alpha": a}`` gives ``r = t^-a``,
    ``{"mode": "fixed", "r": r}`` a constant and ``{"mode": "none"}`` ``r = 0``.
    """

    domain: dict = field(default_factory=lambda: {"kind": "interval", "length": 1.0, "potential": None})
    M: int = 256
    t_list: list = field(default_factory=lambda: [10.0])
    T_list: list = field(default_factory=lambda: [10.0])
    N: int = 100
    estimator: str = "h_importance"
    smoothing: dict = field(default_factory=lambda: {"mode": "schedule", "alpha": 1.2})
    ot: dict = field(default_factory=lambda: {"method": "auto"})
    initial: object = "ground"
    sde: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    output: str | None = None
    bias_check: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        errs = []
        try:
            Domain.from_dict(self.domain)
        except (ValueError, TypeError) as err:
            errs.append(f"domain: {err}")
        if not isinstance(self.M, int) or self.M < 2:
            errs.append("M: must be an integer >= 2")
        if not isinstance(self.t_list, (list, tuple)) or not self.t_list:
            errs.append("t_list: must be a non-empty list")
        elif not isinstance(self.T_list, (list, tuple)) or len(self.T_list) != len(self.t_list):
            errs.append("T_list: must have the same length as t_list")
        else:
            for j, (t, T) in enumerate(zip(self.t_list, self.T_list)):
                if not (isinstance(t, (int, float)) and t > 0):
                    errs.append(f"t_list[{j}]: horizons must be positive")
                if not (isinstance(T, (int, float)) and T >= t):
                    errs.append(f"T_list[{j}]: conditioning horizon must be >= t ({T} < {t})")
        if not isinstance(self.N, int) or self.N < 2:
            errs.append("N: must be an integer >= 2")
        if self.estimator not in ("h_importance", "rejection"):
            errs.append("estimator: must be 'h_importance' or 'rejection'")
        if not isinstance(self.smoothing, dict) or set(self.smoothing) - _SMOOTHING_KEYS:
            errs.append(f"smoothing: unknown field(s) {sorted(set(self.smoothing) - _SMOOTHING_KEYS)}")
        elif self.smoothing.get("mode", "schedule") not in ("schedule", "fixed", "none"):
            errs.append("smoothing.mode: must be 'schedule', 'fixed' or 'none'")
        if not isinstance(self.ot, dict) or set(self.ot) - _OT_KEYS:
            errs.append(f"ot: unknown field(s) {sorted(set(self.ot) - _OT_KEYS)}")
        elif self.ot.get("method", "auto") not in ("auto", "quantile", "lp", "sinkhorn", "grid"):
            errs.append("ot.method: must be one of auto, quantile, lp, sinkhorn, grid")
        if not isinstance(self.sde, dict) or set(self.sde) - _SDE_KEYS:
            errs.append(f"sde: unknown field(s) {sorted(set(self.sde) - _SDE_KEYS)}")
        else:
            try:
                SdeConfig(**self.sde)
            except (ValueError, TypeError) as err:
                errs.append(f"sde: {err}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append("seed: must be a nonnegative integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            errs.append("workers: must be a positive integer")
        if errs:
            raise ValueError("invalid config: " + "; ".join(errs))

    @property
    def sde_config(self):
        return SdeConfig(**self.sde)

    def r_smooth(self, t):
        mode = self.smoothing.get("mode", "schedule")
        if mode == "none":
            return 0.0
        if mode == "fixed":
            return float(self.smoothing["r"])
        return float(t) ** (-float(self.smoothing.get("alpha", 1.2)))

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ValueError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"invalid config: unknown field(s) {unknown}")
        return cls(**d)

    def config_hash(self):
        d = self.to_dict()
        for k in ("output", "workers"):
            d.pop(k, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path):
    """Read an :class:`ExperimentConfig` from a JSON file."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as err:
            raise ValueError(f"config is not valid JSON: {err}") from None
    return ExperimentConfig.from_dict(d)


def save_config(cfg, path):
    _atomic_write(path, cfg.to_json())


def build_eigensystem(domain, M):
    dom = Domain.from_dict(domain) if isinstance(domain, dict) else domain
    if dom.kind == "box":
        return box_eigensystem(dom.lengths, M)
    return solve_interval_eigensystem(dom.lengths[0], dom.potential, M)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    aggregates: list
    replicas: list
    metadata: dict

    @property
    def failure_fraction(self):
        return max((a["n_failures"] / a["n_replicas"] for a in self.aggregates), default=0.0)


def _weighted(values, weights):
    """Ratio-estimator mean and delta-method s.e. with compensated sums."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    sw = math.fsum(w)
    mean = math.fsum(w * v) / sw
    n = len(v)
    if n < 2:
        return mean, math.inf
    var = math.fsum((w * (v - mean)) ** 2) / sw ** 2 * n / (n - 1)
    return mean, math.sqrt(var)


def _initial(cfg):
    if isinstance(cfg.initial, str):
        return cfg.initial
    return np.asarray(cfg.initial, dtype=float)


def _replica(E, cfg, j, i, t, T, r, sde, ot, bias):
    init = _initial(cfg)
    if cfg.estimator == "h_importance":
        p = simulate_h_path(E, init, T, sde, cfg.seed, i, record=t, stream=j)
        ok = p.survived
        weight = float(np.exp(-E.log_phi0(p.final)[0])) if ok else 0.0
    else:
        p = simulate_killed_path(E, init, T, sde, cfg.seed, i, record=t, stream=j)
        ok = p.survived
        weight = 1.0 if ok else 0.0
    rec = {
        "t": t, "T": T, "replica": i, "weight": weight, "failed": 0,
        "w2sq": math.nan, "hminus1": math.nan, "ot_residual": math.nan,
        "phi0_inv2_integral": p.diagnostics.get("phi0_inv2_integral", math.nan),
        "halvings": p.diagnostics.get("halvings", 0), "resamples": p.diagnostics.get("resamples", 0),
    }
    if not ok:
        # a killed rejection path simply carries zero weight; an aborted h-path is a failure
        rec["failed"] = int(cfg.estimator == "h_importance")
        return rec, None
    coeffs = psi_coefficients(p, E, t)
    if coeffs.flagged:
        rec["failed"] = 1
        rec["weight"] = 0.0
        return rec, None
    hm = hminus1_functional(coeffs, E, r)
    mu_t = path_to_empirical(p, t)
    res = w2_against_ground(
        mu_t, E,
        n_ref=int(ot.get("n_ref", 1024)),
        method=ot.get("method", "auto"),
        eps=ot.get("eps"),
        n_atoms=ot.get("n_atoms"),
        grid=ot.get("grid"),
        tol=float(ot.get("tol", 1e-6)),
        max_iters=int(ot.get("max_iters", 5000)),
        report_bias=bias,
    )
    if not res.converged:
        rec["failed"] = 1
        rec["weight"] = 0.0
        return rec, res
    rec.update(w2sq=float(res.cost), hminus1=float(hm.value), ot_residual=float(res.marginal_residual))
    return rec, (res, hm)


def _git_version():
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(__file__),
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


def run_convergence_experiment(cfg, E=None, progress=None):
    """Estimate ``E[W_2(mu_t, mu_0)^2 | T < tau]`` and the spectral functional per ``(t, T)``.

    Replica ``i`` of pair ``j`` uses the random stream ``(seed, j, i)``;
    aggregates are order-independent, so the result does not depend on
    ``workers``.
    """
    start = time.time()
    E = E or build_eigensystem(cfg.domain, cfg.M)
    sde = cfg.sde_config
    ot = dict(cfg.ot)
    if ot.get("method", "auto") == "auto" and E.dim == 1:
        ot["method"] = "quantile"
    lc = limit_constant(E) if E.dim <= 3 else None
    aggregates, replicas, per_pair = [], [], []
    for j, (t, T) in enumerate(zip(cfg.t_list, cfg.T_list)):
        t, T = float(t), float(T)
        r = cfg.r_smooth(t)

        def one(i, j=j, t=t, T=T, r=r):
            return _replica(E, cfg, j, i, t, T, r, sde, ot, bias=cfg.bias_check and i == 0 and E.dim > 1)

        out = _rng.replica_map(one, cfg.N, cfg.workers)
        recs = [o[0] for o in out]
        replicas.extend(recs)
        good = [rec for rec in recs if rec["weight"] > 0 and not rec["failed"]]
        n_fail = sum(rec["failed"] for rec in recs)
        tail = math.nan
        method = ot.get("method", "auto")
        bias = math.nan
        for rec, o in zip(recs, out):
            if o[1] is not None and isinstance(o[1], tuple):
                method = o[1][0].method if method == "auto" else method
                tail = o[1][1].tail_bound
                bias = o[1][0].extra.get("ref_bias", math.nan)
                break
        if good:
            w = [rec["weight"] for rec in good]
            mw, sw = _weighted([rec["w2sq"] for rec in good], w)
            mh, sh = _weighted([rec["hminus1"] for rec in good], w)
            ess = math.fsum(w) ** 2 / math.fsum(np.square(w))
        else:
            mw = sw = mh = sh = ess = math.nan
        aggregates.append({
            "t": t, "T": T, "n_replicas": cfg.N, "n_failures": n_fail,
            "mean_w2sq": mw, "se_w2sq": sw, "t_times_mean": t * mw,
            "mean_hminus1": mh, "se_hminus1": sh, "r_smooth": r, "ot_method": method, "tail_bound": tail,
        })
        g = E.gaps[1:]
        per_pair.append({
            "t": t, "T": T, "ess": ess, "n_used": len(good), "ref_bias": bias,
            "hminus1_limit": math.fsum(2 * np.exp(-2 * g * r) / g ** 2) if r > 0 or E.dim < 4 else math.inf,
        })
        if progress:
            progress(aggregates[-1])
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "version": _git_version(),
        "dim": E.dim,
        "n_modes": E.n_modes,
        "lambda0": E.lambda0,
        "limit_constant": None if lc is None else {"value": lc.value, "tail_bound": lc.tail_bound},
        "pairs": per_pair,
        "wall_clock_seconds": time.time() - start,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    result = ExperimentResult(cfg, aggregates, replicas, meta)
    if result.failure_fraction > 0.5:
        raise RuntimeError(f"more than half of the replicas failed ({result.failure_fraction:.0%})")
    return result


# ---------------------------------------------------------------------------
# rate fits
# ---------------------------------------------------------------------------


@dataclass
class RateEstimate:
    slope: float
    intercept: float
    residuals: np.ndarray
    r2: float
    model: str
    slope_se: float = math.nan
    ci: tuple = (math.nan, math.nan)
    chi2: float = math.nan
    aic: float = math.nan
    n_points: int = 0
    alternatives: dict = field(default_factory=dict)


def _design(t, model):
    lt = np.log(t)
    offset = np.log(lt) if model == "power_log" else np.zeros_like(lt)
    return np.column_stack([np.ones_like(lt), lt]), offset


def _wls(X, z, w):
    sw = np.sqrt(w)
    beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
    return beta


def fit_rate(points, model="power", n_boot=1000, seed=0, level=0.95):
    """Weighted least squares of ``log y`` on ``log t``.

    ``points`` are ``(t, y, se)`` triples (``se`` may be 0 or missing for an
    unweighted fit).  ``model='power'`` fits ``y = C t^b``;
    ``model='power_log'`` fits ``y = C t^b log t`` (``b = -1`` is the
    ``log t / t`` law).  The slope interval comes from a parametric
    bootstrap in log space whose noise is inflated by ``max(1, sqrt(chi2 /
    dof))`` when the scatter exceeds the stated errors.
    """
    pts = [tuple(p) + (0.0,) * (3 - len(p)) for p in points]
    if len(pts) < 3:
        raise ValueError("a rate fit needs at least 3 points")
    t = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    se = np.array([p[2] for p in pts], dtype=float)
    if np.any(~(y > 0)):
        raise ValueError("rate fits need positive y values")
    if np.any(t <= 1.0) and model == "power_log":
        raise ValueError("power_log needs t > 1")
    if model not in ("power", "power_log"):
        raise ValueError(f"unknown model {model!r}")
    z = np.log(y)
    sz = np.where(se > 0, se / y, 0.0)
    weighted = bool(np.all(sz > 0))
    w = 1.0 / sz ** 2 if weighted else np.ones_like(z)
    X, off = _design(t, model)
    beta = _wls(X, z - off, w)
    resid = z - off - X @ beta
    chi2 = float(np.sum(w * resid ** 2))
    dof = len(z) - 2
    zc = z - off
    ss_tot = float(np.sum(w * (zc - np.average(zc, weights=w)) ** 2))
    r2 = 1.0 - chi2 / ss_tot if ss_tot > 0 else 1.0
    cov = np.linalg.inv((X * w[:, None]).T @ X)
    if weighted:
        birge = max(1.0, math.sqrt(chi2 / dof)) if dof > 0 else 1.0
        noise = sz * birge
    else:
        s2 = chi2 / dof if dof > 0 else 0.0
        cov = cov * s2
        noise = np.full_like(z, math.sqrt(s2))
        birge = 1.0
    slope_se = math.sqrt(cov[1, 1]) * birge
    gen = _rng.stream(seed, _rng.AUX, 0)
    draws = z[None, :] + noise[None, :] * gen.standard_normal((n_boot, len(z)))
    slopes = np.array([_wls(X, d - off, w)[1] for d in draws])
    lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
    aic = chi2 + 2 * 2 if weighted else len(z) * math.log(max(chi2 / len(z), 1e-300)) + 2 * 2
    return RateEstimate(
        slope=float(beta[1]), intercept=float(beta[0]), residuals=resid, r2=r2, model=model,
        slope_se=slope_se, ci=(float(lo), float(hi)), chi2=chi2, aic=float(aic), n_points=len(z),
    )


def run_rate_sweep(cfg, model=None, E=None, result=None):
    """Run ``cfg`` over its horizons and fit the decay of ``mean W_2^2``.

    With ``model=None`` both models are fitted and the lower AIC wins
    (``power_log`` is only tried for ``d = 4``).  Returns ``(RateEstimate,
    ExperimentResult)``.
    """
    if len(cfg.t_list) < 3:
        raise ValueError("a rate sweep needs at least 3 horizons")
    E = E or build_eigensystem(cfg.domain, cfg.M)
    if E.dim < 2:
        raise ValueError("rate sweeps are meant for d >= 2")
    result = result or run_convergence_experiment(cfg, E)
    pts = [(a["t"], a["mean_w2sq"], a["se_w2sq"]) for a in result.aggregates]
    models = [model] if model else (["power", "power_log"] if E.dim == 4 else ["power"])
    fits = {m: fit_rate(pts, m, seed=cfg.seed) for m in models}
    best = min(fits.values(), key=lambda f: f.aic)
    best.alternatives = {m: {"slope": f.slope, "aic": f.aic, "ci": f.ci} for m, f in fits.items()}
    return best, result


# ---------------------------------------------------------------------------
# semigroup Lipschitz diagnostic
# ---------------------------------------------------------------------------


def lipschitz_diagnostic(E, mu1, mu2, t_list, n_tab=20001):
    """Ratios ``W_2(mu1 P_t, mu2 P_t) / W_2(mu1, mu2)`` under the conditioned semigroup.

    Evolved laws are represented by their spectral ``mu_0``-densities.
    Rows carry ``t``, ``w2``, ``ratio`` and a bound on the density
    truncation error; a pair at zero distance is reported as skipped.
    """
    if E.dim != 1:
        raise ValueError("the Lipschitz diagnostic needs a one-dimensional system")
    mu1 = DiscreteMeasure.from_measure(mu1)
    mu2 = DiscreteMeasure.from_measure(mu2)
    base = w2_1d_exact(mu1, mu2).cost
    c1 = mu1.weights @ E.ratio(mu1.points)
    c2 = mu2.weights @ E.ratio(mu2.points)
    R = E.ratio_sup()
    rows = []
    for t in t_list:
        t = float(t)
        if base == 0.0:
            rows.append({"t": t, "w2": 0.0, "ratio": math.nan, "tail_bound": 0.0, "skipped": True})
            continue
        if t == 0.0:
            rows.append({"t": 0.0, "w2": math.sqrt(base), "ratio": 1.0, "tail_bound": 0.0, "skipped": False})
            continue
        damp = np.exp(-E.gaps * t)
        laws = []
        for c in (c1, c2):
            rho = SpectralDensity(E, c * damp)
            laws.append(density_measure_1d(lambda x, rho=rho: np.maximum(rho(x), 0.0), E, n_tab))
        w2 = math.sqrt(w2_1d_exact(laws[0], laws[1]).cost)
        tail = float(R[-1] ** 2 * damp[-1] * E.n_modes)
        rows.append({"t": t, "w2": w2, "ratio": w2 / math.sqrt(base), "tail_bound": tail, "skipped": False})
    return rows


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _csv_text(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results(result, path):
    """Write ``aggregates.csv``, ``replicas.csv`` and ``metadata.json`` into ``path``."""
    os.makedirs(path, exist_ok=True)
    _atomic_write(os.path.join(path, "aggregates.csv"), _csv_text(result.aggregates, AGGREGATE_COLUMNS))
    _atomic_write(os.path.join(path, "replicas.csv"), _csv_text(result.replicas, REPLICA_COLUMNS))
    meta = dict(result.metadata)
    meta["config"] = result.config.to_dict()
    _atomic_write(os.path.join(path, "metadata.json"), json.dumps(meta, indent=2, sort_keys=True, default=float))
    return path
