"""Monte Carlo harness: seeded replication sweeps, summaries and diagnostics.

A run is a pure function of its :class:`ExperimentConfig`.  Replication
``r`` at noise level ``eps_list[i]`` is simulated from
``derive_seed(master_seed, i, r)``; replications are processed in fixed-size
chunks, so serial and parallel runs produce identical records.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from . import filtering as flt
from .errors import (ConfigurationError, DegenerateDataError, DomainError, QVToolError)
from .kernels import constants as kernel_constants
from .kernels import parse_kernel_option
from .model import SystemSpec, integrate_time, psi_true, var_Z
from .param_est import certify, se_limit_stddev, substitution_estimator
from .qv import (EstimatorConfig, estimate_int_b2, estimate_int_f2, qv_estimate)
from .sim import TimeGrid, derive_seed, normal_stream, realized_qv_oracle, simulate_batch

ESTIMATORS = ("qv", "int_b2", "int_f2", "se", "mle", "bayes", "onestep", "adaptive")
PRELIMINARY_STREAM = 2

RECORD_FIELDS = ("eps_index", "eps", "rep", "seed", "status", "reason", "estimate",
                 "target", "error", "clamped", "aux")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a Monte Carlo sweep depends on.

    ``aux`` in the records is estimator specific: the gap to the realized
    quadratic variation (``qv``), the quadratic-variation estimate (``se``),
    ``sup_{t >= t0} |theta*_t - theta0|`` (``onestep``) or the same sup of
    the filter gap (``adaptive``).

    ``preliminary`` selects the input of ``onestep``/``adaptive``: the
    substitution estimator (``"se"``) or ``theta0 + sqrt(eps) * Z`` with
    ``Z`` drawn from a dedicated noise stream (``"oracle"``).
    """

    system: SystemSpec
    eps_list: tuple[float, ...]
    replications: int
    estimator: str
    tau: float
    t0: float | None = None
    kernel: str = "degree=1,vanish=false"
    bandwidth_factor: float = 1.0
    master_seed: int = 0
    per_eps: int = 100
    preliminary: str = "se"
    adaptive_mode: str = "precomputed"
    chunk: int = 50
    workers: int = 1
    records_path: str | None = None
    summary_path: str | None = None
    name: str = ""

    def __post_init__(self) -> None:
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        if not eps or any(e <= 0 or e > 1 for e in eps):
            raise ConfigurationError("eps list must be non-empty with values in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigurationError("eps list must be strictly decreasing")
        if self.replications < 2:
            raise ConfigurationError("need at least 2 replications")
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"estimator must be one of {ESTIMATORS}")
        if not 0 < self.tau <= self.system.T:
            raise ConfigurationError("tau must lie in (0, T]")
        if self.t0 is not None and not self.tau < self.t0 <= self.system.T:
            raise ConfigurationError("t0 must lie in (tau, T]")
        if self.preliminary not in ("se", "oracle"):
            raise ConfigurationError("preliminary must be 'se' or 'oracle'")
        if self.adaptive_mode not in ("precomputed", "recurrent"):
            raise ConfigurationError("adaptive_mode must be 'precomputed' or 'recurrent'")
        if self.chunk < 1 or self.workers < 1 or self.per_eps < 1:
            raise ConfigurationError("chunk, workers and per_eps must be positive")
        if self.estimator not in ("qv", "int_b2", "int_f2") and not self.system.is_parametric:
            raise ConfigurationError(f"estimator {self.estimator!r} needs a parametric system")
        if self.system.is_parametric and self.system.theta.true is None:
            raise ConfigurationError("parametric system needs a true theta")
        try:
            parse_kernel_option(self.kernel)
        except (ValueError, QVToolError) as exc:
            raise ConfigurationError(f"bad kernel option: {exc}") from None

    def grid_for(self, eps: float) -> TimeGrid:
        return TimeGrid.default(self.system.T, eps, self.per_eps)

    def estimator_config(self, eps: float) -> EstimatorConfig:
        ks, k = parse_kernel_option(self.kernel)
        return EstimatorConfig(self.tau, self.bandwidth_factor * eps, ks, k)

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["system"] = self.system.to_dict()
        d["eps_list"] = list(self.eps_list)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        d = dict(d)
        if "system" not in d:
            raise ConfigurationError("config lacks 'system'")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        d["system"] = SystemSpec.from_dict(d["system"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None


def _reason(exc: Exception) -> str:
    name = type(exc).__name__
    return "".join("_" + c.lower() if c.isupper() else c for c in name).lstrip("_")


def _empty(ei, eps, rep, seed):
    return {"eps_index": ei, "eps": eps, "rep": rep, "seed": seed, "status": "ok",
            "reason": "", "estimate": math.nan, "target": math.nan, "error": math.nan,
            "clamped": False, "aux": math.nan}


def _quarantine(rec, reason):
    rec.update(status="quarantined", reason=reason)
    return rec


def _per_rep(fn, X, recs):
    """Apply ``fn(x_row) -> dict`` row by row, quarantining failures."""
    for i, rec in enumerate(recs):
        try:
            rec.update(fn(X[i]))
        except QVToolError as exc:
            _quarantine(rec, _reason(exc))


def _preliminary(cfg: ExperimentConfig, spec: SystemSpec, eps, X, grid, recs, seeds):
    th0 = spec.theta.true
    lo, hi = spec.theta.alpha, spec.theta.beta
    out = np.full(len(recs), np.nan)
    if cfg.preliminary == "oracle":
        for i, s in enumerate(seeds):
            out[i] = th0 + math.sqrt(eps) * normal_stream(s, PRELIMINARY_STREAM, 1)[0]
            if not lo < out[i] < hi:
                _quarantine(recs[i], "preliminary_outside")
        return out
    ecfg = cfg.estimator_config(eps)
    space = certify(spec, cfg.tau)
    psi = qv_estimate(X, grid, ecfg)
    for i, p in enumerate(np.atleast_1d(psi)):
        se = substitution_estimator(p, spec, cfg.tau, space)
        out[i] = se.theta
        if se.is_clamped:
            _quarantine(recs[i], "se_clamped")
    return out


def _run_chunk(cfg: ExperimentConfig, ei: int, reps: Sequence[int]) -> list[dict]:
    eps = cfg.eps_list[ei]
    spec = cfg.system.with_eps(eps)
    grid = cfg.grid_for(eps)
    seeds = [derive_seed(cfg.master_seed, ei, r) for r in reps]
    recs = [_empty(ei, eps, r, s) for r, s in zip(reps, seeds)]
    pp = simulate_batch(spec, grid, seeds)
    X = pp.X
    est = cfg.estimator
    tau = cfg.tau
    try:
        if est == "qv":
            ecfg = cfg.estimator_config(eps)
            target = psi_true(spec, tau)
            vals = np.atleast_1d(qv_estimate(X, grid, ecfg))
            gap = np.atleast_1d(realized_qv_oracle(pp, spec, tau))
            for i, rec in enumerate(recs):
                rec.update(estimate=vals[i], target=target, error=vals[i] - target,
                           aux=vals[i] - gap[i])
        elif est in ("int_b2", "int_f2"):
            ecfg = cfg.estimator_config(eps)
            th = spec.resolve_theta()
            if est == "int_b2":
                vals = np.atleast_1d(estimate_int_b2(X, grid, ecfg, spec.f))
                target = integrate_time(lambda s: spec.b.value(s, th) ** 2, 0.0, tau, spec)
            else:
                vals = np.atleast_1d(estimate_int_f2(X, grid, ecfg, spec.b))
                target = integrate_time(lambda s: spec.f.value(s, th) ** 2, 0.0, tau, spec)
            for i, rec in enumerate(recs):
                rec.update(estimate=vals[i], target=target, error=vals[i] - target)
        elif est == "se":
            ecfg = cfg.estimator_config(eps)
            space = certify(spec, tau)
            psi = np.atleast_1d(qv_estimate(X, grid, ecfg))
            th0 = spec.theta.true
            for i, rec in enumerate(recs):
                se = substitution_estimator(psi[i], spec, tau, space)
                rec.update(estimate=se.theta, target=th0, error=se.theta - th0,
                           clamped=se.is_clamped, aux=psi[i])
        elif est == "mle":
            th0 = spec.theta.true

            def one(x):
                r = flt.mle_grid(spec, x, grid)
                return {"estimate": r.theta, "target": th0, "error": r.theta - th0,
                        "clamped": r.at_boundary}
            _per_rep(one, X, recs)
        elif est == "bayes":
            th0 = spec.theta.true

            def one(x):
                v = flt.bayes_estimator(spec, x, grid)
                return {"estimate": v, "target": th0, "error": v - th0}
            _per_rep(one, X, recs)
        else:
            _run_filter_estimator(cfg, spec, eps, X, grid, recs, seeds)
    except QVToolError as exc:
        for rec in recs:
            if rec["status"] == "ok":
                _quarantine(rec, _reason(exc))
    return recs


def _run_filter_estimator(cfg, spec, eps, X, grid, recs, seeds):
    th0 = spec.theta.true
    tau = cfg.tau
    t0 = cfg.t0 if cfg.t0 is not None else tau
    tc = _preliminary(cfg, spec, eps, X, grid, recs, seeds)
    live = np.array([r["status"] == "ok" for r in recs])
    if not live.any():
        return
    Xl, tcl = X[live], tc[live]
    idx = np.nonzero(live)[0]
    os_ = flt.one_step_mle_process(spec, Xl, grid, tcl, tau)
    late = grid.times >= t0 - 1e-12
    if cfg.estimator == "onestep":
        sup = np.nanmax(np.abs(os_.theta_star[:, late] - th0), axis=1)
        for j, i in enumerate(idx):
            v = float(os_.theta_final[j])
            recs[i].update(estimate=v, target=th0, error=v - th0,
                           clamped=bool(os_.clamped[j, -1]), aux=float(sup[j]))
        return
    mh = flt.adaptive_filter(spec, Xl, grid, os_.theta_star, tau, tcl,
                             mode=cfg.adaptive_mode).m
    m0 = flt.kalman_bucy(spec, Xl, grid, th0).m
    gap = np.abs(mh - m0)
    after = grid.times > tau + 1e-12
    sup_all = np.max(gap[:, after], axis=1)
    sup_late = np.max(gap[:, late], axis=1)
    for j, i in enumerate(idx):
        recs[i].update(estimate=float(sup_all[j]), target=0.0, error=float(sup_all[j]),
                       clamped=bool(os_.clamped[j].any()), aux=float(sup_late[j]))


def _tasks(cfg: ExperimentConfig):
    for ei in range(len(cfg.eps_list)):
        for start in range(0, cfg.replications, cfg.chunk):
            yield ei, tuple(range(start, min(cfg.replications, start + cfg.chunk)))


def _run_task(args):
    cfg_dict, ei, reps = args
    return _run_chunk(ExperimentConfig.from_dict(cfg_dict), ei, reps)


def run_replications(cfg: ExperimentConfig, workers: int | None = None) -> list[dict]:
    """All per-replication records, sorted by ``(eps_index, rep)``.

    Estimator failures are recorded as quarantined replications with a
    reason code; they never abort the sweep.
    """
    workers = cfg.workers if workers is None else workers
    tasks = list(_tasks(cfg))
    if workers <= 1:
        chunks = [_run_chunk(cfg, ei, reps) for ei, reps in tasks]
    else:
        d = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_task, [(d, ei, reps) for ei, reps in tasks]))
    recs = [r for c in chunks for r in c]
    recs.sort(key=lambda r: (r["eps_index"], r["rep"]))
    return recs


def write_records(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else r[k])
                        for k in RECORD_FIELDS})


def read_records(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({"eps_index": int(row["eps_index"]), "eps": float(row["eps"]),
                        "rep": int(row["rep"]), "seed": int(row["seed"]),
                        "status": row["status"], "reason": row["reason"],
                        "estimate": float(row["estimate"]), "target": float(row["target"]),
                        "error": float(row["error"]), "clamped": row["clamped"] == "True",
                        "aux": float(row["aux"])})
    return out


# --------------------------------------------------------------------------
# summaries and diagnostics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    slope_se: float


def rate_regression(eps, values) -> RateFit:
    """Least squares of ``log(values)`` on ``log(eps)``.

    Raises
    ------
    DegenerateDataError
        With fewer than three levels or a non-positive value.
    """
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(eps) < 3:
        raise DegenerateDataError("rate regression needs at least 3 eps levels")
    if np.any(~np.isfinite(values)) or np.any(values <= 0):
        raise DegenerateDataError("RMSE must be positive and finite at every level")
    fit = stats.linregress(np.log(eps), np.log(values))
    return RateFit(float(fit.slope), float(fit.intercept), float(fit.stderr))


@dataclass(frozen=True)
class VarianceRatio:
    """Empirical over predicted variance with a chi-square interval."""

    ratio: float
    lower: float
    upper: float
    n: int

    def covers(self, value: float = 1.0) -> bool:
        return self.lower <= value <= self.upper


def variance_ratio(normalized_errors, predicted_sd: float, level: float = 0.95) -> VarianceRatio:
    """Ratio ``s^2 / predicted_sd^2`` of normalized errors (intended for ``n >= 100``)."""
    z = np.asarray(normalized_errors, dtype=float)
    z = z[np.isfinite(z)]
    n = len(z)
    if n < 2:
        raise DomainError("variance ratio needs at least 2 finite values")
    if not predicted_sd > 0:
        raise DomainError("predicted sd must be positive")
    r = float(np.var(z, ddof=1) / predicted_sd ** 2)
    a = 1.0 - level
    lo = r * (n - 1) / stats.chi2.ppf(1.0 - a / 2.0, n - 1)
    hi = r * (n - 1) / stats.chi2.ppf(a / 2.0, n - 1)
    return VarianceRatio(r, float(lo), float(hi), n)


@dataclass(frozen=True)
class EpsSummary:
    eps: float
    n_ok: int
    n_quarantined: int
    quarantine_reasons: dict
    mean_error: float
    se_mean_error: float
    rmse: float
    mean_abs_error: float
    clamp_rate: float
    empirical_sd: float
    predicted_sd: float
    mean_aux: float
    mean_abs_aux: float
    median_aux: float

    @property
    def quarantine_rate(self) -> float:
        return self.n_quarantined / max(1, self.n_ok + self.n_quarantined)


@dataclass(frozen=True)
class MCSummary:
    """Per-level statistics, the fitted rate and timing of a sweep.

    ``empirical_sd`` and ``predicted_sd`` refer to the error normalised by
    ``sqrt(eps)``.
    """

    name: str
    estimator: str
    levels: tuple[EpsSummary, ...]
    rate: RateFit | None
    wall_seconds: float
    extra: dict = field(default_factory=dict)

    @property
    def quarantine_rate(self) -> float:
        q = sum(lv.n_quarantined for lv in self.levels)
        n = sum(lv.n_ok + lv.n_quarantined for lv in self.levels)
        return q / max(1, n)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "estimator": self.estimator,
                "levels": [dataclasses.asdict(lv) | {"quarantine_rate": lv.quarantine_rate}
                           for lv in self.levels],
                "rate": None if self.rate is None else dataclasses.asdict(self.rate),
                "quarantine_rate": self.quarantine_rate,
                "wall_seconds": self.wall_seconds, "extra": self.extra}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=_json_default)
        if path is not None:
            Path(path).write_text(text)
        return text


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)


def predicted_sd(cfg: ExperimentConfig, eps: float) -> float:
    """Limit standard deviation of ``error / sqrt(eps)`` where one is available."""
    spec = cfg.system.with_eps(eps)
    try:
        if cfg.estimator == "qv":
            ks, k = parse_kernel_option(cfg.kernel)
            return math.sqrt(var_Z(spec, cfg.tau, kernel_constants(ks, k)))
        if cfg.estimator == "se":
            ks, k = parse_kernel_option(cfg.kernel)
            return se_limit_stddev(spec, spec.theta.true, cfg.tau, kernel_constants(ks, k))
        if cfg.estimator == "onestep":
            return 1.0 / math.sqrt(flt.fisher_information(spec, spec.theta.true, cfg.tau, spec.T))
        if cfg.estimator in ("mle", "bayes"):
            return 1.0 / math.sqrt(flt.fisher_information(spec, spec.theta.true, 0.0, spec.T))
    except QVToolError:
        return math.nan
    return math.nan


def _stat(fn, v):
    return float(fn(v)) if len(v) else math.nan


def summarize(records: Sequence[dict], cfg: ExperimentConfig,
              wall_seconds: float = 0.0) -> MCSummary:
    """Fold sorted records into per-level statistics and a rate fit."""
    levels = []
    for ei, eps in enumerate(cfg.eps_list):
        rs = [r for r in records if r["eps_index"] == ei]
        ok = [r for r in rs if r["status"] == "ok"]
        reasons: dict[str, int] = {}
        for r in rs:
            if r["status"] != "ok":
                reasons[r["reason"]] = reasons.get(r["reason"], 0) + 1
        err = np.array([r["error"] for r in ok], dtype=float)
        aux = np.array([r["aux"] for r in ok], dtype=float)
        aux = aux[np.isfinite(aux)]
        n = len(err)
        sd = float(np.std(err, ddof=1)) if n > 1 else math.nan
        levels.append(EpsSummary(
            eps=eps, n_ok=n, n_quarantined=len(rs) - n, quarantine_reasons=reasons,
            mean_error=_stat(np.mean, err),
            se_mean_error=sd / math.sqrt(n) if n > 1 else math.nan,
            rmse=float(np.sqrt(np.mean(err ** 2))) if n else math.nan,
            mean_abs_error=_stat(lambda v: np.mean(np.abs(v)), err),
            clamp_rate=float(np.mean([r["clamped"] for r in ok])) if n else math.nan,
            empirical_sd=sd / math.sqrt(eps) if n > 1 else math.nan,
            predicted_sd=predicted_sd(cfg, eps),
            mean_aux=_stat(np.mean, aux), mean_abs_aux=_stat(lambda v: np.mean(np.abs(v)), aux),
            median_aux=_stat(np.median, aux)))
    rate = None
    if len(levels) >= 3:
        try:
            rate = rate_regression([lv.eps for lv in levels], [lv.rmse for lv in levels])
        except DegenerateDataError:
            rate = None
    return MCSummary(cfg.name, cfg.estimator, tuple(levels), rate, wall_seconds)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   out_dir: str | Path | None = None):
    """Run, summarise and (optionally) write records and summary files."""
    t = time.perf_counter()
    recs = run_replications(cfg, workers)
    summ = summarize(recs, cfg, time.perf_counter() - t)
    base = Path(out_dir) if out_dir is not None else Path(".")
    base.mkdir(parents=True, exist_ok=True)
    if cfg.records_path or out_dir is not None:
        write_records(recs, base / (cfg.records_path or "records.csv"))
    if cfg.summary_path or out_dir is not None:
        summ.to_json(base / (cfg.summary_path or "summary.json"))
    return recs, summ
