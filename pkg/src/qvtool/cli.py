"""Command line interface ``qvtool``.

Exit codes: 0 success, 2 configuration error, 3 quarantine rate above 50%.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import filtering as flt
from .errors import ConfigurationError, PreconditionError, QVToolError
from .experiments import ExperimentConfig, read_records, run_experiment, summarize
from .kernels import constants as kernel_constants
from .kernels import parse_kernel_option
from .model import SystemSpec, psi_true
from .param_est import certify, se_limit_stddev, substitution_estimator
from .qv import EstimatorConfig, qv_estimate, weighted_qv_estimate
from .sim import TimeGrid, load_path, simulate

EXIT_OK, EXIT_CONFIG, EXIT_QUARANTINE = 0, 2, 3


def _load_config(path):
    """Experiment config, or a bare system description wrapped as ``(system, None)``."""
    if path is None:
        raise ConfigurationError("--config is required")
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if "system" in d:
        cfg = ExperimentConfig.from_dict(d)
        return cfg.system, cfg
    return SystemSpec.from_dict(d), None


def _out_dir(args) -> Path:
    p = Path(args.out or ".")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    print(path)


def _eps(args, spec, cfg):
    if args.eps is not None:
        return args.eps
    return cfg.eps_list[0] if cfg is not None else spec.eps


def cmd_simulate(args) -> int:
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    spec = spec.with_eps(eps)
    grid = TimeGrid.default(spec.T, eps) if args.steps is None else TimeGrid(spec.T, args.steps)
    pp = simulate(spec, grid, args.seed)
    out = _out_dir(args) / ("path.bin" if args.binary else "path.csv")
    (pp.to_binary if args.binary else pp.to_csv)(out)
    print(out)
    return EXIT_OK


def _estimator_cfg(args, spec, cfg, eps, weight=None):
    tau = args.tau if args.tau is not None else (cfg.tau if cfg else None)
    if tau is None:
        raise ConfigurationError("--tau is required")
    kernel = args.kernel or (cfg.kernel if cfg else "degree=1,vanish=false")
    ks, k = parse_kernel_option(kernel)
    bw = args.bandwidth if args.bandwidth is not None else eps
    return EstimatorConfig(tau, bw, ks, k, weight), kernel


def cmd_qv(args) -> int:
    pp = load_path(args.path)
    spec, cfg = (None, None) if args.config is None else _load_config(args.config)
    eps = args.eps if args.eps is not None else (_eps(args, spec, cfg) if spec else pp.grid.h * 100)
    weight = None
    if args.weight != "none":
        if spec is None:
            raise ConfigurationError("--weight needs --config for the known coefficient")
        known = spec.f if args.weight == "inv_f" else spec.b
        if known.is_parametric:
            raise ConfigurationError(f"--weight {args.weight}: coefficient depends on theta")
        weight = (lambda t, k=known: 1.0 / np.asarray(k(t)))
    ecfg, _ = _estimator_cfg(args, spec, cfg, eps, weight)
    est = weighted_qv_estimate(pp.X, pp.grid, ecfg) if weight else qv_estimate(pp.X, pp.grid, ecfg)
    truth = math.nan
    if spec is not None and args.weight == "none":
        truth = (psi_true(spec, ecfg.tau)
                 if not spec.is_parametric or spec.theta.true is not None else math.nan)
    _write_rows(_out_dir(args) / "qv.csv", ["tau", "psi_hat", "psi_true", "err"],
                [[ecfg.tau, float(est), truth, float(est) - truth]])
    return EXIT_OK


def _theta_check(args, spec, cfg, pp, eps):
    ecfg, kernel = _estimator_cfg(args, spec, cfg, eps)
    space = certify(spec, ecfg.tau)
    psi = qv_estimate(pp.X, pp.grid, ecfg)
    return substitution_estimator(psi, spec, ecfg.tau, space), ecfg, kernel


def cmd_se(args) -> int:
    pp = load_path(args.path)
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    se, ecfg, kernel = _theta_check(args, spec, cfg, pp, eps)
    sd = math.nan
    if spec.theta.true is not None:
        sd = se_limit_stddev(spec, spec.theta.true, ecfg.tau,
                             kernel_constants(*parse_kernel_option(kernel))) * math.sqrt(eps)
    _write_rows(_out_dir(args) / "se.csv", ["theta_check", "clamped", "psi_hat", "predicted_sd"],
                [[se.theta, se.clamped or "", se.psi_hat, sd]])
    return EXIT_OK


def cmd_mle(args) -> int:
    pp = load_path(args.path)
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    r = flt.mle_grid(spec, pp.X, pp.grid, n_grid=args.n_grid, eps=eps)
    rows = [[r.theta, r.loglik, r.at_boundary, "mle"]]
    if args.bayes:
        rows.append([flt.bayes_estimator(spec, pp.X, pp.grid, eps=eps), math.nan, False, "bayes"])
    _write_rows(_out_dir(args) / "mle.csv", ["theta", "loglik", "at_boundary", "method"], rows)
    return EXIT_OK


def cmd_filter(args) -> int:
    pp = load_path(args.path)
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    theta = args.theta if args.theta is not None else spec.resolve_theta() if spec.is_parametric else None
    fp = flt.kalman_bucy(spec, pp.X, pp.grid, theta, eps, sens=spec.is_parametric)
    out = _out_dir(args) / "filter.csv"
    fp.to_csv(out)
    print(out)
    return EXIT_OK


def _onestep(args, spec, cfg, pp, eps):
    if args.theta_check is not None:
        tc = args.theta_check
        tau = args.tau if args.tau is not None else (cfg.tau if cfg else None)
        if tau is None:
            raise ConfigurationError("--tau is required")
    else:
        se, ecfg, _ = _theta_check(args, spec, cfg, pp, eps)
        if se.is_clamped:
            raise PreconditionError(f"preliminary estimate clamped at {se.clamped}")
        tc, tau = se.theta, ecfg.tau
    return flt.one_step_mle_process(spec, pp.X, pp.grid, tc, tau, eps), tc, tau


def cmd_onestep(args) -> int:
    pp = load_path(args.path)
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    r, _, _ = _onestep(args, spec, cfg, pp, eps)
    out = _out_dir(args) / "onestep.csv"
    r.filter.to_csv(out, theta_star=r.theta_star)
    print(out)
    return EXIT_OK


def cmd_adaptive(args) -> int:
    pp = load_path(args.path)
    spec, cfg = _load_config(args.config)
    eps = _eps(args, spec, cfg)
    r, tc, tau = _onestep(args, spec, cfg, pp, eps)
    mode = args.mode or (cfg.adaptive_mode if cfg else "precomputed")
    fp = flt.adaptive_filter(spec, pp.X, pp.grid, r.theta_star, tau, tc, eps, mode=mode)
    out = _out_dir(args) / "adaptive.csv"
    fp.to_csv(out, theta_star=r.theta_star)
    print(out)
    return EXIT_OK


def cmd_mc(args) -> int:
    spec, cfg = _load_config(args.config)
    if cfg is None:
        raise ConfigurationError("mc needs an experiment config")
    if args.seed is not None:
        cfg = ExperimentConfig.from_dict(cfg.to_dict() | {"master_seed": args.seed})
    out = _out_dir(args)
    _, summ = run_experiment(cfg, args.workers, out)
    print(out / (cfg.summary_path or "summary.json"))
    return EXIT_QUARANTINE if summ.quarantine_rate > 0.5 else EXIT_OK


def cmd_plotdata(args) -> int:
    _, cfg = _load_config(args.config)
    if cfg is None:
        raise ConfigurationError("plotdata needs an experiment config")
    recs = read_records(args.records)
    summ = summarize(recs, cfg)
    rows = []
    for lv in summ.levels:
        for key in ("rmse", "mean_error", "mean_abs_error", "empirical_sd", "predicted_sd",
                    "clamp_rate", "quarantine_rate", "mean_aux", "median_aux"):
            rows.append([lv.eps, key, getattr(lv, key)])
    _write_rows(_out_dir(args) / "plotdata.csv", ["eps", "metric", "value"], rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qvtool", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment or system JSON file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory (default: current)")
    common.add_argument("--eps", type=float, default=None, help="override the noise level")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate one path")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--binary", action="store_true")
    s.set_defaults(fn=cmd_simulate)

    est = argparse.ArgumentParser(add_help=False)
    est.add_argument("path", help="observed path (CSV or binary)")
    est.add_argument("--tau", type=float, default=None)
    est.add_argument("--bandwidth", type=float, default=None)
    est.add_argument("--kernel", default=None, help='e.g. "degree=3,vanish=true"')

    s = sub.add_parser("qv", parents=[common, est], help="quadratic-variation estimate")
    s.add_argument("--weight", choices=("none", "inv_f", "inv_b"), default="none")
    s.set_defaults(fn=cmd_qv)
    s = sub.add_parser("se", parents=[common, est], help="substitution estimate")
    s.set_defaults(fn=cmd_se)
    s = sub.add_parser("mle", parents=[common, est], help="grid MLE (and Bayes)")
    s.add_argument("--n-grid", type=int, default=64)
    s.add_argument("--bayes", action="store_true")
    s.set_defaults(fn=cmd_mle)
    s = sub.add_parser("filter", parents=[common, est], help="Kalman-Bucy filter")
    s.add_argument("--theta", type=float, default=None)
    s.set_defaults(fn=cmd_filter)
    for name, fn in (("onestep", cmd_onestep), ("adaptive", cmd_adaptive)):
        s = sub.add_parser(name, parents=[common, est])
        s.add_argument("--theta-check", type=float, default=None,
                       help="preliminary estimate (default: substitution estimator)")
        if name == "adaptive":
            s.add_argument("--mode", choices=("precomputed", "recurrent"), default=None)
        s.set_defaults(fn=fn)
    s = sub.add_parser("mc", parents=[common], help="Monte Carlo sweep")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(fn=cmd_mc)
    s = sub.add_parser("plotdata", parents=[common], help="tidy CSV from records")
    s.add_argument("records", help="records CSV written by mc")
    s.set_defaults(fn=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and args.cmd == "simulate":
        args.seed = 0
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"qvtool: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except QVToolError as exc:
        print(f"qvtool: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
