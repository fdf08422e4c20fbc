"""Command-line entry point: ``python -m lyapresponse <command> --config run.ini``."""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .dynamics import LinearSystem, TrajectoryDivergence
from .experiments import (LyapunovSettings, PerturbationSpec, autocorrelation, central_difference_slope,
                          default_linear_range, linear_fit_compare, response_sweep)
from .io import (ConfigError, RunManifest, load_config, read_csv, write_c1, write_c2, write_csv,
                 write_curve, write_plot_data)
from .lorenz96 import CalibrationRejected, CalibrationResult, L96Params, Lorenz96, calibrate
from .lyapunov import largest_lyapunov
from .response import (NoPlateau, ResponseGridConfig, accumulate_correlations, curve_from_grid,
                       finalize, select_response_time)

log = logging.getLogger("lyapresponse")

EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_DIVERGED = 4
EXIT_PARTIAL = 5
EXIT_MISSING_INPUT = 6


def linear_test_system(n):
    """Damped cyclic rotation ``f(x) = (S - 0.1 I) x`` with ``S`` skew-symmetric."""
    shift = np.roll(np.eye(n), 1, axis=1)
    return LinearSystem(shift - shift.T - 0.1 * np.eye(n))


def get_calibration(cfg) -> CalibrationResult:
    if cfg.alpha is not None:
        return CalibrationResult(forcing=cfg.forcing, n_vars=cfg.n_vars, alpha=cfg.alpha, beta=cfg.beta,
                                 residual_mean=math.nan, residual_var=math.nan, averaging_window=0.0,
                                 seed=cfg.seed, extra={"source": "config"})
    return calibrate(cfg.forcing, cfg.n_vars, spinup=cfg.spinup, window=cfg.calibration_window,
                     seed=cfg.seed, dt=cfg.dt)


def _calib_dict(cal):
    return {"key": f"F={cal.forcing:g},N={cal.n_vars}", "forcing": cal.forcing, "n_vars": cal.n_vars,
            "alpha": cal.alpha, "beta": cal.beta, "residual_mean": cal.residual_mean,
            "residual_var": cal.residual_var, "averaging_window": cal.averaging_window,
            "seed": cal.seed, **cal.extra}


def build_system(cfg):
    if cfg.system == "linear":
        return linear_test_system(cfg.n_vars), None
    cal = get_calibration(cfg)
    return Lorenz96(cal.params()), cal


def _settings(cfg):
    return LyapunovSettings(dt=cfg.dt, spinup=cfg.spinup, window=cfg.lyapunov_window,
                            renorm_every=cfg.renorm_every, seed=cfg.seed, block_length=cfg.block_length)


def cmd_calibrate(cfg, args):
    out = Path(cfg.out)
    man = RunManifest("calibrate", cfg.snapshot())
    cal = get_calibration(cfg)
    path = write_csv(out / "calibration.csv",
                     ["F", "N", "alpha", "beta", "residual_mean", "residual_var", "averaging_window", "seed"],
                     [[cal.forcing, cal.n_vars, cal.alpha, cal.beta, cal.residual_mean, cal.residual_var,
                       cal.averaging_window, cal.seed]])
    man.calibration = _calib_dict(cal)
    man.add_output(path)
    return man


def cmd_lyapunov(cfg, args):
    out = Path(cfg.out)
    man = RunManifest("lyapunov", cfg.snapshot())
    system, cal = build_system(cfg)
    s = _settings(cfg)
    est = largest_lyapunov(system, dt=s.dt, spinup=s.spinup, window=s.window,
                           renorm_every=s.renorm_every, seed=s.seed, block_length=s.block_length)
    p1 = write_csv(out / "lyapunov.csv", ["F", "N", "lambda", "stderr", "window", "seed"],
                   [[cfg.forcing, cfg.n_vars, est.exponent, est.stderr, est.window, cfg.seed]])
    p2 = write_csv(out / "lyapunov_trace.csv", ["time", "running_lambda"], est.trace)
    man.calibration = _calib_dict(cal) if cal else None
    man.add_output(p1)
    man.add_output(p2)
    log.info("lambda = %.6f +- %.6f", est.exponent, est.stderr)
    return man


def cmd_response(cfg, args):
    out = Path(cfg.out)
    man = RunManifest("response", cfg.snapshot())
    system, cal = build_system(cfg)
    rcfg = ResponseGridConfig(h=cfg.h, M=cfg.M, K_target=cfg.K, endpoint=cfg.endpoint)
    workers = min(cfg.shards, os.cpu_count() or 1)
    grid, seeds = accumulate_correlations(system, rcfg, cfg.K, seed=cfg.seed, shards=cfg.shards,
                                          dt=cfg.dt, spinup=cfg.spinup, workers=workers)
    avg = finalize(grid)
    curve = curve_from_grid(avg, cfg.h)
    paths = [write_c1(out / "c1.csv", avg, cfg.h), write_c2(out / "c2.csv", avg, cfg.h),
             write_curve(out / "response.csv", curve),
             write_plot_data(out / "response_plot.dat", curve.times, curve.r_scalar)]

    rows = []
    try:
        auto = select_response_time(curve, "auto", plateau_tol=cfg.plateau_tol)
        rows.append(["auto", "ok", auto.t0, auto.window[0], auto.window[1], auto.value])
    except NoPlateau:
        auto = None
        rows.append(["auto", "no_plateau", "", "", "", ""])
    if cfg.t0 is not None:
        man_sel = select_response_time(curve, "manual", t0=cfg.t0)
        rows.append(["manual", "ok", man_sel.t0, man_sel.t0, man_sel.t0, man_sel.value])
    paths.append(write_csv(out / "plateau.csv", ["method", "status", "t0", "window_start", "window_end", "r_t0"],
                           rows))
    man.calibration = _calib_dict(cal) if cal else None
    man.shard_seeds = seeds
    for p in paths:
        man.add_output(p)
    return man


def _predicted_slope(cfg):
    if cfg.predicted_slope is not None:
        return cfg.predicted_slope
    path = Path(cfg.out) / "plateau.csv"
    if not path.exists():
        return None
    _, rows = read_csv(path)
    chosen = {r[0]: r for r in rows if r[1] == "ok"}
    row = chosen.get("manual") or chosen.get("auto")
    return float(row[5]) if row else None


def cmd_sweep(cfg, args):
    out = Path(cfg.out)
    man = RunManifest("sweep", cfg.snapshot())
    cal = get_calibration(cfg)
    spec = PerturbationSpec(params=cal.params(), magnitudes=tuple(cfg.magnitudes), node_index=cfg.node)
    workers = min(cfg.shards, os.cpu_count() or 1)
    slope = _predicted_slope(cfg)
    sweep = response_sweep(spec, _settings(cfg), workers=workers, predicted_slope=slope)
    rows = []
    for r in sweep.rows:
        pred = "" if slope is None else slope * r.p
        rows.append([r.p, r.exponent, r.stderr, pred, "ok" if r.ok else r.error])
    paths = [write_csv(out / "sweep.csv", ["p", "lambda_p", "stderr", "predicted_delta", "status"], rows)]

    lin = cfg.linear_range if cfg.linear_range is not None else default_linear_range(cfg.forcing)
    fit_rows = []
    try:
        fit = linear_fit_compare(sweep, slope, max_abs_p=lin)
        fit_rows += [["fitted_slope", fit.slope], ["fitted_slope_stderr", fit.slope_stderr],
                     ["intercept", fit.intercept], ["linear_range", lin]]
        if slope is not None:
            fit_rows += [["predicted_slope", slope], ["relative_error", fit.relative_error]]
    except ValueError as exc:
        fit_rows.append(["fit_error", str(exc)])
    by_p = {r.p: r for r in sweep.ok_rows()}
    for p in sorted({abs(p) for p in by_p if p > 0}):
        if -p in by_p:
            fit_rows.append([f"central_difference_{p:g}",
                             central_difference_slope(by_p[p].exponent, by_p[-p].exponent, p)])
    fit_rows.append(["unperturbed_lambda", sweep.unperturbed])
    paths.append(write_csv(out / "fit.csv", ["quantity", "value"], fit_rows))
    man.calibration = _calib_dict(cal)
    for p in paths:
        man.add_output(p)
    failed = sweep.failed_rows()
    if failed and not args.allow_partial:
        man.extra["failed_rows"] = [f"p={r.p}: {r.error}" for r in failed]
        man.extra["exit_code"] = EXIT_PARTIAL
    return man


def cmd_autocorr(cfg, args):
    out = Path(cfg.out)
    man = RunManifest("autocorr", cfg.snapshot())
    cal = get_calibration(cfg)
    lags, acf = autocorrelation(cal.params(), cfg.lag_max, cfg.acf_window, seed=cfg.seed, h=cfg.h,
                                dt=cfg.dt, spinup=cfg.spinup)
    path = write_csv(out / "acf.csv", ["tau", "acf"], zip(lags, acf))
    man.calibration = _calib_dict(cal)
    man.add_output(path)
    return man


def cmd_report(cfg, args):
    """Merge sweep and plateau outputs into the measured-vs-predicted table."""
    out = Path(cfg.out)
    man = RunManifest("report", cfg.snapshot())
    sweep_path = out / "sweep.csv"
    if not sweep_path.exists():
        raise FileNotFoundError(f"{sweep_path} not found; run the sweep command first")
    _, rows = read_csv(sweep_path)
    slope = _predicted_slope(cfg)
    lam0 = next(float(r[1]) for r in rows if float(r[0]) == 0.0)
    table = []
    for p, lam, err, _, status in rows:
        if status != "ok":
            continue
        p = float(p)
        table.append([p, float(lam) - lam0, float(err), "" if slope is None else slope * p])
    path = write_csv(out / "report.csv", ["p", "measured_delta", "stderr", "predicted_delta"], table)
    man.add_output(path)
    return man


COMMANDS = {
    "calibrate": cmd_calibrate,
    "lyapunov": cmd_lyapunov,
    "response": cmd_response,
    "sweep": cmd_sweep,
    "autocorr": cmd_autocorr,
    "report": cmd_report,
}


def make_parser():
    ap = argparse.ArgumentParser(prog="lyapresponse", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="INI-style run configuration")
    ap.add_argument("--seed", type=int, help="overrides run.seed")
    ap.add_argument("--shards", type=int, help="overrides run.shards")
    ap.add_argument("--out", help="output directory; overrides run.out")
    ap.add_argument("--profile", choices=["paper", "desk"], default="desk")
    ap.add_argument("--allow-partial", action="store_true",
                    help="exit 0 even if some sweep rows diverged")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, profile=args.profile,
                          overrides={"seed": args.seed, "shards": args.shards, "out": args.out})
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        man = COMMANDS[args.command](cfg, args)
    except CalibrationRejected as exc:
        print(f"calibration rejected: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except TrajectoryDivergence as exc:
        print(f"trajectory diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING_INPUT
    man.wall_clock_seconds = time.perf_counter() - start
    man.write(cfg.out)
    code = man.extra.get("exit_code", 0)
    if code:
        print("sweep rows diverged: " + "; ".join(man.extra["failed_rows"]), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
