"""Command line interface.

Subcommands
-----------
run           simulate a clock run and write the output directory
adev          Allan deviation of a recorded series.csv
fit-rabi      fit a thermal Rabi flop scan (CSV: t_s,p_hat,n_shots)
shift-report  per-site first-order shift summary from reports.jsonl
preset        print the reference four-site configuration as TOML

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort
or failed output verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from clocksim.analysis import (
    BoundsHit,
    FitFailure,
    InsufficientData,
    default_taus,
    first_order_shifts,
    fit_rabi,
    group_shift_samples,
    overlapping_adev,
    single_integrator_instability,
)
from clocksim.atom import lamb_dicke
from clocksim.config import (
    InvariantViolation,
    config_hash,
    dump_toml,
    load_config,
    reference_preset,
    validate_config,
)
from clocksim.logs import (
    MANIFEST_FILE,
    REPORT_FILE,
    SERIES_FILE,
    OutputWriter,
    read_jsonl,
    read_series,
    report_from_record,
    verify_outputs,
)
from clocksim.servo import AllIonsLostTimeout, run_clock
from clocksim.shuttle import ShuttleManager
from clocksim.streams import substream

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ABORT = 2


def _fail(message):
    print(f"error: {message}", file=sys.stderr)
    return EXIT_ERROR


def _load_run_config(args):
    if args.preset:
        config = reference_preset()
    elif args.config:
        config = load_config(args.config)
    else:
        raise InvariantViolation(["provide --config PATH or --preset"])
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.duration is not None:
        changes["duration"] = args.duration
    if changes:
        # Rebuild from the groups so the overrides are actually validated.
        return validate_config(
            config.species,
            config.sites,
            config.servo,
            dataclasses.replace(config.sim, **changes),
        )
    return validate_config(config)


def _default_out_dir(cfg):
    base = os.environ.get("CLOCKSIM_OUT_DIR", ".")
    return os.path.join(base, f"run-{config_hash(cfg)[:12]}")


def cmd_run(args):
    try:
        cfg = _load_run_config(args)
    except InvariantViolation as exc:
        for v in exc.violations:
            print(f"config: {v}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    out_dir = args.out or _default_out_dir(cfg)
    writer = OutputWriter(out_dir, cfg)
    manager = ShuttleManager(
        cfg, substream(cfg.sim.seed, "loader"), event_sink=writer.shuttle_sink
    )
    try:
        result = run_clock(
            cfg,
            manager=manager,
            side_sink=writer.side_sink,
            report_sink=writer.report_sink,
        )
    except AllIonsLostTimeout as exc:
        writer.finalize(aborted=True, error=exc)
        print(f"aborted: {exc}", file=sys.stderr)
        print(f"out_dir: {out_dir}")
        return EXIT_ABORT

    writer.finalize(result)
    if not args.no_verify:
        problems = verify_outputs(out_dir)
        if problems:
            for p in problems:
                print(f"verify: {p}", file=sys.stderr)
            return EXIT_ABORT

    occ = result.occupancy
    print(f"out_dir: {out_dir}")
    print(f"config_hash: {writer.config_hash}")
    print(f"cycles: {result.n_cycles}")
    print(f"reports: {len(result.reports)}")
    print(f"all_sites_fraction: {occ['all_sites_fraction']:.4f}")
    print(f"mean_occupied: {occ['mean_occupied']:.3f}")
    i1, i2 = result.final_integrators
    print(f"final_df_hz: {result.series.df1[-1]:.3f} {result.series.df2[-1]:.3f}")
    print(f"final_integrators: ({i1.i1},{i1.i2}) ({i2.i1},{i2.i2})")
    return EXIT_OK


def _maybe_verify_series_dir(path, no_verify):
    run_dir = os.path.dirname(os.path.abspath(path))
    if no_verify or not os.path.exists(os.path.join(run_dir, MANIFEST_FILE)):
        return None
    return verify_outputs(run_dir)


def cmd_adev(args):
    try:
        series = read_series(args.series)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    problems = _maybe_verify_series_dir(args.series, args.no_verify)
    if problems:
        for p in problems:
            print(f"verify: {p}", file=sys.stderr)
        return EXIT_ABORT

    taus = None
    if args.taus:
        try:
            taus = sorted(float(x) for x in args.taus.split(","))
        except ValueError:
            return _fail(f"cannot parse --taus {args.taus!r}")

    try:
        if args.mode == "single":
            curve = single_integrator_instability(series, taus=taus)
        else:
            df = series.df1 if args.mode == "df1" else series.df2
            y = df / series.reference_frequency
            if taus is None:
                taus = default_taus(len(y), series.sample_period)
            curve = overlapping_adev(y, series.sample_period, taus)
    except InsufficientData as exc:
        return _fail(str(exc))

    if args.json:
        payload = {
            "mode": args.mode,
            "taus": list(curve.taus),
            "sigmas": list(curve.sigmas),
            "sigma_errs": list(curve.sigma_errs),
            "n_pairs": [int(n) for n in curve.n_pairs],
            "dropped_taus": list(curve.dropped_taus),
            "fitted_a": curve.fitted_a,
        }
        print(json.dumps(payload, sort_keys=True))
        return EXIT_OK

    print(f"# mode: {args.mode}")
    print("tau_s sigma sigma_err n_pairs")
    for tau, sigma, err, n in curve:
        print(f"{tau:.6g} {sigma:.6e} {err:.2e} {int(n)}")
    if curve.fitted_a is not None:
        print(f"# fit: sigma(tau) = {curve.fitted_a:.6e} / sqrt(tau)")
    for tau in curve.dropped_taus:
        print(f"# dropped tau {tau:.6g}: series too short")
    return EXIT_OK


def _read_flop_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line[0].isalpha():
                continue
            parts = line.split(",")
            if len(parts) == 2:
                t, p = parts
                n = 100
            else:
                t, p, n = parts[:3]
            rows.append((float(t), float(p), int(float(n))))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def cmd_fit_rabi(args):
    try:
        data = _read_flop_csv(args.data)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if args.eta is not None:
        eta = args.eta
    else:
        try:
            cfg = load_config(args.config) if args.config else reference_preset()
        except (InvariantViolation, OSError, ValueError) as exc:
            return _fail(str(exc))
        eta = lamb_dicke(cfg.species)

    try:
        fit = fit_rabi(data, eta)
    except (FitFailure, BoundsHit) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_ABORT

    payload = {
        "eta": eta,
        "contrast_A": fit.contrast_a,
        "rabi_rad_s": fit.rabi_freq,
        "rabi_hz": fit.rabi_freq / (2.0 * np.pi),
        "nbar": fit.nbar,
        "bias_c": fit.bias_c,
        "errors": {
            "contrast_A": fit.contrast_a_err,
            "rabi_rad_s": fit.rabi_freq_err,
            "nbar": fit.nbar_err,
            "bias_c": fit.bias_c_err,
        },
        "chi2_dof": fit.chi2_dof,
        "n_points": len(data),
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_shift_report(args):
    report_path = os.path.join(args.run, REPORT_FILE)
    try:
        records = read_jsonl(report_path)
    except OSError as exc:
        return _fail(str(exc))
    if not args.no_verify and os.path.exists(os.path.join(args.run, MANIFEST_FILE)):
        problems = verify_outputs(args.run)
        if problems:
            for p in problems:
                print(f"verify: {p}", file=sys.stderr)
            return EXIT_ABORT

    try:
        cfg = load_config(args.config) if args.config else reference_preset()
    except (InvariantViolation, OSError, ValueError) as exc:
        return _fail(str(exc))

    reports = [report_from_record(r) for r in records]
    samples = first_order_shifts(reports, cfg.servo)
    groups = group_shift_samples(samples)

    if args.json:
        payload = [
            {
                "site": g["site"],
                "present": g["present"],
                "n": g["n"],
                "mean_hz": g["mean_hz"],
                "sem_hz": g["sem_hz"],
                "z": None if np.isnan(g["z"]) else g["z"],
            }
            for g in groups
        ]
        print(json.dumps(payload, sort_keys=True))
        return EXIT_OK

    print("site present n mean_hz sem_hz z")
    for g in groups:
        present = "+".join(str(s) for s in g["present"])
        z = "nan" if np.isnan(g["z"]) else f"{g['z']:.2f}"
        print(
            f"{g['site']} {present} {g['n']} "
            f"{g['mean_hz']:+.4f} {g['sem_hz']:.4f} {z}"
        )
    return EXIT_OK


def cmd_preset(args):
    cfg = reference_preset(seed=args.seed if args.seed is not None else 12345)
    text = dump_toml(cfg)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="clocksim",
        description="Deterministic multi-ion optical clock simulator and analysis tools.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a clock run and write outputs")
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--preset", action="store_true", help="use the built-in reference setup")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--duration", type=float, help="override the run duration in seconds")
    p.add_argument("--out", help="output directory (default: $CLOCKSIM_OUT_DIR/run-<hash>)")
    p.add_argument("--no-verify", action="store_true", help="skip post-run hash verification")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("adev", help="Allan deviation of a recorded series")
    p.add_argument("series", help="path to series.csv")
    p.add_argument(
        "--mode",
        choices=("single", "df1", "df2"),
        default="single",
        help="single-integrator statistic (default) or one raw trace",
    )
    p.add_argument("--taus", help="comma-separated averaging times in seconds")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.add_argument("--no-verify", action="store_true", help="skip manifest verification")
    p.set_defaults(func=cmd_adev)

    p = sub.add_parser("fit-rabi", help="fit a thermal Rabi flop scan")
    p.add_argument("data", help="CSV of t_s,p_hat,n_shots rows")
    p.add_argument("--eta", type=float, help="Lamb-Dicke parameter (else from config)")
    p.add_argument("--config", help="TOML configuration supplying the trap parameters")
    p.set_defaults(func=cmd_fit_rabi)

    p = sub.add_parser("shift-report", help="per-site shift summary from a run directory")
    p.add_argument("run", help="run output directory")
    p.add_argument("--config", help="TOML configuration (default: built-in preset)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    p.add_argument("--no-verify", action="store_true", help="skip manifest verification")
    p.set_defaults(func=cmd_shift_report)

    p = sub.add_parser("preset", help="print the reference configuration as TOML")
    p.add_argument("--seed", type=int, help="master seed to embed")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_preset)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
