"""Command-line surface: simulate, clean, train, run, score, backtest.

Every command writes a manifest JSON next to its outputs recording the
resolved configuration, seeds, input and output file digests, and timing,
so a run can be reproduced from the manifest alone.  Errors print one
machine-readable JSON object to stderr and exit with a code that states
the failure class:

    0  success
    2  validation (bad flags, malformed data, contract violations)
    3  I/O (missing or unreadable/unwritable files)
    4  numerical failure (training divergence, unbounded subproblem)
    1  anything unexpected
"""

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import BoostConfig, QrfConfig
from .dataio import (
    COUNTERTRADE_HIGH,
    COUNTERTRADE_LOW,
    FILTER_PAD,
    FLANK_HORIZON,
    GLITCH_COUNT,
    GLITCH_HIGH,
    GLITCH_LOW,
    countertrade_filter,
    glitch_filter,
    load_csv,
    simulate,
    write_csv,
)
from .exceptions import (
    AdaqrError,
    ContractError,
    ConvergenceError,
    DataFormatError,
    DomainError,
    RankError,
    StageError,
    UnboundedError,
)
from .nncorrect import build_training_set, save_checkpoint, train
from .pipeline import (
    PipelineConfig,
    _resolve_split,
    config_from_dict,
    config_to_dict,
    read_forecast_csv,
    run_nabqr,
)
from .scoring import QuantileForecast, median_member, score_forecast
from .taqr.solver import N_INIT_DEFAULT, N_WINDOW_DEFAULT
from .trading import backtest, compute_offset

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_DEFAULT_LEVELS = "0.01,0.025,0.05,0.1,0.25,0.4,0.5,0.6,0.75,0.9,0.95,0.975,0.99"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(path, command, settings, inputs, outputs, seconds):
    manifest = {
        "command": command,
        "settings": settings,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seconds": round(seconds, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=1))


def _parse_levels(text):
    levels = np.array([float(x) for x in text.split(",") if x.strip() != ""])
    if levels.size == 0:
        raise DomainError("no quantile levels given")
    return levels


def _load_config(path, overrides):
    """Pipeline config from an optional JSON file plus flag overrides."""
    d = {}
    if path is not None:
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict):
            raise DataFormatError("config file must hold a JSON object")
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args):
    t0 = time.perf_counter()
    data = simulate(
        seed=args.seed,
        t_hours=args.hours,
        capacity=args.capacity,
        n_members=args.members,
        underdispersion=args.underdispersion,
        bias=args.bias,
        n_glitch_episodes=args.glitch_episodes,
        area=args.area,
    )
    write_csv(data, args.out)
    _write_manifest(
        str(args.out) + ".manifest.json",
        "simulate",
        {
            "seed": args.seed,
            "hours": args.hours,
            "capacity": args.capacity,
            "members": args.members,
            "underdispersion": args.underdispersion,
            "bias": args.bias,
            "glitch_episodes": args.glitch_episodes,
            "area": args.area,
        },
        [],
        [args.out],
        time.perf_counter() - t0,
    )
    print(f"wrote {data.n_hours} hours to {args.out}")
    return EXIT_OK


def cmd_clean(args):
    t0 = time.perf_counter()
    data = load_csv(args.infile)
    n = data.n_hours
    keep = np.ones(n, dtype=bool)
    report = {"hours_total": int(n)}
    if not args.no_countertrade:
        keep_ct = countertrade_filter(
            data,
            high=args.countertrade_high,
            low=args.countertrade_low,
            pad=args.pad,
            flank_horizon=args.flank_horizon,
        )
        keep &= keep_ct
        report["countertrade_flagged"] = int((~keep_ct).sum())
    if not args.no_glitch:
        keep_gl = glitch_filter(
            data.ensembles,
            low=args.glitch_low,
            high=args.glitch_high,
            count=args.glitch_count,
            pad=args.pad,
        )
        keep &= keep_gl
        report["glitch_flagged"] = int((~keep_gl).sum())
    report["flagged_total"] = int((~keep).sum())
    report["valid_before"] = int(data.observations.valid.sum())
    cleaned = data.apply_mask(keep)
    report["valid_after"] = int(cleaned.observations.valid.sum())
    write_csv(cleaned, args.out)
    report_path = args.report or str(args.out) + ".report.json"
    Path(report_path).write_text(json.dumps(report, indent=1))
    _write_manifest(
        str(args.out) + ".manifest.json",
        "clean",
        {
            k: getattr(args, k)
            for k in (
                "countertrade_high",
                "countertrade_low",
                "pad",
                "flank_horizon",
                "glitch_low",
                "glitch_high",
                "glitch_count",
                "no_countertrade",
                "no_glitch",
            )
        },
        [args.infile],
        [args.out, report_path],
        time.perf_counter() - t0,
    )
    print(json.dumps(report))
    return EXIT_OK


def cmd_train(args):
    t0 = time.perf_counter()
    config = _load_config(args.config, {})
    data = load_csv(args.infile)
    if config.apply_filters:
        keep = countertrade_filter(data) & glitch_filter(data.ensembles)
        data = data.apply_mask(keep)
    spec = _resolve_split(config, data.n_hours)
    a = spec.nn_train
    members = data.ensembles.sorted().members
    cfg_train = config.train
    if cfg_train.lagspec.lags != config.lagspec.lags:
        cfg_train = replace(cfg_train, lagspec=config.lagspec)
    windows, targets, _ = build_training_set(
        members[:a],
        data.observations.values[:a],
        data.observations.valid[:a],
        config.lagspec,
        cfg_train,
    )
    params = train((windows, targets), cfg_train)
    save_checkpoint(params, args.checkpoint)
    hist = params.train_history
    _write_manifest(
        str(args.checkpoint) + ".manifest.json",
        "train",
        {"config": config_to_dict(config), "nn_train_hours": int(a)},
        [args.infile] + ([args.config] if args.config else []),
        [args.checkpoint],
        time.perf_counter() - t0,
    )
    print(
        json.dumps(
            {
                "checkpoint": str(args.checkpoint),
                "samples": int(windows.shape[0]),
                "initial_loss": hist[0]["train_loss"],
                "final_loss": hist[-1]["train_loss"],
            }
        )
    )
    return EXIT_OK


def cmd_run(args):
    t0 = time.perf_counter()
    overrides = {}
    if args.levels is not None:
        overrides["eval_levels"] = _parse_levels(args.levels).tolist()
    if args.mode is not None:
        overrides["horizon_mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.taqr_init is not None:
        overrides["taqr_init"] = args.taqr_init
    if args.taqr_capacity is not None:
        overrides["taqr_capacity"] = args.taqr_capacity
    if args.retrain_days is not None:
        overrides["retrain_every_days"] = args.retrain_days
    if args.methods is not None:
        overrides["methods"] = [m.strip() for m in args.methods.split(",")]
    config = _load_config(args.config, overrides)
    if args.no_correction:
        config.correction = False
        config.retrain_every_days = None
    if args.no_repair:
        config.crossing_repair = False
    if args.no_filters:
        config.apply_filters = False
    data = load_csv(args.infile)
    result = run_nabqr(data, config, outdir=args.outdir, resume=args.resume)
    rows = []
    for m, rep in result.reports.items():
        rel = result.relative.get(m, {})
        rows.append(
            f"{m:6s} mae={rep.mae:10.4f} crps={rep.crps:10.4f} "
            f"qs={rep.qs_mean:10.4f}"
            + (f" rs_qs={rel['qs_mean']:.4f}" if rel else "")
        )
    print("\n".join(rows))
    manifest_path = Path(args.outdir) / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["argv"] = list(sys.argv[1:])
    manifest["inputs"] = {str(args.infile): _sha256(args.infile)}
    manifest["seconds"] = round(time.perf_counter() - t0, 3)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return EXIT_OK


def cmd_score(args):
    t0 = time.perf_counter()
    forecast = read_forecast_csv(args.forecast)
    data = load_csv(args.actuals)
    ts_f = forecast.timestamps
    ts_a = data.timestamps
    common, ia, ib = np.intersect1d(ts_a, ts_f, return_indices=True)
    if common.size == 0:
        raise ContractError("forecast and actuals share no timestamps")
    y = data.observations.values[ia]
    valid = data.observations.valid[ia]
    sub = QuantileForecast(
        forecast.levels,
        forecast.values[ib],
        common,
        crossing_repaired=forecast.crossing_repaired,
    )
    if args.levels is not None:
        want = _parse_levels(args.levels)
        cols = [int(np.argmin(np.abs(sub.levels - w))) for w in want]
        if any(abs(sub.levels[c] - w) > 1e-9 for c, w in zip(cols, want)):
            raise ContractError("requested level not present in forecast")
        sub = QuantileForecast(sub.levels[cols], sub.values[:, cols], common)
    report = score_forecast(y, sub, valid=valid)
    payload = report.to_dict()
    payload["n_common_timestamps"] = int(common.size)
    text = json.dumps(payload, indent=1)
    if args.out is not None:
        Path(args.out).write_text(text)
        _write_manifest(
            str(args.out) + ".manifest.json",
            "score",
            {"levels": args.levels},
            [args.forecast, args.actuals],
            [args.out],
            time.perf_counter() - t0,
        )
    print(text)
    return EXIT_OK


def cmd_backtest(args):
    t0 = time.perf_counter()
    forecast = read_forecast_csv(args.forecast)
    raw = load_csv(args.raw)
    prices = raw if args.prices == args.raw else load_csv(args.prices)
    if prices.spot_price is None or prices.imbalance_price is None:
        raise ContractError("prices file needs spot and imbalance columns")
    ts_common = np.intersect1d(
        np.intersect1d(forecast.timestamps, raw.timestamps), prices.timestamps
    )
    if ts_common.size < 2:
        raise ContractError("need at least 2 overlapping hours to backtest")
    fi = np.searchsorted(forecast.timestamps, ts_common)
    ri = np.searchsorted(raw.timestamps, ts_common)
    pi = np.searchsorted(prices.timestamps, ts_common)
    pred_med = forecast.level_column(args.median_level)[fi]
    raw_med = median_member(raw.ensembles.members)[ri]
    actual = raw.observations.values[ri]
    spot = prices.spot_price[pi]
    imb = prices.imbalance_price[pi]

    n = ts_common.size
    n_fit = int(round(n * args.offset_fraction))
    if args.offset_mode == "none":
        offset = 0.0
        trade_lo = 0
    else:
        if n_fit < 1:
            raise ContractError("offset fraction leaves no training hours")
        offset = compute_offset(
            pred_med,
            actual,
            np.arange(n_fit),
            mode=args.offset_mode,
            timestamps=ts_common,
        )
        trade_lo = n_fit
    sl = slice(trade_lo, n)
    ledger = backtest(
        pred_med[sl],
        raw_med[sl],
        offset,
        spot[sl],
        imb[sl],
        size=args.size,
        timestamps=ts_common[sl],
        dead_band=args.dead_band,
    )
    ledger.to_csv(args.out)
    summary = {
        "hours_traded": len(ledger.pnl),
        "hours_skipped": len(ledger.skipped),
        "total_pnl": ledger.total_pnl,
        "offset_mode": args.offset_mode,
        "offset": offset if np.isscalar(offset) else np.asarray(offset).tolist(),
    }
    _write_manifest(
        str(args.out) + ".manifest.json",
        "backtest",
        {
            "size": args.size,
            "offset_mode": args.offset_mode,
            "offset_fraction": args.offset_fraction,
            "median_level": args.median_level,
            "dead_band": args.dead_band,
        },
        [args.forecast, args.raw]
        + ([args.prices] if args.prices != args.raw else []),
        [args.out],
        time.perf_counter() - t0,
    )
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="adaqr",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", formatter_class=fmt,
                       help="generate a synthetic wind-power dataset CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hours", type=int, default=24288)
    p.add_argument("--capacity", type=float, default=1000.0)
    p.add_argument("--members", type=int, default=51)
    p.add_argument("--underdispersion", type=float, default=1.0,
                   help="ensemble spread factor; <1 gives too-narrow members")
    p.add_argument("--bias", type=float, default=0.0,
                   help="additive member bias as a fraction of capacity")
    p.add_argument("--glitch-episodes", type=int, default=0)
    p.add_argument("--area", default="SIM1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("clean", formatter_class=fmt,
                       help="apply curtailment and glitch filters to a dataset")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None,
                   help="mask report path (default: <out>.report.json)")
    p.add_argument("--countertrade-high", type=float, default=COUNTERTRADE_HIGH,
                   help="flanking countertrade volume that marks curtailment")
    p.add_argument("--countertrade-low", type=float, default=COUNTERTRADE_LOW,
                   help="near-zero countertrade level inside a curtailed run")
    p.add_argument("--pad", type=int, default=FILTER_PAD,
                   help="hours of dilation around every flagged run")
    p.add_argument("--flank-horizon", type=int, default=FLANK_HORIZON,
                   help="hours searched on each side for the high flank")
    p.add_argument("--glitch-low", type=float, default=GLITCH_LOW)
    p.add_argument("--glitch-high", type=float, default=GLITCH_HIGH)
    p.add_argument("--glitch-count", type=int, default=GLITCH_COUNT,
                   help="flag hours with strictly more members inside the band")
    p.add_argument("--no-countertrade", action="store_true")
    p.add_argument("--no-glitch", action="store_true")
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train the ensemble corrector, save a checkpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", formatter_class=fmt,
                       help="full pipeline: correct, adapt, score all methods")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--config", default=None, help="pipeline config JSON; "
                   "flags below override file values")
    p.add_argument("--outdir", required=True)
    p.add_argument("--resume", action="store_true",
                   help="reuse checkpoint/corrected artifacts in outdir")
    p.add_argument("--levels", default=None,
                   help=f"comma-separated eval levels (default {_DEFAULT_LEVELS})")
    p.add_argument("--mode", choices=("day_ahead", "rolling"), default=None,
                   help="horizon mode (config default: day_ahead)")
    p.add_argument("--methods", default=None,
                   help="comma-separated subset of raw,qrnn,taqr,qrf,qgb,nabqr")
    p.add_argument("--taqr-init", type=int, default=None,
                   help=f"warm-start sample size (config default {N_INIT_DEFAULT})")
    p.add_argument("--taqr-capacity", type=int, default=None,
                   help=f"sliding window capacity (config default {N_WINDOW_DEFAULT})")
    p.add_argument("--retrain-days", type=int, default=None,
                   help="refit the corrector every N days during the test sweep")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-correction", action="store_true")
    p.add_argument("--no-repair", action="store_true")
    p.add_argument("--no-filters", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("score", formatter_class=fmt,
                       help="score a forecast CSV against observed actuals")
    p.add_argument("--forecast", required=True)
    p.add_argument("--actuals", required=True,
                   help="dataset CSV providing observations on the same grid")
    p.add_argument("--levels", default=None,
                   help="subset of levels to score (default: all in file)")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("backtest", formatter_class=fmt,
                       help="spot-vs-imbalance backtest of a median forecast")
    p.add_argument("--forecast", required=True)
    p.add_argument("--raw", required=True,
                   help="dataset CSV with raw ensembles and actuals")
    p.add_argument("--prices", required=True,
                   help="dataset CSV with spot and imbalance prices "
                        "(may be the same file as --raw)")
    p.add_argument("--size", type=float, default=1.0, help="MW per trade")
    p.add_argument("--median-level", type=float, default=0.5)
    p.add_argument("--offset-mode", choices=("scalar", "per-hour", "none"),
                   default="scalar")
    p.add_argument("--offset-fraction", type=float, default=0.25,
                   help="fraction of overlap used to estimate the offset; "
                        "those hours are not traded")
    p.add_argument("--dead-band", type=float, default=0.0,
                   help="suppress trades with |signal| at or below this")
    p.add_argument("--out", required=True, help="ledger CSV path")
    p.set_defaults(func=cmd_backtest)

    return parser


def _exit_code_for(err):
    if isinstance(err, (ConvergenceError, UnboundedError)):
        return EXIT_NUMERIC
    if isinstance(err, (DataFormatError, DomainError, ContractError, RankError)):
        return EXIT_VALIDATION
    if isinstance(err, OSError):
        return EXIT_IO
    return EXIT_UNEXPECTED


def _emit_error(err, stage=None):
    payload = {
        "error": type(err).__name__,
        "message": str(err),
    }
    if stage is not None:
        payload["stage"] = stage
    details = getattr(err, "details", None)
    if details:
        payload["details"] = details
    code = _exit_code_for(err)
    payload["exit_code"] = code
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        return _emit_error(err.original, stage=err.stage)
    except AdaqrError as err:
        return _emit_error(err)
    except OSError as err:
        return _emit_error(err)
    except Exception as err:  # anything else is a bug, not bad input
        return _emit_error(err)


if __name__ == "__main__":
    sys.exit(main())
