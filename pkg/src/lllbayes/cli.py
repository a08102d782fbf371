"""Command-line entry point: ``lllbayes {sweep,track,gradcheck,conjugacy}``.

Exit codes: 0 success, 1 runtime failure (or a failed check), 2 bad
configuration. Failures print a one-line JSON error report on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .diagnostics import (
    improper_solution2_instance,
    run_gradcheck,
    trig_demo,
    variance_demo,
    write_trig_csv,
    write_variance_csv,
)
from .errors import InvalidParameter, LLLError
from .sim import (
    SweepConfig,
    TrackConfig,
    run_sweep,
    run_track,
    write_manifest,
    write_sweep_csv,
    write_track_csv,
)

OUT_ENV = "LLLBAYES_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _seed(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid count {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("value must be at least 1")
    return value


def _methods(text):
    return tuple(m.strip().upper() for m in text.split(",") if m.strip())


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "results")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _load(cls, args, overrides):
    """Config from file (if any) with command-line flags taking precedence."""
    try:
        cfg = cls.from_json(args.config) if args.config else cls()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file is not valid JSON: {err}") from None
    changes = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cfg.replace(**changes) if changes else cfg
    except (InvalidParameter, TypeError) as err:
        raise ConfigError(str(err)) from None


def cmd_sweep(args) -> int:
    cfg = _load(
        SweepConfig,
        args,
        {"seed": args.seed, "methods": args.methods, "n_mc": args.runs,
         "oracle_samples": args.oracle_samples},
    )
    out = _out_dir(args)
    rows = run_sweep(cfg, workers=args.workers)
    write_sweep_csv(rows, out / "sweep.csv")
    write_manifest(cfg, out / "manifest.json", "sweep")
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load(
        TrackConfig,
        args,
        {"seed": args.seed, "methods": args.methods, "n_mc": args.runs, "clip": args.clip},
    )
    out = _out_dir(args)
    records, summary = run_track(cfg, workers=args.workers)
    write_track_csv(records, cfg.methods, out / "track.csv")
    write_manifest(cfg, out / "manifest.json", "track")
    print(f"{'method':<6} {'E_x mean':>12} {'E_x std':>10} {'E_X mean':>12} {'E_X std':>10} "
          f"{'cycle [s]':>12} {'fail':>5}")
    for s in summary.values():
        print(f"{s.method:<6} {s.E_x_mean:12.4f} {s.E_x_std:10.4f} {s.E_X_mean:12.4f} "
              f"{s.E_X_std:10.4f} {s.cycle_mean_s:12.3e} {s.n_fail:5d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed or 0)
    text = json.dumps(report.as_dict(), indent=2)
    print(text)
    if args.out or os.environ.get(OUT_ENV):
        (_out_dir(args) / "gradcheck.json").write_text(text + "\n")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_conjugacy(args) -> int:
    out = _out_dir(args)
    trig = trig_demo()
    write_trig_csv(trig, out / "trig_density.csv")
    var = variance_demo()
    write_variance_csv(var, out / "variance_density.csv")
    small = variance_demo(*improper_solution2_instance())
    summary = {
        "trig": {
            "y": trig.y,
            "posterior_mass": trig.posterior_mass,
            "likelihood_local_maxima": trig.n_likelihood_maxima,
        },
        "variance": {
            "solutions": [
                {
                    "number": s.number,
                    "y_integrable": s.y_integrable,
                    "y_integrable_numeric": num,
                    "posterior_integrable": s.posterior_integrable,
                    "posterior": None if p is None else {"shape": p.shape, "scale": p.scale},
                }
                for s, num, p in zip(var.solutions, var.numeric_y_integrable, var.posteriors)
            ],
            "small_y_proper": [p is not None for p in small.posteriors],
        },
    }
    text = json.dumps(summary, indent=2)
    (out / "conjugacy.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lllbayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", help="JSON file with config fields")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
        p.add_argument("--seed", type=_seed, help="base seed (unsigned 64-bit)")
        if runs:
            p.add_argument("--workers", type=_positive_int, default=1)
            p.add_argument("--methods", type=_methods, help="comma list, e.g. ffk,ull")
            p.add_argument("--runs", type=_positive_int, help="Monte-Carlo runs (n_mc)")

    p = sub.add_parser("sweep", help="prior-accuracy sweep against the importance-sampling oracle")
    common(p)
    p.add_argument("--oracle-samples", type=_positive_int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("track", help="Monte-Carlo single-target tracking")
    common(p)
    p.add_argument("--clip", type=float, help="clip per-run errors at this value")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("gradcheck", help="matrix-gradient and tangency self-checks")
    common(p, runs=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("conjugacy", help="conjugacy demonstrations with density-grid CSVs")
    common(p, runs=False)
    p.set_defaults(func=cmd_conjugacy)
    return parser


def _report(code, err):
    print(json.dumps({"error": type(err).__name__, "message": str(err), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidParameter) as err:
        return _report(EXIT_CONFIG, err)
    except (LLLError, OSError, ArithmeticError) as err:
        return _report(EXIT_RUNTIME, err)


if __name__ == "__main__":
    sys.exit(main())
