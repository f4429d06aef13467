"""Command line: simulate, replay, metrics, ablate, sweep.

Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .runlog import LogError, RunLog, compute_metrics, save_outputs
from .scenario import MODES, PRESETS, ConfigError, ScenarioConfig, ablate, preset, replay, sweep

EXIT_CONFIG = 2
EXIT_RUN = 3
LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("a2visr")


def _setup_logging() -> None:
    name = os.environ.get("A2VISR_LOG_LEVEL", "warn").lower()
    if name not in LEVELS:
        raise ConfigError(f"A2VISR_LOG_LEVEL must be one of {', '.join(LEVELS)}, got {name!r}")
    logging.basicConfig(level=LEVELS[name], format="%(levelname)s %(name)s: %(message)s")


def load_config(args) -> ScenarioConfig:
    """Preset first, then the JSON file on top of it, then the flags."""
    base = preset(args.preset).to_dict() if args.preset else {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        base.update(data)
    if args.seed is not None:
        base["seed"] = args.seed
    if getattr(args, "mode", None):
        base["mode"] = args.mode
    if getattr(args, "duration", None):
        base["duration"] = args.duration
    return ScenarioConfig.from_dict(base)


def _scenario_args(p: argparse.ArgumentParser, mode=True) -> None:
    p.add_argument("--config", help="JSON scenario config")
    p.add_argument("--preset", choices=PRESETS, help="named scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="override run length (s)")
    p.add_argument("--warmup", type=float, default=2.0, help="ticks before this time (s) are left out of the metrics")
    if mode:
        p.add_argument("--mode", choices=MODES)


def cmd_simulate(args) -> int:
    from .scenario import run_scenario

    cfg = load_config(args)
    run = run_scenario(cfg)
    report = save_outputs(run, args.out, cfg.to_dict(), args.warmup) if args.out else compute_metrics(run, args.warmup)
    print(report)
    return 0


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not args.config and not args.preset and (path.parent / "config.json").exists():
        args.config = str(path.parent / "config.json")
    cfg = load_config(args)
    run = replay(path, cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run.write_csv(out / "ticks.csv")
        report = compute_metrics(run, args.warmup)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    else:
        report = compute_metrics(run, args.warmup)
    print(report)
    return 0


def cmd_metrics(args) -> int:
    report = compute_metrics(RunLog.read_csv(args.ticks), args.warmup)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    mode = args.mode or "fixed"
    base, other = ablate(cfg, mode, args.warmup)
    print(f"adaptive: {base}")
    print(f"{mode}: {other}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps({"adaptive": base.to_dict(), mode: other.to_dict()}, indent=2) + "\n")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    rows = sweep(cfg, args.tw, args.kt, args.warmup)
    for Tw, kt, rep in rows:
        print(f"Tw={Tw} kt={kt}: {rep}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        data = [{"Tw": Tw, "kt": kt, **rep.to_dict()} for Tw, kt, rep in rows]
        (out / "sweep.json").write_text(json.dumps(data, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="a2visr", description="Ground-aerial relative localization simulator and estimator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a closed-loop scenario")
    _scenario_args(p)
    p.add_argument("--out", help="output directory (config.json, raw.csv, ticks.csv, metrics.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="re-run the estimator on a raw CSV log")
    p.add_argument("log", help="raw.csv written by simulate")
    _scenario_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("metrics", help="metrics of a ticks.csv")
    p.add_argument("ticks")
    p.add_argument("--warmup", type=float, default=2.0)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="matched-seed adaptive vs ablated run")
    _scenario_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="grid over window width and polynomial order")
    _scenario_args(p, mode=True)
    p.add_argument("--tw", type=int, nargs="+", default=[4, 8, 12])
    p.add_argument("--kt", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LogError, OSError, RuntimeError, ValueError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
