"""Command-line entry point: train, eval, bench, ablate, replay, plot.

Exit codes: 0 success, 1 runtime fault, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from prpd.checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, save_checkpoint
from prpd.config import dump_config, load_config
from prpd.env.dr import ConfigError
from prpd.harness import (
    DEFAULT_LADDER,
    GRIDS,
    MODES,
    ExperimentConfig,
    evaluate_at,
    run_baseline_grid,
    run_experiment,
    bench_timing,
    timing_monotone,
    timing_ratio,
    write_timing_csv,
)
from prpd.plot import plot_runs
from prpd.replay import ReplayDivergenceError, load_trace, record_episode, replay, save_trace
from prpd.rl import ACTION_SCALE, OBS_SCALE

OUT_ENV = "PRPD_OUT"
EXIT_OK, EXIT_FAULT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == n else min(1.0, centre + half)
    return lo, hi


def _config(args, **extra) -> ExperimentConfig:
    return load_config(getattr(args, "config", None), getattr(args, "overrides", None), **extra)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    extra = {"mode": args.mode}
    if args.delta is not None:
        extra["fixed_delta"] = args.delta
        extra["mode"] = args.mode or "fixed"
    cfg = _config(args, **extra)
    run_dir = out_root(args.out) / "train" / f"{cfg.mode}-{cfg.config_hash()}" / f"seed{args.seed}"
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    rec = run_experiment(cfg, args.seed, run_dir, log=log)
    for e in rec.events:
        print(f"rung {e['from_mm']:g} -> {e['to_mm']:g} at iteration {e['iteration']}", file=sys.stderr)
    (run_dir / "config.yaml").write_text(dump_config(cfg))
    ckpt = save_checkpoint(run_dir / "policy.ckpt", rec.policy, cfg.config_hash(),
                           {"config": cfg.to_dict(), "seed": args.seed, "status": rec.status})
    _emit({**rec.summary(), "run_dir": str(run_dir), "checkpoint": str(ckpt)})
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    expected = None
    if args.config is not None or args.overrides:
        expected = _config(args).config_hash()
    ac, header = load_checkpoint(args.checkpoint, expected, force=args.force)
    if expected is not None:
        cfg = _config(args)
    else:
        stored = header.get("meta", {}).get("config")
        cfg = ExperimentConfig(**_from_dict(stored)) if stored else ExperimentConfig()
    delta = args.delta if args.delta is not None else cfg.eval_delta
    tau = evaluate_at(ac, cfg, delta, args.episodes, args.seed, deterministic=not args.stochastic)
    wins = round(tau * args.episodes)
    lo, hi = wilson_interval(wins, args.episodes)
    report = {"delta_mm": delta, "episodes": args.episodes, "stochastic": args.stochastic, "successes": wins, "tau": tau,
              "ci95": [lo, hi], "checkpoint": str(args.checkpoint), "config_hash": header["config_hash"]}
    if args.replay_out:
        trace = record_episode(lambda o: ac.mean_action(o * OBS_SCALE) * ACTION_SCALE, delta,
                               args.seed, horizon=cfg.horizon, dr_enabled=cfg.dr_enabled,
                               dr_rows=cfg.dr_rows, config_hash=header["config_hash"])
        report["replay"] = str(save_trace(trace, args.replay_out))
    if args.json:
        _emit(report)
    else:
        print(f"tau at {delta:g} mm: {tau:.3f} ({wins}/{args.episodes}), 95% CI [{lo:.3f}, {hi:.3f}]")
    return EXIT_OK


def _from_dict(d: dict) -> dict:
    d = dict(d)
    for k in ("hidden", "seeds", "dr_rows"):
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return d


def cmd_bench(args) -> int:
    ladder = tuple(args.ladder) if args.ladder else DEFAULT_LADDER
    if args.steps < 100:
        raise UsageError("--steps must be at least 100")
    rows = bench_timing(ladder, args.steps, args.repeats, args.seed)
    path = out_root(args.out) / "bench" / "timing.csv"
    write_timing_csv(rows, path)
    for r in rows:
        print(f"delta {r['delta_mm']:5.1f} mm  median {r['median_step_ms']:.4f} ms  "
              f"voxel_ops {r['mean_voxel_ops']:.1f}")
    report = {"csv": str(path), "monotone": timing_monotone(rows)}
    if 10.0 in ladder and 70.0 in ladder:
        report["ratio_10_70"] = timing_ratio(rows)
    _emit(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = tuple(args.seeds) if args.seeds else cfg.seeds
    out = out_root(args.out) / "ablate" / args.grid
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    results = run_baseline_grid(cfg, args.grid, out, seeds, log=log)
    _emit({"manifest": str(out / "manifest.json"),
           "variants": {k: len(v) for k, v in results.items()}})
    failed = any(len(v) < len(seeds) for v in results.values())
    return EXIT_FAULT if failed else EXIT_OK


def cmd_replay(args) -> int:
    try:
        trace = load_trace(args.file)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    got = replay(trace)
    _emit({"file": str(args.file), "steps": len(got.actions), "digest": got.digest, "match": True})
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else out_root(None) / "plots"
    written = plot_runs(args.csv, out, axis=args.axis)
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prpd", description="Progressive-resolution policy distillation")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, overrides=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        if overrides:
            sp.add_argument("overrides", nargs="*", metavar="key=value")

    t = sub.add_parser("train", help="train one seed")
    common(t)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--delta", type=float, help="resolution for fixed mode")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--delta", type=float)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--force", action="store_true", help="load despite a config hash mismatch")
    e.add_argument("--stochastic", action="store_true", help="sample actions instead of the policy mean")
    e.add_argument("--json", action="store_true")
    e.add_argument("--replay-out", help="also record one episode to this replay file")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-step cost across resolutions")
    b.add_argument("--out")
    b.add_argument("--ladder", type=float, nargs="+")
    b.add_argument("--steps", type=int, default=2000)
    b.add_argument("--repeats", type=int, default=11)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="run a baseline or ablation grid")
    common(a)
    a.add_argument("--grid", choices=sorted(GRIDS), required=True)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("replay", help="re-run a recorded episode and compare digests")
    r.add_argument("file")
    r.set_defaults(func=cmd_replay)

    pl = sub.add_parser("plot", help="SVG plots from metrics CSVs")
    pl.add_argument("csv", nargs="+")
    pl.add_argument("--out")
    pl.add_argument("--axis", choices=("wall_clock_s", "samples_total"), default="wall_clock_s")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReplayDivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (CheckpointError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
