"""Seeded experiment runs, baseline grids, timing benchmark and aggregation."""
from __future__ import annotations

import csv
import gc
import hashlib
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from prpd.distill import (
    FINISHED,
    AlphaConfig,
    DistillWeights,
    ResolutionSchedule,
    TeacherSnapshot,
    estimate_alpha,
    schedule_resolution,
    total_loss,
    transfer_policy,
)
from prpd.env.dr import DESK_ROWS, ConfigError
from prpd.env.world import ExcavationEnv, Resolution
from prpd.rl import (
    ActorCritic,
    PpoConfig,
    add_advantages,
    collect_rollout,
    evaluate_policy,
    make_optimizer,
    update_iteration,
)

MODES = ("prpd", "fixed", "mixed", "constant-alpha")
METRICS_SCHEMA = "prpd-metrics/1"
METRIC_COLUMNS = (
    "iteration", "delta_mm", "samples_total", "tau", "mean_reward", "alpha",
    "surrogate", "value_loss", "entropy", "distill", "q_loss", "approx_kl", "faults", "eval_tau",
)
TIMING_COLUMNS = ("iteration", "wall_clock_s", "iteration_s")
EVAL_SEED_OFFSET = 1_000_003  # evaluation episodes never share seeds with training


@dataclass
class ExperimentConfig:
    mode: str = "prpd"
    # resolution ladder (prpd, constant-alpha, mixed) or single resolution (fixed)
    delta_start: float = 70.0
    delta_final: float = 10.0
    delta_step: float = 10.0
    fixed_delta: float = 10.0
    target: float = 0.95
    middle_target: float | None = None
    # mixture rate and loss weights
    alpha0: float = 2.0
    alpha_samples: int = 4
    constant_alpha: float = 0.0
    c3: float = 0.5
    c4: float = 1.0
    reverse_kl: bool = False
    # PPO
    gamma: float = 0.99
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gae_lambda: float = 0.95
    horizon: int = 64
    n_envs: int = 16
    epochs: int = 8
    minibatch_size: int = 256
    lr: float = 3e-4
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    # environment
    dr_enabled: bool = True
    dr_rows: tuple[str, ...] | None = DESK_ROWS
    # budgets
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    max_iterations: int = 200
    max_wall_clock_s: float = 1800.0
    max_samples: int | None = None
    # evaluation stream kept apart from the training success rate
    eval_delta: float = 10.0
    eval_episodes: int = 100
    eval_every: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.dr_rows is not None:
            self.dr_rows = tuple(str(r) for r in self.dr_rows)
        self.validate()

    def validate(self) -> None:
        def need(ok, msg, *keys):
            if not ok:
                raise ConfigError(msg, keys)

        need(self.mode in MODES, f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}", "mode")
        need(bool(self.seeds), "seeds must be non-empty", "seeds")
        need(self.max_iterations > 0, "max_iterations must be positive", "max_iterations")
        need(self.max_wall_clock_s > 0, "max_wall_clock_s must be positive", "max_wall_clock_s")
        need(self.max_samples is None or self.max_samples > 0, "max_samples must be positive", "max_samples")
        need(self.eval_episodes >= 1, "eval_episodes must be at least 1", "eval_episodes")
        need(0.0 <= self.constant_alpha <= 1.0, "constant_alpha must be in [0, 1]", "constant_alpha")
        need(self.middle_target is None or 0.0 < self.middle_target <= 1.0,
             "middle_target must be in (0, 1]", "middle_target")
        checks = (
            (self.schedule, ("delta_start", "delta_final", "delta_step", "target")),
            (self.ppo, ("gamma", "clip_eps", "c1", "c2", "gae_lambda", "horizon", "n_envs", "epochs",
                        "minibatch_size", "lr", "hidden", "init_log_std")),
            (lambda: AlphaConfig(self.alpha0, self.alpha_samples), ("alpha0", "alpha_samples")),
            (lambda: DistillWeights(self.c3, self.c4), ("c3", "c4")),
            (lambda: Resolution(self.fixed_delta), ("fixed_delta",)),
            (lambda: Resolution(self.eval_delta), ("eval_delta",)),
        )
        for build, keys in checks:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc), keys) from None

    def schedule(self) -> ResolutionSchedule:
        return ResolutionSchedule(self.delta_start, self.delta_final, self.delta_step, self.target)

    def ppo(self) -> PpoConfig:
        return PpoConfig(self.gamma, self.clip_eps, self.c1, self.c2, self.gae_lambda, self.horizon,
                         self.n_envs, self.epochs, self.minibatch_size, self.lr, self.hidden,
                         self.init_log_std)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["seeds"] = list(self.seeds)
        d["dr_rows"] = None if self.dr_rows is None else list(self.dr_rows)
        return d

    def config_hash(self) -> str:
        """Hash of everything that shapes a run except the seed list."""
        d = self.to_dict()
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        bad = sorted(set(kw) - known)
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(bad)}")
        return replace(self, **kw)


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    mode: str
    rows: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    status: str = "incomplete"          # "reached" or "incomplete"
    samples_to_target: int | None = None
    time_to_target: float | None = None
    faults: int = 0
    episodes: int = 0
    flagged: bool = False
    policy: ActorCritic | None = field(default=None, repr=False)

    @property
    def reached(self) -> bool:
        return self.status == "reached"

    @property
    def total_samples(self) -> int:
        return self.rows[-1]["samples_total"] if self.rows else 0

    @property
    def total_time(self) -> float:
        return self.timing[-1]["wall_clock_s"] if self.timing else 0.0

    def metrics_digest(self) -> str:
        return hashlib.sha256(metrics_csv_text(self.rows).encode()).hexdigest()

    def alpha_by_rung(self) -> dict[float, list[float]]:
        out: dict[float, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["delta_mm"], []).append(r["alpha"])
        return out

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash, "seed": self.seed, "mode": self.mode,
            "status": self.status, "iterations": len(self.rows),
            "samples_total": self.total_samples, "wall_clock_s": round(self.total_time, 3),
            "samples_to_target": self.samples_to_target,
            "time_to_target_s": None if self.time_to_target is None else round(self.time_to_target, 3),
            "final_delta_mm": self.rows[-1]["delta_mm"] if self.rows else None,
            "faults": self.faults, "flagged": self.flagged,
            "metrics_digest": self.metrics_digest(),
        }


EnvFactory = Callable[[float, int, int], object]


def default_env_factory(cfg: ExperimentConfig) -> EnvFactory:
    def make(delta: float, seed: int, index: int):
        return ExcavationEnv(delta, cfg.horizon, cfg.dr_enabled, None, seed=seed, index=index,
                             dr_rows=cfg.dr_rows)
    return make


def mixed_assignment(ladder: Sequence[float], n_envs: int) -> list[float]:
    """Split envs evenly across rungs, remainder to the finest resolution."""
    per, rem = divmod(n_envs, len(ladder))
    out = []
    for d in ladder:
        out += [d] * per
    out += [ladder[-1]] * rem
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 12))
    return "" if v is None else str(v)


def metrics_csv_text(rows: Sequence[dict]) -> str:
    lines = [f"# schema={METRICS_SCHEMA}", ",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def read_metrics_csv(path) -> list[dict]:
    """Load a metrics CSV; raises ConfigError naming any missing column."""
    text = Path(path).read_text().splitlines()
    body = [ln for ln in text if not ln.startswith("#")]
    if not body:
        raise ConfigError(f"{path}: empty metrics file")
    reader = csv.DictReader(body)
    missing = [c for c in ("iteration", "delta_mm", "samples_total", "tau", "alpha")
               if c not in (reader.fieldnames or [])]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    rows = []
    for raw in reader:
        row = {}
        for k, v in raw.items():
            if v == "" or v is None:
                row[k] = None
            else:
                try:
                    row[k] = int(v) if k in ("iteration", "samples_total", "faults") else float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return rows


def write_record(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv_text(record.rows))
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        w.writeheader()
        for t in record.timing:
            w.writerow({k: round(t[k], 6) if isinstance(t[k], float) else t[k] for k in TIMING_COLUMNS})
    with open(out / "events.jsonl", "w") as fh:
        for e in record.events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(record.summary(), indent=2, sort_keys=True) + "\n")
    return out


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None,
                   env_factory: EnvFactory | None = None, log: Callable[[str], None] | None = None) -> RunRecord:
    """Train one seed to the target success rate at the final resolution or budget."""
    cfg.validate()
    make_env = env_factory or default_env_factory(cfg)
    ppo = cfg.ppo()
    sched = cfg.schedule()
    ladder = sched.ladder
    alpha_cfg = AlphaConfig(cfg.alpha0, cfg.alpha_samples)
    weights = DistillWeights(cfg.c3, cfg.c4)
    distilling = cfg.mode in ("prpd", "constant-alpha")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    ac = ActorCritic(cfg.hidden, seed=int(seed), init_log_std=cfg.init_log_std)
    opt = make_optimizer(ac, cfg.lr)
    teacher: TeacherSnapshot | None = None

    if cfg.mode == "fixed":
        delta = float(cfg.fixed_delta)
        env_deltas = [delta] * cfg.n_envs
    elif cfg.mode == "mixed":
        delta = ladder[-1]
        env_deltas = mixed_assignment(ladder, cfg.n_envs)
    else:
        delta = ladder[0]
        env_deltas = [delta] * cfg.n_envs
    envs = [make_env(d, seed, i) for i, d in enumerate(env_deltas)]
    scored = [i for i, d in enumerate(env_deltas) if d == min(env_deltas)]

    record = RunRecord(cfg.config_hash(), int(seed), cfg.mode)
    samples = 0
    t0 = time.perf_counter()
    last = t0
    for it in range(cfg.max_iterations):
        buf = collect_rollout(ac, envs, cfg.horizon, rng)
        add_advantages(buf, ac, cfg.gamma, cfg.gae_lambda)
        obs_flat = buf.obs.reshape(-1, buf.obs.shape[-1])
        if cfg.mode == "prpd":
            alpha = estimate_alpha(obs_flat, ac, teacher, alpha_cfg, rng)
        elif cfg.mode == "constant-alpha":
            alpha = cfg.constant_alpha if teacher is not None else 0.0
        else:
            alpha = 0.0

        if distilling:
            def loss_fn(batch, _a=alpha, _t=teacher):
                return total_loss(batch, ac, _t, _a, weights, cfg.clip_eps, cfg.c1, cfg.c2,
                                  cfg.gamma, cfg.alpha_samples, rng, cfg.reverse_kl)
        else:
            loss_fn = None
        stats = update_iteration(buf, ac, opt, ppo, rng, loss_fn)

        samples += len(buf)
        firsts = buf.stats["first_success"]
        tau = sum(firsts[i] for i in scored) / len(scored)
        record.faults += buf.stats["faults"]
        record.episodes += buf.stats["episodes"]
        eval_tau = None
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            eval_tau = evaluate_at(ac, cfg, cfg.eval_delta, cfg.eval_episodes, seed, make_env)
        now = time.perf_counter()
        row = {
            "iteration": it, "delta_mm": delta, "samples_total": samples, "tau": tau,
            "mean_reward": buf.stats["mean_reward"], "alpha": alpha,
            "surrogate": stats.get("surrogate"), "value_loss": stats.get("value_loss"),
            "entropy": stats.get("entropy"), "distill": stats.get("distill", 0.0),
            "q_loss": stats.get("q_loss", 0.0), "approx_kl": stats.get("approx_kl"),
            "faults": buf.stats["faults"], "eval_tau": eval_tau,
        }
        record.rows.append(row)
        record.timing.append({"iteration": it, "wall_clock_s": now - t0, "iteration_s": now - last})
        last = now
        if log:
            log(f"iter {it:4d} delta {delta:5.1f} tau {tau:.3f} alpha {alpha:.3f} "
                f"samples {samples} t {now - t0:.1f}s")

        if distilling:
            rung_sched = sched
            if cfg.middle_target is not None and delta > sched.final:
                rung_sched = replace(sched, target=cfg.middle_target)
            nxt = schedule_resolution(delta, tau, rung_sched)
            if nxt == FINISHED:
                record.status = "reached"
            elif nxt != delta:
                record.events.append({
                    "event": "rung", "iteration": it, "from_mm": delta, "to_mm": nxt,
                    "samples_total": samples, "wall_clock_s": round(now - t0, 6),
                    "timestamp": time.time(),
                })
                if log:
                    log(f"rung {delta:g} -> {nxt:g} at iter {it} samples {samples}")
                ac, teacher = transfer_policy(ac)
                opt = make_optimizer(ac, cfg.lr)
                delta = nxt
                counters = [e.episode for e in envs]
                envs = [make_env(delta, seed, i) for i in range(cfg.n_envs)]
                for e, c in zip(envs, counters):
                    e.episode = c
        elif tau >= sched.target:
            record.status = "reached"

        if record.reached:
            record.samples_to_target = samples
            record.time_to_target = now - t0
            break
        if now - t0 >= cfg.max_wall_clock_s:
            break
        if cfg.max_samples is not None and samples >= cfg.max_samples:
            break

    record.flagged = record.faults > 0.01 * max(record.episodes, 1)
    record.policy = ac
    if out_dir is not None:
        write_record(record, out_dir)
    return record


def evaluate_at(ac: ActorCritic, cfg: ExperimentConfig, delta: float, episodes: int, seed: int,
                make_env: EnvFactory | None = None, deterministic: bool = True) -> float:
    make_env = make_env or default_env_factory(cfg)
    return evaluate_policy(ac, lambda i: make_env(delta, seed + EVAL_SEED_OFFSET, i), episodes,
                           seed + EVAL_SEED_OFFSET, deterministic)


# --- grids ---------------------------------------------------------------

GRIDS: dict[str, dict[str, dict]] = {
    "alpha": {
        "opt": {"mode": "prpd"},
        "0": {"mode": "constant-alpha", "constant_alpha": 0.0},
        "0.5": {"mode": "constant-alpha", "constant_alpha": 0.5},
        "1": {"mode": "constant-alpha", "constant_alpha": 1.0},
    },
    "interval": {f"{d:g}": {"mode": "prpd", "delta_step": float(d)} for d in (5, 10, 20, 30)},
    "middle-target": {f"{t:g}": {"mode": "prpd", "middle_target": t} for t in (0.5, 0.7, 0.8, 0.95)},
    "c3": {f"{c:g}": {"mode": "prpd", "c3": c, "c4": 1.0} for c in (0, 0.1, 0.5, 1, 5)},
    "c4": {f"{c:g}": {"mode": "prpd", "c3": 0.5, "c4": c} for c in (0, 0.1, 0.5, 1, 5)},
    "baselines": {
        "prpd": {"mode": "prpd"},
        "fixed-10": {"mode": "fixed", "fixed_delta": 10.0},
        "fixed-70": {"mode": "fixed", "fixed_delta": 70.0},
        "mixed": {"mode": "mixed"},
    },
}


def grid_variants(grid) -> dict[str, ExperimentConfig | dict]:
    if isinstance(grid, str):
        if grid not in GRIDS:
            raise ConfigError(f"unknown grid {grid!r}; expected one of {', '.join(GRIDS)}")
        return GRIDS[grid]
    return dict(grid)


def run_baseline_grid(base: ExperimentConfig, grid, out_dir=None, seeds: Sequence[int] | None = None,
                      env_factory: EnvFactory | None = None,
                      log: Callable[[str], None] | None = None) -> dict[str, list[RunRecord]]:
    """One record per (variant, seed); a manifest JSON links variants to their records."""
    variants = grid_variants(grid)
    seeds = tuple(base.seeds if seeds is None else seeds)
    out = Path(out_dir) if out_dir is not None else None
    results: dict[str, list[RunRecord]] = {}
    manifest = {"base_config": base.to_dict(), "grid": grid if isinstance(grid, str) else "custom",
                "variants": {}}
    for name, overrides in variants.items():
        entry = {"overrides": overrides, "runs": [], "errors": []}
        try:
            cfg = base.with_overrides(**overrides)
        except ConfigError as exc:
            entry["errors"].append({"seed": None, "error": str(exc)})
            manifest["variants"][name] = entry
            results[name] = []
            continue
        entry["config_hash"] = cfg.config_hash()
        recs = []
        for seed in seeds:
            run_dir = out / _safe(name) / f"seed{seed}" if out is not None else None
            try:
                rec = run_experiment(cfg, seed, run_dir, env_factory, log)
            except Exception as exc:  # isolate failures per variant and seed
                entry["errors"].append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
                continue
            recs.append(rec)
            entry["runs"].append({"seed": seed, "dir": str(run_dir) if run_dir else None,
                                  **rec.summary()})
        results[name] = recs
        entry["aggregate"] = aggregate_runs(recs) if recs else None
        manifest["variants"][name] = entry
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return results


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# --- aggregation ---------------------------------------------------------

def _stats(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0, "mean": None, "std": None, "median": None, "values": []}
    vals = sorted(float(v) for v in values)
    return {
        "n": len(vals),
        "mean": statistics.fmean(vals),
        "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0,
        "median": statistics.median(vals),
        "values": vals,
    }


def aggregate_runs(records: Sequence[RunRecord]) -> dict:
    """Across-seed summary; runs that missed the target are censored.

    Censored runs are excluded from the time/samples-to-target medians but
    their budget-point values are reported alongside, flagged by seed.
    """
    if not records:
        raise ValueError("need at least one record")
    recs = sorted(records, key=lambda r: r.seed)
    reached = [r for r in recs if r.reached]
    return {
        "n_runs": len(recs),
        "n_reached": len(reached),
        "censored_seeds": [r.seed for r in recs if not r.reached],
        "time_to_target": _stats([r.time_to_target for r in reached]),
        "samples_to_target": _stats([r.samples_to_target for r in reached]),
        "time_with_censoring": _stats([r.time_to_target if r.reached else r.total_time for r in recs]),
        "samples_with_censoring": _stats([r.samples_to_target if r.reached else r.total_samples
                                          for r in recs]),
        "final_tau": _stats([r.rows[-1]["tau"] for r in recs if r.rows]),
        "iterations": _stats([len(r.rows) for r in recs]),
    }


# --- timing benchmark ----------------------------------------------------

DEFAULT_LADDER = (70.0, 60.0, 50.0, 40.0, 30.0, 20.0, 10.0)


def bench_timing(ladder: Sequence[float] = DEFAULT_LADDER, steps: int = 2000, repeats: int = 11,
                 seed: int = 0, horizon: int = 64) -> list[dict]:
    """Median per-step wall time and mean voxel work per resolution.

    Runs nominal (no randomisation) episodes driven by a fixed random action
    stream so every resolution sees the same controls. Repeats visit the
    ladder in alternating order so slow drifts of the machine do not line
    up with the resolution; the garbage collector is paused while timing.
    The reported median is the smallest per-repeat median, which filters
    out repeats disturbed by other load on the machine.
    """
    if steps < 100:
        raise ValueError("use at least 100 steps for a stable median")
    scale = np.array([30.0, 30.0, 30.0, 0.2])
    times: dict[float, list[list[float]]] = {float(d): [] for d in ladder}
    ops: dict[float, list[int]] = {float(d): [] for d in ladder}
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for delta in ladder:  # warm-up, untimed
            env = ExcavationEnv(delta, horizon, False, None, seed=seed, index=0)
            env.reset()
            for a in np.random.default_rng([seed, 99]).uniform(-1.0, 1.0, (50, 4)) * scale:
                if env.step(a).done:
                    env.reset()
        for rep in range(repeats):
            order = list(ladder) if rep % 2 == 0 else list(reversed(ladder))
            actions = np.random.default_rng([seed, rep]).uniform(-1.0, 1.0, (steps, 4)) * scale
            for delta in order:
                env = ExcavationEnv(delta, horizon, False, None, seed=seed, index=rep)
                env.reset()
                tl, ol = [], ops[float(delta)]
                for a in actions:
                    t = time.perf_counter()
                    res = env.step(a)
                    tl.append(time.perf_counter() - t)
                    ol.append(res.voxel_ops)
                    if res.done:
                        env.reset()
                times[float(delta)].append(tl)
    finally:
        if was_enabled:
            gc.enable()
    return [{
        "delta_mm": float(d),
        "median_step_ms": 1e3 * min(statistics.median(t) for t in times[float(d)]),
        "mean_step_ms": 1e3 * statistics.fmean(x for t in times[float(d)] for x in t),
        "mean_voxel_ops": statistics.fmean(ops[float(d)]),
        "steps": len(ops[float(d)]),
    } for d in ladder]


def timing_monotone(rows: Sequence[dict], key: str = "median_step_ms") -> bool:
    """True when time never increases as the resolution gets coarser."""
    ordered = sorted(rows, key=lambda r: r["delta_mm"])
    return all(a[key] >= b[key] for a, b in zip(ordered, ordered[1:]))


def timing_ratio(rows: Sequence[dict], fine: float = 10.0, coarse: float = 70.0,
                 key: str = "median_step_ms") -> float:
    by = {r["delta_mm"]: r[key] for r in rows}
    return by[fine] / by[coarse] if by.get(coarse) else math.inf


def write_timing_csv(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ("delta_mm", "median_step_ms", "mean_step_ms", "mean_voxel_ops", "steps")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (round(r[k], 6) if isinstance(r[k], float) else r[k]) for k in cols})
