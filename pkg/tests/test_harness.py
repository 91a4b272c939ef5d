import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prpd.env.dr import ConfigError
from prpd.harness import (
    GRIDS,
    ExperimentConfig,
    RunRecord,
    aggregate_runs,
    bench_timing,
    mixed_assignment,
    read_metrics_csv,
    run_baseline_grid,
    run_experiment,
    timing_monotone,
    timing_ratio,
)

from stubs import stub_factory, tiny


# --- config ---------------------------------------------------------------

def test_config_validation():
    for bad in ({"mode": "nope"}, {"seeds": ()}, {"max_iterations": 0}, {"delta_step": 25.0},
                {"constant_alpha": 1.5}, {"gamma": 0.0}, {"fixed_delta": 1.0}, {"c3": -1.0}):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)


def test_config_error_names_keys():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig(delta_step=25.0)
    assert "delta_step" in exc.value.keys


def test_config_hash_ignores_seeds():
    assert ExperimentConfig(seeds=(1,)).config_hash() == ExperimentConfig().config_hash()
    assert ExperimentConfig(c3=0.1).config_hash() != ExperimentConfig().config_hash()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(bogus=1)


def test_mixed_assignment():
    ladder = [70.0, 60.0, 50.0, 40.0, 30.0, 20.0, 10.0]
    out = mixed_assignment(ladder, 16)
    assert len(out) == 16 and out.count(10.0) == 4 and out.count(70.0) == 2


# --- runs -----------------------------------------------------------------

def test_prpd_fast_path_walks_ladder():
    rec = run_experiment(tiny(), 0, env_factory=stub_factory(1.0))
    assert rec.reached and len(rec.rows) == 7
    assert [r["delta_mm"] for r in rec.rows] == [70.0, 60.0, 50.0, 40.0, 30.0, 20.0, 10.0]
    assert [(e["from_mm"], e["to_mm"]) for e in rec.events] == [(70.0 - 10 * k, 60.0 - 10 * k) for k in range(6)]
    assert rec.rows[0]["alpha"] == 0.0 and rec.rows[1]["alpha"] == 0.0  # teacher = student right after transfer


def test_log_reports_rungs():
    lines = []
    run_experiment(tiny(), 0, env_factory=stub_factory(1.0), log=lines.append)
    assert sum(ln.startswith("rung ") for ln in lines) == 6 and "rung 20 -> 10 at iter 5 samples 192" in lines


def test_fixed_tiny_budget_single_resolution():
    rec = run_experiment(tiny(mode="fixed", fixed_delta=70.0, max_iterations=3), 0,
                         env_factory=stub_factory(0.0))
    assert not rec.reached and len(rec.rows) == 3 and not rec.events
    assert {r["delta_mm"] for r in rec.rows} == {70.0}


def test_budgets_stop_runs():
    rec = run_experiment(tiny(mode="fixed", max_samples=64), 0, env_factory=stub_factory(0.0))
    assert rec.total_samples == 64 and len(rec.rows) == 2


def test_rows_monotone_and_bookkeeping():
    rec = run_experiment(tiny(), 1, env_factory=stub_factory(0.97))
    samples = [r["samples_total"] for r in rec.rows]
    clock = [t["wall_clock_s"] for t in rec.timing]
    assert all(b > a for a, b in zip(samples, samples[1:]))
    assert all(b > a for a, b in zip(clock, clock[1:]))
    deltas = [r["delta_mm"] for r in rec.rows]
    assert all(b <= a for a, b in zip(deltas, deltas[1:]))
    per_rung = {}
    prev = 0
    for r in rec.rows:
        per_rung[r["delta_mm"]] = per_rung.get(r["delta_mm"], 0) + r["samples_total"] - prev
        prev = r["samples_total"]
    assert sum(per_rung.values()) == rec.total_samples


def test_alpha_in_unit_interval_and_zero_at_first_rung():
    rec = run_experiment(tiny(), 2, env_factory=stub_factory(0.9))
    for r in rec.rows:
        assert 0.0 <= r["alpha"] <= 1.0
        if r["delta_mm"] == 70.0:
            assert r["alpha"] == 0.0


def test_same_seed_same_digest(tmp_path):
    cfg = tiny(max_iterations=3)
    a = run_experiment(cfg, 5, tmp_path / "a")
    b = run_experiment(cfg, 5, tmp_path / "b")
    assert a.metrics_digest() == b.metrics_digest()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.policy.fingerprint() == b.policy.fingerprint()
    assert run_experiment(cfg, 6).metrics_digest() != a.metrics_digest()


def test_record_files(tmp_path):
    run_experiment(tiny(), 0, tmp_path, env_factory=stub_factory(1.0))
    assert {p.name for p in tmp_path.iterdir()} == {"metrics.csv", "timing.csv", "events.jsonl", "summary.json"}
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(rows) == 7 and rows[0]["iteration"] == 0
    assert (tmp_path / "metrics.csv").read_text().startswith("# schema=")
    events = [json.loads(ln) for ln in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert len(events) == 6 and "timestamp" in events[0]


def test_metrics_csv_missing_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("iteration,tau\n0,0.5\n")
    with pytest.raises(ConfigError, match="delta_mm"):
        read_metrics_csv(p)
    p.write_text("")
    with pytest.raises(ConfigError):
        read_metrics_csv(p)


def test_mixed_mode_scores_finest_envs():
    rec = run_experiment(tiny(mode="mixed", n_envs=8, max_iterations=2), 0, env_factory=stub_factory(1.0))
    assert rec.reached and rec.rows[0]["delta_mm"] == 10.0


def test_constant_alpha_mode():
    rec = run_experiment(tiny(mode="constant-alpha", constant_alpha=0.5), 0, env_factory=stub_factory(1.0))
    assert rec.reached
    assert rec.rows[0]["alpha"] == 0.0 and all(r["alpha"] == 0.5 for r in rec.rows[1:])


# --- grids and aggregation ------------------------------------------------

def test_alpha_grid_manifest(tmp_path):
    res = run_baseline_grid(tiny(), "alpha", tmp_path, seeds=(0, 1, 2, 3, 4), env_factory=stub_factory(1.0))
    assert sorted(res) == ["0", "0.5", "1", "opt"]
    assert sum(len(v) for v in res.values()) == 20
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["variants"]) == {"opt", "0", "0.5", "1"}
    assert (tmp_path / "opt" / "seed3" / "metrics.csv").is_file()


def test_grid_shapes():
    assert len(GRIDS["interval"]) == 4 and len(GRIDS["c3"]) == 5
    assert all(v["c4"] == 1.0 for v in GRIDS["c3"].values())
    for v in GRIDS["interval"].values():
        ExperimentConfig(**v)


def test_grid_isolates_bad_variant():
    res = run_baseline_grid(tiny(), {"ok": {}, "bad": {"delta_step": 25.0}}, seeds=(0,),
                            env_factory=stub_factory(1.0))
    assert len(res["ok"]) == 1 and res["bad"] == []


def fake_record(seed, t, reached=True, samples=100):
    rec = RunRecord("h", seed, "prpd")
    rec.rows = [{"samples_total": samples, "tau": 1.0 if reached else 0.2, "delta_mm": 10.0, "alpha": 0.0}]
    rec.timing = [{"wall_clock_s": t}]
    if reached:
        rec.status, rec.time_to_target, rec.samples_to_target = "reached", t, samples
    return rec


def test_aggregate_basic_cases():
    agg = aggregate_runs([fake_record(0, 10.0), fake_record(1, 20.0)])
    assert agg["time_to_target"]["mean"] == 15.0 and agg["time_to_target"]["median"] == 15.0
    same = aggregate_runs([fake_record(0, 7.0), fake_record(1, 7.0)])
    assert same["time_to_target"]["std"] == 0.0
    cens = aggregate_runs([fake_record(0, 10.0), fake_record(1, 99.0, reached=False)])
    assert cens["censored_seeds"] == [1] and cens["time_to_target"]["n"] == 1
    assert cens["time_with_censoring"]["values"] == [10.0, 99.0]
    with pytest.raises(ValueError):
        aggregate_runs([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 100), st.booleans()), min_size=1, max_size=8), st.randoms())
def test_aggregate_permutation_invariant(items, rnd):
    recs = [fake_record(i, t, ok) for i, (t, ok) in enumerate(items)]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert aggregate_runs(recs) == aggregate_runs(shuffled)


# --- timing ---------------------------------------------------------------

def test_bench_small():
    rows = bench_timing((70.0, 40.0), steps=100, repeats=1)
    assert [r["delta_mm"] for r in rows] == [70.0, 40.0]
    assert all(r["steps"] == 100 for r in rows)
    assert rows[1]["mean_voxel_ops"] > rows[0]["mean_voxel_ops"]
    assert len(bench_timing((50.0,), steps=100, repeats=1)) == 1
    with pytest.raises(ValueError):
        bench_timing((70.0,), steps=10)


def test_timing_helpers():
    rows = [{"delta_mm": 10.0, "median_step_ms": 5.0}, {"delta_mm": 70.0, "median_step_ms": 1.0},
            {"delta_mm": 40.0, "median_step_ms": 2.0}]
    assert timing_monotone(rows) and timing_ratio(rows) == 5.0
    rows[2]["median_step_ms"] = 0.5
    assert not timing_monotone(rows)
    assert timing_monotone(rows[:1])
