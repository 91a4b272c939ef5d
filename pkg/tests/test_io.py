import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from prpd.checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, read_header, save_checkpoint
from prpd.config import coerce, dump_config, load_config, parse_overrides
from prpd.env.dr import ConfigError
from prpd.harness import ExperimentConfig, run_experiment
from prpd.plot import ablation_svg, learning_curve_svg, load_run, plot_runs
from prpd.replay import ReplayDivergenceError, load_trace, record_episode, replay, save_trace, write_digests
from prpd.rl import ActorCritic

from stubs import stub_factory, tiny

SVG = "{http://www.w3.org/2000/svg}"


# --- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    ac = ActorCritic(seed=3, init_log_std=-0.5)
    path = save_checkpoint(tmp_path / "p.ckpt", ac, "abc", {"seed": 3})
    back, header = load_checkpoint(path, "abc")
    assert back.fingerprint() == ac.fingerprint()
    assert header["meta"] == {"seed": 3} and read_header(path)["config_hash"] == "abc"
    obs = np.random.default_rng(0).normal(size=(4, 8))
    assert np.array_equal(back.mean_action(obs), ac.mean_action(obs))


def test_checkpoint_hash_mismatch(tmp_path):
    path = save_checkpoint(tmp_path / "p.ckpt", ActorCritic(), "abc")
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, "xyz")
    load_checkpoint(path, "xyz", force=True)


def test_checkpoint_corruption_detected(tmp_path):
    path = save_checkpoint(tmp_path / "p.ckpt", ActorCritic(), "abc")
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


# --- config files ---------------------------------------------------------

def test_load_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("mode: fixed\nfixed_delta: 30\nlr: 1e-3\nhidden: [32, 32]\n")
    cfg = load_config(p, ["c3=0.1", "seeds=[1, 2]"])
    assert cfg.mode == "fixed" and cfg.fixed_delta == 30.0 and cfg.lr == 1e-3
    assert cfg.hidden == (32, 32) and cfg.seeds == (1, 2) and cfg.c3 == 0.1
    assert load_config(None, None) == ExperimentConfig()


def test_config_errors_name_line_and_key(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("mode: prpd\nbogus: 1\n")
    with pytest.raises(ConfigError, match=r"c.yaml:2: unknown config key 'bogus'"):
        load_config(p)
    p.write_text("mode: prpd\nlr: 0.1\ndelta_step: 25\n")
    with pytest.raises(ConfigError, match=r"c.yaml:3: .*multiple of the step"):
        load_config(p)
    p.write_text("lr: 1\nlr: 2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        load_config(p)
    p.write_text("epochs: [\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_coerce_types():
    assert coerce("lr", "3e-4") == 3e-4 and coerce("epochs", 4) == 4
    assert coerce("max_samples", None) is None
    for key, bad in (("epochs", 1.5), ("dr_enabled", "yes"), ("lr", "fast"), ("hidden", ["a"]), ("mode", 3)):
        with pytest.raises(ConfigError):
            coerce(key, bad)
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])
    with pytest.raises(ConfigError, match="unknown config key 'nope'"):
        parse_overrides(["nope=1"])


def test_dump_config_round_trip(tmp_path):
    cfg = ExperimentConfig(mode="mixed", c3=0.1, dr_rows=("friction",))
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p).config_hash() == cfg.config_hash()


# --- replay ---------------------------------------------------------------

def policy(obs):
    return np.array([10.0, 0.0, 5.0 * np.sin(obs[6] / 50.0), 0.05])


def test_replay_round_trip(tmp_path):
    trace = record_episode(policy, 40.0, seed=3, episode=2, horizon=20)
    path = save_trace(trace, tmp_path / "ep.json")
    got = replay(load_trace(path))
    assert got.digest == trace.digest and len(got.actions) == len(trace.actions)
    digests = write_digests([trace], tmp_path / "d.jsonl")
    rec = json.loads(digests.read_text())
    assert rec["digest"] == trace.digest and rec["steps"] == len(trace.actions)


def test_replay_detects_divergence(tmp_path):
    trace = record_episode(policy, 40.0, seed=3, horizon=20)
    trace.actions[5][0] += 1.0
    with pytest.raises(ReplayDivergenceError) as exc:
        replay(trace)
    assert exc.value.step == 5


def test_replay_bad_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    with pytest.raises(ValueError):
        load_trace(p)


# --- plots ----------------------------------------------------------------

def make_runs(tmp_path, seeds=(0, 1, 2)):
    paths = []
    for s in seeds:
        d = tmp_path / "prpd" / f"seed{s}"
        run_experiment(tiny(), s, d, env_factory=stub_factory(0.97))
        paths.append(d / "metrics.csv")
    return paths


def polylines(svg):
    root = ET.fromstring(svg)
    return [el.get("points").split() for el in root.iter(SVG + "polyline")]


def test_single_run_one_curve_with_markers(tmp_path):
    path = make_runs(tmp_path, (0,))[0]
    run = load_run(path)
    svg = learning_curve_svg([run])
    lines = polylines(svg)
    assert len(lines) == 1 and len(lines[0]) == len(run.rows)  # no dropped rows
    markers = [el for el in ET.fromstring(svg).iter(SVG + "line") if el.get("stroke-dasharray")]
    assert len(markers) == len(run.rungs) == 6


def test_group_mean_and_band(tmp_path):
    runs = [load_run(p) for p in make_runs(tmp_path)]
    svg = learning_curve_svg(runs, axis="samples_total")
    root = ET.fromstring(svg)
    assert len(list(root.iter(SVG + "polygon"))) == 1 and len(polylines(svg)) == 1
    assert "prpd (n=3)" in svg


def test_plot_runs_writes_three_files(tmp_path):
    written = plot_runs(make_runs(tmp_path), tmp_path / "plots")
    assert sorted(p.name for p in written) == ["ablation.svg", "alpha_trace.svg", "learning_curve.svg"]
    for p in written:
        ET.fromstring(p.read_text())


def test_empty_inputs_rejected(tmp_path):
    p = tmp_path / "metrics.csv"
    p.write_text("# schema=prpd-metrics/1\niteration,delta_mm,samples_total,tau,alpha\n")
    with pytest.raises(ConfigError):
        plot_runs([p], tmp_path / "out")
    assert not (tmp_path / "out" / "learning_curve.svg").exists()
    with pytest.raises(ConfigError):
        ablation_svg({})
