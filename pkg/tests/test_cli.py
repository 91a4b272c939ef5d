import json

import pytest

from prpd.cli import EXIT_FAULT, EXIT_OK, EXIT_USAGE, OUT_ENV, main, wilson_interval

TINY = ["n_envs=4", "horizon=8", "epochs=1", "minibatch_size=16", "max_iterations=2"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--out", str(tmp_path), "--mode", "fixed", "--delta", "70", *TINY)
    assert code == EXIT_OK
    return json.loads(out)


def test_train_fixed(trained, tmp_path):
    assert trained["mode"] == "fixed" and trained["final_delta_mm"] == 70.0
    run_dir = tmp_path / "train"
    assert len(list(run_dir.glob("fixed-*/seed0/policy.ckpt"))) == 1
    assert len(list(run_dir.glob("fixed-*/seed0/metrics.csv"))) == 1


def test_train_prpd_verbose(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    code, out, err = run(capsys, "train", "--mode", "prpd", "--seed", "1", "--verbose", *TINY)
    assert code == EXIT_OK
    assert err.count("iter ") == 2 and "delta  70.0" in err
    assert json.loads(out)["status"] == "incomplete"
    assert list(tmp_path.glob("train/prpd-*/seed1/metrics.csv"))


def test_unknown_override_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "bogus_key=1")
    assert code == EXIT_USAGE and "bogus_key" in err


def test_bad_config_file_line(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("mode: prpd\ndelta_step: 25\n")
    code, _, err = run(capsys, "train", "--config", str(p))
    assert code == EXIT_USAGE and "c.yaml:2" in err


def test_eval_report(trained, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--delta", "70",
                       "--episodes", "3", "--json")
    assert code == EXIT_OK
    rep = json.loads(out)
    assert rep["episodes"] == 3 and 0.0 <= rep["tau"] <= 1.0
    assert rep["ci95"][0] <= rep["tau"] <= rep["ci95"][1]
    code, out, _ = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--delta", "70", "--episodes", "2")
    assert code == EXIT_OK and "95% CI" in out


def test_eval_zero_episodes_and_mismatch(trained, capsys):
    code, _, _ = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--episodes", "0")
    assert code == EXIT_USAGE
    code, _, err = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--episodes", "1", "c3=0.1")
    assert code == EXIT_USAGE and "--force" in err
    code, _, _ = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--episodes", "1", "--delta", "70",
                     "--force", "c3=0.1")
    assert code == EXIT_OK


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint at all, just some bytes to fill the header" * 2)
    code, _, err = run(capsys, "eval", "--checkpoint", str(p))
    assert code == EXIT_FAULT and "magic" in err


def test_replay_verb(trained, tmp_path, capsys):
    rp = tmp_path / "ep.json"
    code, _, _ = run(capsys, "eval", "--checkpoint", trained["checkpoint"], "--delta", "70", "--episodes", "1",
                     "--replay-out", str(rp))
    assert code == EXIT_OK
    code, out, _ = run(capsys, "replay", str(rp))
    assert code == EXIT_OK and json.loads(out)["match"]
    data = json.loads(rp.read_text())
    data["actions"][0][0] += 5.0
    rp.write_text(json.dumps(data))
    code, _, err = run(capsys, "replay", str(rp))
    assert code == EXIT_FAULT and "step 0" in err
    rp.write_text("nope")
    assert run(capsys, "replay", str(rp))[0] == EXIT_USAGE


def test_bench_verb(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--out", str(tmp_path), "--ladder", "70", "50", "--steps", "100",
                       "--repeats", "1")
    assert code == EXIT_OK
    rep = json.loads(out[out.index("{"):])
    assert "monotone" in rep and (tmp_path / "bench" / "timing.csv").is_file()
    assert run(capsys, "bench", "--steps", "10")[0] == EXIT_USAGE


def test_ablate_alpha_grid(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--out", str(tmp_path), "--grid", "alpha", "--seeds", "0", "--",
                       *TINY[:-1], "max_iterations=1")
    assert code == EXIT_OK
    manifest = json.loads((tmp_path / "ablate" / "alpha" / "manifest.json").read_text())
    assert set(manifest["variants"]) == {"opt", "0", "0.5", "1"}


def test_plot_verb(trained, tmp_path, capsys):
    csv_path = str(next((tmp_path / "train").glob("fixed-*/seed0/metrics.csv")))
    code, out, _ = run(capsys, "plot", csv_path, "--out", str(tmp_path / "plots"))
    assert code == EXIT_OK and len(json.loads(out)["written"]) == 3
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run(capsys, "plot", str(empty), "--out", str(tmp_path / "p2"))[0] == EXIT_USAGE
    assert not (tmp_path / "p2").exists()


def test_unknown_verb_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_wilson_interval():
    lo, hi = wilson_interval(95, 100)
    assert lo == pytest.approx(0.8882, abs=1e-4) and hi == pytest.approx(0.9785, abs=1e-4)
    assert wilson_interval(0, 10)[0] == 0.0 and wilson_interval(10, 10)[1] == 1.0
    with pytest.raises(ValueError):
        wilson_interval(0, 0)
