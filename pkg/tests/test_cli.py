import json
import subprocess
import sys

import numpy as np
import pytest
from click.testing import CliRunner

from ambisep import audio
from ambisep.cli import cli


def _invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args], catch_exceptions=False)


def _main(*args, env=None):
    return subprocess.run([sys.executable, "-m", "ambisep.cli", *map(str, args)], capture_output=True, text=True,
                          env=env)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    res = _invoke("simulate", "--config", "toy", "--rooms", 2, "--rirs-per-room", 4, "--mixtures", 4,
                  "--valid-mixtures", 2, "--seconds", 0.5, "--seed", 1, "--out", out)
    assert res.exit_code == 0, res.output
    return out


def test_simulate_counts_and_format(sim_dir):
    records = [json.loads(l) for l in (sim_dir / "rirs.jsonl").read_text().splitlines()]
    assert len(records) == 8
    data, fs = audio.read_wav(sim_dir / records[0]["path"])
    assert data.shape[0] == 4 and fs == 8000
    mix = [json.loads(l) for l in (sim_dir / "mixtures.jsonl").read_text().splitlines()]
    assert len(mix) == 4
    assert {"mixture_path", "target_paths", "room_id", "seed"} <= set(mix[0])
    assert json.loads((sim_dir / "config.json").read_text())["seed"] == 1


def test_simulate_is_deterministic(sim_dir, tmp_path):
    res = _invoke("simulate", "--config", "toy", "--rooms", 2, "--rirs-per-room", 4, "--mixtures", 4,
                  "--valid-mixtures", 2, "--seconds", 0.5, "--seed", 1, "--out", tmp_path)
    assert res.exit_code == 0
    for name in ("rirs.jsonl", "mixtures.jsonl", "rirs/room001/rir003.wav", "mixtures/00002/mixture.wav"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def test_simulate_room_count_arithmetic(tmp_path):
    res = _invoke("simulate", "--rooms", 3, "--rirs-per-room", 46, "--t60-range", 0.2, 0.2, "--sample-rate", 8000,
                  "--out", tmp_path)
    assert res.exit_code == 0
    assert len(list((tmp_path / "rirs").rglob("*.wav"))) == 138


@pytest.mark.parametrize("args", [("--t60-range", 0.5, 0.2), ("--rooms", 0), ("--t60-range", -1, 0.2)])
def test_simulate_invalid_ranges_are_usage_errors(tmp_path, args):
    assert _invoke("simulate", *args, "--out", tmp_path).exit_code == 2


def test_train_separate_evaluate(sim_dir, tmp_path):
    run = tmp_path / "run"
    res = _invoke("train", "--model", "ambisep", "--config", "toy", "--data", sim_dir / "mixtures.jsonl",
                  "--valid", sim_dir / "valid.jsonl", "--seed", 0, "--out", run)
    assert res.exit_code == 0, res.output
    history = [json.loads(l) for l in (run / "history.jsonl").read_text().splitlines()]
    assert len(history) == 2
    assert (run / "best.ckpt").exists() and (run / "config.json").exists()

    mix_path = sim_dir / "valid/00000/mixture.wav"
    res = _invoke("separate", "--checkpoint", run / "last.ckpt", "--in", mix_path, "--out-dir", tmp_path / "est")
    assert res.exit_code == 0, res.output
    est, fs = audio.read_wav(tmp_path / "est/estimate1.wav")
    mix, _ = audio.read_wav(mix_path)
    assert fs == 8000 and est.shape == mix.shape

    res = _invoke("evaluate", "--checkpoint", run / "last.ckpt", "--data", sim_dir / "valid.jsonl",
                  "--report", tmp_path / "report.json")
    assert res.exit_code == 0, res.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["summary"]["count"] == 2 and len(report["examples"]) == 2


def test_separate_zero_input(sim_dir, tmp_path):
    run = tmp_path / "run"
    _invoke("train", "--model", "ambisep", "--config", "toy", "--data", sim_dir / "mixtures.jsonl", "--max-steps", 1,
            "--out", run)
    audio.write_wav(tmp_path / "zero.wav", np.zeros((4, 4000)), 8000)
    res = _invoke("separate", "--checkpoint", run / "last.ckpt", "--in", tmp_path / "zero.wav", "--out-dir", tmp_path)
    assert res.exit_code == 0
    assert np.all(audio.read_wav(tmp_path / "estimate0.wav")[0] == 0)
    audio.write_wav(tmp_path / "nine.wav", np.zeros((9, 4000)), 8000)
    res = _invoke("separate", "--checkpoint", run / "last.ckpt", "--in", tmp_path / "nine.wav", "--out-dir", tmp_path)
    assert res.exit_code == 2


def test_oracle_training_has_no_masknet(sim_dir, tmp_path):
    from ambisep.autodiff import load_checkpoint

    res = _invoke("train", "--model", "oracle", "--config", "toy", "--data", sim_dir / "mixtures.jsonl", "--out",
                  tmp_path)
    assert res.exit_code == 0, res.output
    params, _ = load_checkpoint(tmp_path / "last.ckpt")
    assert sorted(params) == ["codec.decoder", "codec.encoder"]


def test_evaluate_identity_and_mixture(sim_dir, tmp_path):
    rec = json.loads((sim_dir / "valid.jsonl").read_text().splitlines()[0])
    refs = [sim_dir / p for p in rec["target_paths"]]
    mix = sim_dir / rec["mixture_path"]
    res = _invoke("evaluate", "--estimates", refs[0], "--estimates", refs[1], "--references", refs[0],
                  "--references", refs[1], "--mixture", mix, "--report", tmp_path / "same.json")
    assert res.exit_code == 0, res.output
    same = json.loads((tmp_path / "same.json").read_text())["examples"][0]
    assert same["si_sdr"] == 300.0 and same["si_isr"] == 300.0
    res = _invoke("evaluate", "--estimates", mix, "--estimates", mix, "--references", refs[0], "--references", refs[1],
                  "--mixture", mix, "--report", tmp_path / "mix.json")
    assert json.loads((tmp_path / "mix.json").read_text())["examples"][0]["si_sdri"] == pytest.approx(0, abs=1e-9)


def test_evaluate_length_mismatch(sim_dir, tmp_path):
    rec = json.loads((sim_dir / "valid.jsonl").read_text().splitlines()[0])
    audio.write_wav(tmp_path / "short.wav", np.ones((4, 10)), 8000)
    ref = sim_dir / rec["target_paths"][0]
    res = _invoke("evaluate", "--estimates", tmp_path / "short.wav", "--references", ref, "--mixture", ref,
                  "--report", tmp_path / "r.json")
    assert res.exit_code == 2


def test_param_count_output():
    res = _invoke("param-count", "--model", "oracle")
    assert "16,384" in res.output
    res = _invoke("param-count", "--model", "ambisep", "--config", "toy")
    assert "227,841" in res.output


def test_exit_codes_from_entry_point(tmp_path):
    assert _main("train", "--model", "ambisep", "--data", tmp_path / "missing.jsonl", "--out", tmp_path).returncode == 2
    assert _main("train", "--model", "gan", "--data", tmp_path, "--out", tmp_path).returncode == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    audio.write_wav(tmp_path / "x.wav", np.zeros((4, 100)), 8000)
    proc = _main("separate", "--checkpoint", bad, "--in", tmp_path / "x.wav", "--out-dir", tmp_path)
    assert proc.returncode == 1 and "error" in proc.stderr
    assert _main("param-count", "--model", "oracle").returncode == 0


def test_thread_override_env(tmp_path):
    import os

    env = {**os.environ, "AMBISEP_NUM_THREADS": "many"}
    assert _main("param-count", "--model", "oracle", env=env).returncode == 2
