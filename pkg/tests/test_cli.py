import json

import numpy as np
import pytest
import yaml

from fmvoc.cli import run
from fmvoc.dsp import read_wav

TINY = {
    "model": {
        "branches": [
            {"n_fft": 512, "hop": 256, "embed_dim": 12, "n_layers": 1},
            {"n_fft": 256, "hop": 128, "embed_dim": 8, "n_layers": 1},
            {"n_fft": 128, "hop": 64, "embed_dim": 8, "n_layers": 1},
        ],
        "cond_dim": 8,
        "cond_layers": 1,
        "time_dim": 8,
    },
    "train": {"batch_size": 2, "segment_length": 4096, "log_every": 0},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert run(["make-toy-data", "--out-dir", str(root / "toy"), "--n-train", "4", "--n-dev", "2",
                "--clip-seconds", "0.5"]) == 0
    return root, cfg


def pipeline(root, cfg, tag):
    out = root / tag
    toy = root / "toy"
    common = ["--config", str(cfg), "--out-dir", str(out), "--seed", "0"]
    assert run(["train-fm", *common, "--data", str(toy / "train/manifest.tsv"), "--max-iters", "3",
                "--loss-mode", "endpoint_plain"]) == 0
    assert run(["finetune-gan", *common, "--data", str(toy / "train/manifest.tsv"), "--ckpt",
                str(out / "fm.pt"), "--max-iters", "2", "--steps", "2"]) == 0
    assert run(["step-sweep", *common, "--ckpt", str(out / "gan_2step.pt"), "--data",
                str(toy / "dev/manifest.tsv"), "--steps", "1,2"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    return pipeline(root, cfg, "a")


def test_pipeline_deterministic(workspace, trained):
    root, cfg = workspace
    a, b = trained, pipeline(root, cfg, "b")
    assert (a / "fm.pt").read_bytes() == (b / "fm.pt").read_bytes()
    assert (a / "gan_2step.pt").read_bytes() == (b / "gan_2step.pt").read_bytes()
    assert (a / "step_sweep.jsonl").read_text() == (b / "step_sweep.jsonl").read_text()
    rows = [json.loads(line) for line in (a / "step_sweep.jsonl").read_text().splitlines()]
    assert [r["steps"] for r in rows] == [1, 2]


def test_sample_byte_identical(workspace, trained, capsys):
    root, _ = workspace
    out = trained
    wav = str(root / "toy" / "dev" / "dev_0000.wav")
    for name in ("x.wav", "y.wav"):
        assert run(["sample", "--ckpt", str(out / "fm.pt"), "--cond", wav, "--steps", "2",
                    "--seed", "5", "--out", str(root / name)]) == 0
    assert (root / "x.wav").read_bytes() == (root / "y.wav").read_bytes()
    y, sr = read_wav(root / "x.wav")
    assert sr == 24000 and np.all(np.isfinite(y))
    resolved = capsys.readouterr().out
    assert '"command": "sample"' in resolved and '"steps": 2' in resolved


def test_sample_from_npy_pcm16(workspace, trained):
    root, _ = workspace
    out = trained
    np.save(root / "cond.npy", np.zeros((8, 100), dtype=np.float32) - 5.0)
    assert run(["sample", "--ckpt", str(out / "fm.pt"), "--cond", str(root / "cond.npy"),
                "--pcm16", "--out", str(root / "c.wav")]) == 0
    y, _ = read_wav(root / "c.wav")
    assert y.shape == (8 * 256,)


def test_ablate_two_rows(workspace):
    root, cfg = workspace
    toy = root / "toy"
    out = root / "abl"
    assert run(["ablate", "--config", str(cfg), "--out-dir", str(out), "--data", str(toy / "train/manifest.tsv"),
                "--dev-data", str(toy / "dev/manifest.tsv"), "--modes", "velocity,endpoint_spectral",
                "--budget", "2"]) == 0
    lines = (out / "ablation.txt").read_text().splitlines()
    assert len(lines) == 4
    assert {json.loads(r)["label"] for r in (out / "ablation.jsonl").read_text().splitlines()} == {
        "velocity", "endpoint_spectral"}


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert run(["train-fm", "--config", str(missing), "--data", "x"]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag(capsys):
    assert run(["train-fm", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_missing_subcommand():
    assert run([]) == 1


def test_bad_steps_list():
    assert run(["eval", "--ckpt", "a", "--data", "b", "--steps", "0,x"]) == 1


def test_runtime_failure_is_two(tmp_path, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    assert run(["eval", "--ckpt", str(bad), "--data", str(tmp_path / "m.tsv")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_data_flag(workspace, capsys):
    _, cfg = workspace
    assert run(["train-fm", "--config", str(cfg)]) == 1
    assert "--data" in capsys.readouterr().err


def test_unknown_config_section(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("wat: 1\n")
    assert run(["train-fm", "--config", str(p), "--data", "x"]) == 1


def test_resolved_config_printed(workspace, capsys):
    root, cfg = workspace
    assert run(["make-toy-data", "--out-dir", str(root / "toy2"), "--n-train", "1", "--n-dev", "1",
                "--clip-seconds", "0.5"]) == 0
    out = capsys.readouterr().out
    resolved = json.loads(out[: out.index("\n}") + 2])
    assert resolved["command"] == "make-toy-data" and resolved["train"]["n_clips"] == 1
