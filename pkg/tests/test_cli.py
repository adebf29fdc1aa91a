import json

from echotrack.cli import main

TINY = {
    "n_blocks": 6,
    "n_train_blocks": 3,
    "n_clutter": 5,
    "k_samples": 4,
    "t_diffusion": 10,
    "vae_latent_dim": 8,
    "vae_hidden": 16,
    "ddpm_hidden": 32,
    "cnn_channels": [4, 8, 8],
    "batch_size": 16,
}


def _write_config(tmp_path, extra=None):
    cfg = dict(TINY)
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_success(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    code = main(
        ["run", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "out"), "--profile", "desk"]
    )
    assert code == 0
    assert (tmp_path / "out" / "metrics.csv").exists()
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["config"]["profile"] == "desk"
    summary = json.loads(capsys.readouterr().out)
    assert "ddpm" in summary


def test_run_methods_flag(tmp_path):
    cfg = _write_config(tmp_path)
    code = main(
        [
            "run", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "out"),
            "--methods", "ddpm,music",
        ]
    )
    assert code == 0
    rows = (tmp_path / "out" / "metrics.csv").read_text().strip().split("\n")[1:]
    assert {r.split(",")[2] for r in rows} == {"ddpm", "music"}


def test_run_unknown_config_key_exit_2(tmp_path):
    cfg = _write_config(tmp_path, {"made_up": 1})
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 2


def test_run_invalid_value_exit_2(tmp_path):
    cfg = _write_config(tmp_path, {"n_train_blocks": 99})
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")])
    assert code == 2


def test_run_missing_config_file_exit_2(tmp_path):
    code = main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")])
    assert code == 2


def test_resume_flag(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--seed", "2", "--out", str(out), "--stop-after", "3"]) == 0
    ckpt = out / "checkpoints" / "state.ckpt"
    assert ckpt.exists()
    assert main(["run", "--config", str(cfg), "--seed", "2", "--out", str(out), "--resume", str(ckpt)]) == 0
    rows = (out / "metrics.csv").read_text().strip().split("\n")[1:]
    blocks = sorted({int(r.split(",")[0]) for r in rows})
    assert blocks == list(range(1, 7))
