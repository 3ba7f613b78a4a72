import json

import pytest

from dlolab.cli import main
from dlolab.config import ExperimentConfig, apply_overrides, load_config
from dlolab.errors import ConfigError


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = load_config()
    assert cfg.sim.L == 20 and cfg.model.d_embed == 256 and cfg.eval.warmup == 5
    assert cfg.eval.horizon == 20 and cfg.eval.rollouts == 100
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


def test_config_rejects_unknown_keys(tmp_path):
    for bad in ({"simm": {}}, {"sim": {"nope": 1}}, {"model": {"widths": 3}}, {"eval": {"x": 1}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_overrides():
    d = apply_overrides({}, ["sim.L=12", "model.lr=3e-4", "model.preset=small"])
    cfg = ExperimentConfig.from_dict(d)
    assert cfg.sim.L == 12 and cfg.model.lr == 3e-4 and cfg.model.d_embed == 1024
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_gen_inspect_and_baseline(tmp_path, capsys):
    data = tmp_path / "d"
    code, out, _ = run(["gen-data", "--out", data, "--n", 10, "--seed", 0, "--set", "sim.horizon=30"], capsys)
    assert code == 0 and json.loads(out)["n_transitions"] == 300
    code, out, _ = run(["inspect", "--data", data], capsys)
    info = json.loads(out)
    assert code == 0 and info["n_states"] == 310 and info["split_sizes"] == {"train": 8, "val": 1, "test": 1}

    ev = tmp_path / "ev"
    code, out, _ = run(["eval-rmse", "--baseline", "persistence", "--data", data, "--rollouts", 5, "--out", ev], capsys)
    assert code == 0
    lines = (ev / "rmse.csv").read_text().splitlines()
    assert lines[0] == "step,rmse_mean_mm,rmse_std_mm" and len(lines) == 21
    assert (ev / "rmse.png").stat().st_size > 0
    manifest = json.loads((ev / "run_manifest.json").read_text())
    assert manifest["command"] == "eval-rmse" and manifest["config"]["eval"]["rollouts"] == 5

    # the run manifest alone is enough to rerun
    ev2 = tmp_path / "ev2"
    argv = manifest["argv"]
    argv[argv.index("--out") + 1] = str(ev2)
    assert main(argv + ["--config", str(ev / "run_manifest.json")]) == 0
    capsys.readouterr()
    assert (ev2 / "rmse.csv").read_bytes() == (ev / "rmse.csv").read_bytes()


def test_errors_are_machine_readable(tmp_path, capsys):
    code, _, err = run(["inspect", "--data", tmp_path / "missing"], capsys)
    assert code == 1 and json.loads(err)["error"] == "IoError"
    code, _, err = run(["gen-data", "--out", tmp_path / "x", "--set", "sim.L=1"], capsys)
    assert code == 1 and json.loads(err)["error"] == "ConfigError"
    code, _, err = run(["eval-rmse", "--data", tmp_path, "--out", tmp_path / "y"], capsys)
    assert code == 1 and "error" in json.loads(err)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX0000")
    code, _, err = run(["inspect", "--checkpoint", bad], capsys)
    assert code == 1 and json.loads(err)["error"] == "CorruptCheckpoint"


def test_train_bench_inspect_tiny(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(["gen-data", "--out", data, "--n", 10, "--set", "sim.L=6", "--set", "sim.horizon=8"], capsys)[0] == 0
    tiny = ["--set", "model.preset=desk", "--set", "model.d_embed=8", "--set", "model.d_action=8",
            "--set", "model.d_rnn=8", "--set", "model.d_z=4", "--set", "model.d_hidden=8",
            "--set", "model.seq_len=5", "--set", "model.max_epochs=3"]
    code, out, _ = run(["train", "--data", data, "--out", tmp_path / "run", *tiny], capsys)
    assert code == 0
    ckpt = json.loads(out)["checkpoint"]
    assert ckpt.endswith("best.ckpt")
    header = (tmp_path / "run" / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,L_total,L_recon,L_pred,L_KL,val_L_total,wall_seconds"
    code, out, _ = run(["inspect", "--checkpoint", ckpt], capsys)
    assert code == 0 and json.loads(out)["L"] == 6
    code, out, _ = run(["bench", "--checkpoint", ckpt, "--steps", 5, "--repeats", 2, "--out", tmp_path / "b",
                        "--set", "bench.sim_steps=1", "--set", "bench.sim_repeats=1"], capsys)
    assert code == 0
    rows = (tmp_path / "b" / "latency.csv").read_text().splitlines()
    assert rows[0] == "config,mean_ms,std_ms,n" and rows[1].startswith("rssm,") and rows[2].startswith("simulator,")
    code, _, _ = run(["eval-topology", "--checkpoint", ckpt, "--data", data, "--warmup", 2, "--horizon", 3,
                      "--rollouts", 4, "--min-crossings", 0, "--with-baseline", "--out", tmp_path / "t"], capsys)
    assert code == 0
    assert (tmp_path / "t" / "topology.csv").exists() and (tmp_path / "t" / "topology_persistence.csv").exists()
