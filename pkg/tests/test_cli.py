import csv
import hashlib
import json

import numpy as np
import pytest
import torch
import yaml

from stkd import cli
from stkd.checkpoint import Checkpoint
from stkd.config import RunConfig
from stkd.datahub import minimum_timesteps
from stkd.errors import ConfigError, TrainingDivergence


def write_config(path, **extra):
    cfg = {
        "seed": 0,
        "dataset": {"synthetic": {"n_nodes": 6, "n_timesteps": 360, "seed": 0}},
        "train": {"epochs": 1},
        "prune": {"pruning_minibatch": 2, "per_event_fraction": 0.25, "target_sparsity": 0.5, "finetune_epochs": 0},
        "bench": {"batch": 4, "runs": 2, "warmup": 1},
        "export": {"sample_count": 5},
    }
    cfg.update(extra)
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(argv, tmp_path):
    return cli.main([*argv, "--out", str(tmp_path / "runs")])


def run_dir(cfg_path, tmp_path, **overrides):
    return RunConfig.load(cfg_path, overrides).run_dir(tmp_path / "runs")


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------ config


def test_config_hash_ignores_output_root(tmp_path):
    c = write_config(tmp_path / "c.yaml")
    a = RunConfig.load(c).run_dir("x")
    b = RunConfig.load(c).run_dir("y")
    assert a.name == b.name and a.name.endswith("-s0")
    assert RunConfig.load(c, {"seed": 3}).run_dir("x").name.endswith("-s3")
    assert RunConfig.load(c, {"seed": 3}).hash() != RunConfig.load(c).hash()


@pytest.mark.parametrize(
    "dataset",
    [{}, {"synthetic": {}, "speed_csv": "a.csv", "distance_csv": "b.csv"}, {"speed_csv": "a.csv"}],
)
def test_config_requires_exactly_one_source(tmp_path, dataset):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"dataset": dataset}))
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_config_rejects_unknown_preset_and_loss(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(write_config(tmp_path / "a.yaml", preset="metr-la"))
    with pytest.raises(ConfigError):
        RunConfig.load(write_config(tmp_path / "b.yaml", loss={"kind": "mse"}))


def test_preset_resolution_distill(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path / "c.yaml"), {"preset": "pemsd7"})
    w = cfg.loss_weights(loss_kind="stcd")
    assert (w.alpha1, w.alpha2, w.alpha3) == (0.170, 0.047, 0.313)
    assert cfg.loss_weights(loss_kind="rd_l2").beta == 0.045
    assert cfg.loss_weights(loss_kind="ord").alpha1 == 0.593
    tc = cfg.train_config(loss_kind="stcd")
    assert tc.batch_size == 50 and tc.learning_rate == 1e-3 and tc.epochs == 1


def test_explicit_loss_values_override_preset(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path / "c.yaml", loss={"alpha1": 0.9}), {"preset": "pemsd8"})
    w = cfg.loss_weights(loss_kind="stcd")
    assert (w.alpha1, w.alpha2, w.alpha3) == (0.9, 0.465, 0.504)


def test_model_overrides(tmp_path):
    cfg = RunConfig.load(write_config(tmp_path / "c.yaml", models={"student": {"block_channels": [[1, 3, 6], [6, 3, 6]]}, "dropout": 0.1}))
    kw = cfg.model_kwargs("student")
    assert kw["block_channels"] == [[1, 3, 6], [6, 3, 6]] and kw["dropout"] == 0.1
    assert cfg.model_kwargs("teacher")["block_channels"] == ((1, 32, 64), (64, 32, 128))


# ------------------------------------------------------------ commands


def test_prepare_is_deterministic(tmp_path):
    c = write_config(tmp_path / "c.yaml")
    assert run(["prepare", "-c", c], tmp_path) == 0
    d = run_dir(c, tmp_path)
    first = json.loads((d / "manifest.json").read_text())
    assert first["n_nodes"] == 6 and first["M"] == 12 and first["h"] == 9
    assert (d / "config.yaml").exists() and (d / "data.npz").exists()
    assert run(["prepare", "-c", c], tmp_path) == 0
    second = json.loads((d / "manifest.json").read_text())
    assert first["hashes"] == second["hashes"]


def test_prepare_real_format_records_node_count(tmp_path):
    n = 228
    T = minimum_timesteps(12, 9) + 5
    rng = np.random.default_rng(0)
    speed = 60 + rng.normal(size=(T, n))
    pos = rng.uniform(0, 20, size=n)
    dist = np.abs(pos[:, None] - pos[None])
    np.savetxt(tmp_path / "V.csv", speed, delimiter=",")
    np.savetxt(tmp_path / "W.csv", dist, delimiter=",")
    c = write_config(tmp_path / "c.yaml", dataset={"speed_csv": str(tmp_path / "V.csv"), "distance_csv": str(tmp_path / "W.csv")})
    assert run(["prepare", "-c", c], tmp_path) == 0
    manifest = json.loads((run_dir(c, tmp_path) / "manifest.json").read_text())
    assert manifest["n_nodes"] == 228


def test_missing_input_file_exit_code(tmp_path, capsys):
    c = write_config(tmp_path / "c.yaml", dataset={"speed_csv": str(tmp_path / "nope.csv"), "distance_csv": "w.csv"})
    assert run(["prepare", "-c", c], tmp_path) == cli.EXIT_MISSING
    assert "nope.csv" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"dataset": {}}))
    assert run(["prepare", "-c", str(p)], tmp_path) == cli.EXIT_CONFIG
    assert run(["prepare", "-c", str(tmp_path / "missing.yaml")], tmp_path) == cli.EXIT_CONFIG


def test_missing_prerequisites_name_the_artifact(tmp_path, capsys):
    c = write_config(tmp_path / "c.yaml")
    assert run(["distill", "-c", c], tmp_path) == cli.EXIT_MISSING
    assert "data.npz" in capsys.readouterr().err
    run(["prepare", "-c", c], tmp_path)
    assert run(["distill", "-c", c, "--loss", "stcd"], tmp_path) == cli.EXIT_MISSING
    assert "teacher.pt" in capsys.readouterr().err
    assert run(["prune", "-c", c], tmp_path) == cli.EXIT_MISSING
    assert "base.pt" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch):
    c = write_config(tmp_path / "c.yaml")
    run(["prepare", "-c", c], tmp_path)

    def boom(*a, **k):
        raise TrainingDivergence("non-finite loss")

    monkeypatch.setattr(cli, "train_teacher", boom)
    assert run(["train-teacher", "-c", c], tmp_path) == cli.EXIT_DIVERGED


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare + teacher + base under the pemsd8 preset, shared by the command tests."""
    tmp = tmp_path_factory.mktemp("pipe")
    c = write_config(tmp / "c.yaml")
    for argv in (["prepare"], ["train-teacher"], ["train-teacher", "--role", "base"]):
        assert cli.main([*argv, "-c", c, "--out", str(tmp / "runs"), "--preset", "pemsd8"]) == 0
    return tmp, c


def pipe_run(pipeline, argv, preset="pemsd8"):
    tmp, c = pipeline
    return cli.main([*argv, "-c", c, "--out", str(tmp / "runs"), "--preset", preset])


def pipe_dir(pipeline, preset="pemsd8"):
    tmp, c = pipeline
    return RunConfig.load(c, {"preset": preset}).run_dir(tmp / "runs")


def test_train_teacher_is_idempotent(pipeline):
    d = pipe_dir(pipeline)
    before = sha(d / "checkpoints" / "teacher.pt")
    assert pipe_run(pipeline, ["train-teacher"]) == 0
    assert sha(d / "checkpoints" / "teacher.pt") == before
    rows = list(csv.DictReader(open(d / "history" / "teacher.csv")))
    assert len(rows) == 1 and {"epoch", "lr", "train_loss", "val_rmse"} <= set(rows[0])


def test_distill_uses_pemsd8_stcd_preset(pipeline):
    assert pipe_run(pipeline, ["distill", "--loss", "stcd"]) == 0
    d = pipe_dir(pipeline)
    meta = Checkpoint.load(d / "checkpoints" / "student_stcd.pt").meta
    w = meta["loss_weights"]
    assert (w["alpha1"], w["alpha2"], w["alpha3"]) == (0.846, 0.465, 0.504)
    rows = list(csv.DictReader(open(d / "history" / "student_stcd.csv")))
    assert 0.0 <= float(rows[0]["teacher_ratio"]) <= 1.0


def test_prune_uses_pemsd7_97_preset(tmp_path):
    c = write_config(tmp_path / "c.yaml", prune={"pruning_minibatch": 5, "finetune_epochs": 0})
    for argv in (["prepare"], ["train-teacher"], ["train-teacher", "--role", "base"], ["prune", "--target", "0.97"]):
        assert cli.main([*argv, "-c", c, "--out", str(tmp_path / "runs"), "--preset", "pemsd7"]) == 0
    d = RunConfig.load(c, {"preset": "pemsd7"}).run_dir(tmp_path / "runs")
    meta = Checkpoint.load(d / "checkpoints" / "pruned_kd_97.pt").meta
    assert meta["train"]["batch_size"] == 25 and meta["train"]["learning_rate"] == 1e-3
    w = meta["loss_weights"]
    assert (w["alpha1"], w["alpha2"], w["alpha3"]) == (0.746, 0.445, 0.020)
    assert meta["kept_fraction"] == pytest.approx(0.03, abs=0.01)
    assert (d / "history" / "pruned_kd_97_events.csv").exists()


def test_prune_baseline_and_eval_bench_export(pipeline):
    assert pipe_run(pipeline, ["prune", "--target", "0.5", "--baseline"]) == 0
    assert pipe_run(pipeline, ["distill", "--loss", "stcd"]) == 0
    assert pipe_run(pipeline, ["eval"]) == 0
    d = pipe_dir(pipeline)
    models = {r["model"] for r in csv.DictReader(open(d / "metrics.csv"))}
    assert {"teacher", "base", "pruned_traditional_50", "student_stcd"} <= models
    assert pipe_run(pipeline, ["bench", "--models", "teacher", "student_stcd"]) == 0
    bench = json.loads((d / "bench.json").read_text())
    assert bench["teacher"]["runs"] == 2 and bench["teacher"]["batch"] == 4
    assert pipe_run(pipeline, ["export-scatter"]) == 0
    rows = list(csv.DictReader(open(d / "scatter.csv")))
    assert len(rows) == 10


def test_eval_random_model(pipeline, capsys):
    assert pipe_run(pipeline, ["eval", "--random", "student"]) == 0
    d = pipe_dir(pipeline)
    rows = list(csv.DictReader(open(d / "metrics_random_student.csv")))
    assert rows and all(np.isfinite(float(r["rmse"])) for r in rows)


def test_reproduce_requires_real_data(pipeline):
    assert pipe_run(pipeline, ["reproduce"]) == cli.EXIT_CONFIG


def test_compare_to_table():
    from stkd.evaluation import HorizonMetrics
    from stkd.presets import METRIC_TABLE

    ref = METRIC_TABLE["pemsd7"]["teacher"]
    close = HorizonMetrics({m: {k: v * 1.05 for k, v in vals.items()} for m, vals in ref.items()})
    far = HorizonMetrics({m: {k: v * 1.2 for k, v in vals.items()} for m, vals in ref.items()})
    rows = cli.compare_to_table({"teacher": close}, "pemsd7")
    assert len(rows) == 9 and all(r["pass"] for r in rows)
    assert not any(r["pass"] for r in cli.compare_to_table({"teacher": far}, "pemsd7"))
