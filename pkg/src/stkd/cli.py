"""Command-line pipeline: prepare, train, distil, prune, evaluate, benchmark, export.

Every command reads one YAML config (see :mod:`stkd.config`) and works in
the run directory ``<out>/<config-hash>-s<seed>``. Exit codes: 0 success,
2 config / input error, 3 missing artifact, 4 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint
from .config import RunConfig
from .datahub import (
    SyntheticSpec,
    WindowedDataset,
    build_adjacency,
    clean_speeds,
    generate_synthetic,
    load_distance_csv,
    load_speed_csv,
    window,
)
from .errors import ConfigError, MissingArtifactError, STKDError, TrainingDivergence
from .evaluation import (
    benchmark,
    evaluate,
    export_hidden_projection,
    format_metrics_table,
    write_metrics_csv,
    write_projection_csv,
)
from .losses import LOSS_KINDS
from .model import ModelConfig, build_model, count_parameters, scaled_laplacian
from .presets import METRIC_TABLE
from .pruning import run_kd_pruning, traditional_prune_baseline, write_history_csv
from .training import train_student_kd, train_teacher

log = logging.getLogger("stkd")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


# ------------------------------------------------------------------ artifacts


def _array_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(arrays):
        a = np.ascontiguousarray(arrays[key])
        h.update(key.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Paths and loaders for one run directory."""

    def __init__(self, cfg: RunConfig, out: str | None = None):
        self.cfg = cfg
        self.dir = cfg.run_dir(out)

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def start(self, command: str) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg.dump(self.path("config.yaml"))
        log.info("%s: run directory %s", command, self.dir)
        log.info("resolved config: %s", json.dumps(self.cfg.resolved(), sort_keys=True, default=str))

    # data

    def load_splits(self) -> dict[str, WindowedDataset]:
        p = self.path("data.npz")
        if not p.exists():
            raise MissingArtifactError(f"prepared data not found: {p} (run `stkd prepare` first)")
        z = np.load(p)
        mean, std = float(z["mean"]), float(z["std"])
        return {s: WindowedDataset(z[f"{s}_inputs"], z[f"{s}_targets"], mean, std) for s in SPLITS}

    def load_laplacian(self) -> np.ndarray:
        p = self.path("laplacian.npy")
        if not p.exists():
            raise MissingArtifactError(f"graph Laplacian not found: {p} (run `stkd prepare` first)")
        return np.load(p)

    # models

    def checkpoint_path(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.pt")

    def load_model(self, name: str, hint: str):
        p = self.checkpoint_path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing checkpoint {p} (create it with `{hint}`)")
        return Checkpoint.load(p).build()

    def new_model(self, role: str, n_nodes: int):
        kwargs = self.cfg.model_kwargs(role)
        config = ModelConfig(n_nodes=n_nodes, **kwargs)
        torch.manual_seed(self.cfg.seed)
        return build_model(config, self.load_laplacian())

    def save_model(self, name: str, model, stats, meta: dict) -> Path:
        meta = {"name": name, "config_hash": self.cfg.hash(), "seed": self.cfg.seed, **meta}
        path = Checkpoint.from_model(model, stats, meta=meta).save(self.checkpoint_path(name))
        log.info("saved %s (%d parameters) to %s", name, count_parameters(model), path)
        return path


def _write_rows(rows: list[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


# ------------------------------------------------------------------ commands


def cmd_prepare(run: Run, args) -> int:
    run.start("prepare")
    ds = run.cfg.dataset
    if ds.get("synthetic") is not None:
        synth = dict(ds["synthetic"] or {})
        synth.setdefault("interval_minutes", ds["interval_minutes"])
        speed, adj = generate_synthetic(SyntheticSpec.from_dict(synth))
        source = {"synthetic": synth}
    else:
        speed = load_speed_csv(ds["speed_csv"], ds["delimiter"], ds["header"], ds["interval_minutes"])
        dist = load_distance_csv(ds["distance_csv"], ds["delimiter"], ds["header"])
        if dist.shape[0] != speed.n_stations:
            raise ConfigError(f"distance matrix has {dist.shape[0]} nodes but speed table has {speed.n_stations} stations")
        speed = clean_speeds(speed)
        adj = build_adjacency(dist, ds["sigma_sq"], ds["epsilon"])
        source = {"speed_csv": str(ds["speed_csv"]), "distance_csv": str(ds["distance_csv"])}

    splits = window(speed, int(ds["M"]), int(ds["h"]), tuple(ds["split"]))
    lap = scaled_laplacian(adj.W)
    arrays = {"mean": np.float64(splits[0].mean), "std": np.float64(splits[0].std)}
    for name, part in zip(SPLITS, splits):
        arrays[f"{name}_inputs"] = part.inputs
        arrays[f"{name}_targets"] = part.targets
    np.savez(run.path("data.npz"), **arrays)
    np.save(run.path("adjacency.npy"), adj.W)
    np.save(run.path("laplacian.npy"), lap.L_tilde)

    manifest = {
        "n_nodes": int(adj.n_nodes),
        "n_timesteps": int(speed.n_timesteps),
        "interval_minutes": int(speed.interval_minutes),
        "M": int(ds["M"]),
        "h": int(ds["h"]),
        "samples": {name: len(part) for name, part in zip(SPLITS, splits)},
        "zscore": {"mean": splits[0].mean, "std": splits[0].std},
        "sigma_sq": adj.sigma_sq,
        "epsilon": adj.epsilon,
        "lambda_max": lap.lambda_max,
        "source": source,
        "config_hash": run.cfg.hash(),
        "seed": run.cfg.seed,
        "hashes": {
            "data": _array_digest({k: np.asarray(v) for k, v in arrays.items()}),
            "adjacency.npy": _file_digest(run.path("adjacency.npy")),
            "laplacian.npy": _file_digest(run.path("laplacian.npy")),
        },
    }
    with open(run.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    log.info("prepared N=%d, samples %s", manifest["n_nodes"], manifest["samples"])
    return EXIT_OK


def _train_teacher_role(run: Run, role: str) -> None:
    data = run.load_splits()
    n_nodes = data["train"].inputs.shape[2]
    model = run.new_model(role, n_nodes)
    cfg = run.cfg.train_config(loss_kind="none")
    result = train_teacher(model, data["train"], data["val"], cfg)
    run.save_model(role, result.model, data["train"].stats, {"role": role, "best_epoch": result.best_epoch, "train": cfg.to_dict()})
    _write_rows(result.history, run.path("history", f"{role}.csv"))


def cmd_train_teacher(run: Run, args) -> int:
    run.start("train-teacher")
    _train_teacher_role(run, args.role)
    return EXIT_OK


def _distill(run: Run, loss_kind: str) -> str:
    data = run.load_splits()
    teacher = run.load_model("teacher", "stkd train-teacher")
    student = run.new_model("student", data["train"].inputs.shape[2])
    cfg = run.cfg.train_config(loss_kind=loss_kind)
    weights = run.cfg.loss_weights(loss_kind=loss_kind)
    log.info("distilling with %s, %s, %s", loss_kind, weights, cfg)
    result = train_student_kd(student, teacher, data["train"], data["val"], cfg, weights, loss_kind)
    name = f"student_{loss_kind}"
    meta = {"role": "student", "loss_kind": loss_kind, "loss_weights": vars(weights), "train": cfg.to_dict(), "best_epoch": result.best_epoch}
    run.save_model(name, result.model, data["train"].stats, meta)
    _write_rows(result.history, run.path("history", f"{name}.csv"))
    ratios = [r["teacher_ratio"] for r in result.history]
    if ratios:
        log.info("teacher_ratio over training: %.5f", float(np.mean(ratios)))
    return name


def cmd_distill(run: Run, args) -> int:
    run.start("distill")
    _distill(run, args.loss or run.cfg.loss_kind())
    return EXIT_OK


def _prune(run: Run, target: float, baseline: bool) -> str:
    data = run.load_splits()
    base = run.load_model("base", "stkd train-teacher --role base")
    schedule, finetune = run.cfg.prune_settings(target)
    cfg = run.cfg.train_config(target_sparsity=target)
    pct = int(round(target * 100))
    if baseline:
        name = f"pruned_traditional_{pct}"
        result = traditional_prune_baseline(base, data["train"], schedule, finetune, cfg)
        weights = None
    else:
        name = f"pruned_kd_{pct}"
        teacher = run.load_model("teacher", "stkd train-teacher")
        weights = run.cfg.loss_weights(target_sparsity=target)
        log.info("pruning to %.2f with %s, %s", target, weights, cfg)
        result = run_kd_pruning(teacher, base, data["train"], schedule, weights, finetune, cfg)
    meta = {
        "role": "base",
        "target_sparsity": target,
        "baseline": baseline,
        "loss_weights": vars(weights) if weights else None,
        "schedule": vars(schedule),
        "train": cfg.to_dict(),
        "prune_events": len(result.history),
        "kept_fraction": result.kept_fraction(),
    }
    run.save_model(name, result.model, data["train"].stats, meta)
    write_history_csv(result.history, run.path("history", f"{name}_events.csv"))
    _write_rows(result.finetune_history, run.path("history", f"{name}_finetune.csv"))
    log.info("%s: %d prune events, kept fraction %.4f", name, len(result.history), result.kept_fraction())
    return name


def cmd_prune(run: Run, args) -> int:
    run.start("prune")
    target = args.target if args.target is not None else run.cfg.prune_settings()[0].target_sparsity
    _prune(run, target, args.baseline)
    return EXIT_OK


def _available_models(run: Run, names) -> dict:
    if names:
        return {n: run.load_model(n, "the matching train / distill / prune command") for n in names}
    ckpts = sorted(run.path("checkpoints").glob("*.pt")) if run.path("checkpoints").exists() else []
    if not ckpts:
        raise MissingArtifactError(f"no checkpoints under {run.path('checkpoints')} (train a model first, or pass --random)")
    return {p.stem: Checkpoint.load(p).build() for p in ckpts}


def cmd_eval(run: Run, args) -> int:
    run.start("eval")
    data = run.load_splits()
    if args.random:
        models = {f"random_{args.random}": run.new_model(args.random, data["test"].inputs.shape[2])}
    else:
        models = _available_models(run, args.models)
    interval = run.cfg.dataset["interval_minutes"]
    results = {name: evaluate(m, data["test"], interval_minutes=interval) for name, m in models.items()}
    stem = f"metrics_random_{args.random}" if args.random else "metrics"
    write_metrics_csv(results, run.path(f"{stem}.csv"))
    table = format_metrics_table(results)
    run.path(f"{stem}.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_bench(run: Run, args) -> int:
    run.start("bench")
    models = _available_models(run, args.models)
    b = run.cfg.bench
    reports = {}
    for name, m in models.items():
        rep = benchmark(m, batch=int(b["batch"]), runs=int(b["runs"]), warmup=int(b["warmup"]), seed=run.cfg.seed)
        reports[name] = {**rep.to_dict(), "parameters": count_parameters(m)}
        print(f"{name}: {rep.mean_time:.4f} s/forward (batch {rep.batch}, {rep.runs} runs), {rep.flops:,} FLOPs")
    with open(run.path("bench.json"), "w") as fh:
        json.dump(reports, fh, indent=2, sort_keys=True)
    return EXIT_OK


def cmd_export_scatter(run: Run, args) -> int:
    run.start("export-scatter")
    data = run.load_splits()
    names = args.models or ["teacher", "student_stcd"]
    models = {n: run.load_model(n, "the matching train / distill command") for n in names}
    proj = export_hidden_projection(models, data["test"].inputs, run.cfg.sample_count)
    write_projection_csv(proj, run.path("scatter.csv"))
    log.info("explained variance of 2 components: %s", proj.explained_variance_ratio[:2].round(4).tolist())
    return EXIT_OK


# Run names and how to produce them, in the order the result tables list them.
REPRO_STUDENTS = ("none", "rd_l2", "rd_kl", "ord", "tcd", "scd", "stcd")
REPRO_PRUNE = ((0.97, False), (0.75, False), (0.50, False), (0.25, False), (0.75, True), (0.50, True), (0.25, True))


def compare_to_table(results: dict, dataset: str, tolerance: float = 0.10) -> list[dict]:
    """Relative deviation of every reported metric from the published value."""
    rows = []
    for name, hm in results.items():
        ref = METRIC_TABLE[dataset].get(name)
        if ref is None:
            continue
        for minutes, metrics in ref.items():
            for metric, paper in metrics.items():
                got = hm.by_horizon.get(minutes, {}).get(metric)
                rel = None if got is None else abs(got - paper) / paper
                rows.append({
                    "model": name, "horizon_min": minutes, "metric": metric, "reference": paper,
                    "measured": got, "rel_error": rel, "pass": rel is not None and rel <= tolerance,
                })
    return rows


def cmd_reproduce(run: Run, args) -> int:
    """Full pipeline on a real dataset with the published presets."""
    preset = run.cfg.preset
    if preset is None:
        raise ConfigError("reproduce needs a dataset preset (--preset pemsd7 or pemsd8)")
    if run.cfg.dataset.get("speed_csv") is None:
        raise ConfigError("reproduce needs real speed / distance files; synthetic data has no published reference")
    run.start("reproduce")
    if not run.path("data.npz").exists():
        cmd_prepare(run, args)
    for role in ("teacher", "base"):
        if not run.checkpoint_path(role).exists():
            _train_teacher_role(run, role)
    for kind in REPRO_STUDENTS:
        if not run.checkpoint_path(f"student_{kind}").exists():
            _distill(run, kind)
    for target, baseline in REPRO_PRUNE:
        name = f"pruned_{'traditional' if baseline else 'kd'}_{int(round(target * 100))}"
        if not run.checkpoint_path(name).exists():
            _prune(run, target, baseline)

    data = run.load_splits()
    models = _available_models(run, None)
    results = {n: evaluate(m, data["test"], interval_minutes=run.cfg.dataset["interval_minutes"]) for n, m in models.items()}
    write_metrics_csv(results, run.path("metrics.csv"))
    run.path("metrics.txt").write_text(format_metrics_table(results) + "\n")
    rows = compare_to_table(results, preset, args.tolerance)
    _write_rows(rows, run.path("reproduction.csv"))
    passed = sum(r["pass"] for r in rows)
    print(f"{passed}/{len(rows)} metrics within {args.tolerance:.0%} of the published values")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stkd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output root directory")
    common.add_argument("--preset", choices=("pemsd7", "pemsd8"), help="dataset preset for the published hyperparameter tables")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="window the data and build the graph")

    t = sub.add_parser("train-teacher", parents=[common], help="train the teacher (or base) network")
    t.add_argument("--role", choices=("teacher", "base"), default="teacher")

    d = sub.add_parser("distill", parents=[common], help="train a student from the teacher")
    d.add_argument("--loss", choices=LOSS_KINDS, help="loss kind (default: config loss.kind)")

    pr = sub.add_parser("prune", parents=[common], help="joint distillation-pruning of the base network")
    pr.add_argument("--target", type=float, help="target sparsity in [0, 1]")
    pr.add_argument("--baseline", action="store_true", help="importance from the target-only loss instead")

    e = sub.add_parser("eval", parents=[common], help="MAPE / MAE / RMSE at 15 / 30 / 45 minutes")
    e.add_argument("--models", nargs="+", help="checkpoint names (default: all)")
    e.add_argument("--random", choices=("teacher", "base", "student"), help="evaluate an untrained model of this role")

    b = sub.add_parser("bench", parents=[common], help="latency and FLOPs")
    b.add_argument("--models", nargs="+", help="checkpoint names (default: all)")

    x = sub.add_parser("export-scatter", parents=[common], help="2-D projection of hidden features")
    x.add_argument("--models", nargs="+", help="checkpoint names (default: teacher student_stcd)")

    r = sub.add_parser("reproduce", parents=[common], help="full pipeline with presets, compared to published metrics")
    r.add_argument("--tolerance", type=float, default=0.10)
    return p


COMMANDS = {
    "prepare": cmd_prepare,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-scatter": cmd_export_scatter,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.load(args.config, {"seed": args.seed, "preset": args.preset})
        return COMMANDS[args.command](Run(cfg, args.out), args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (STKDError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
