"""Run configuration: one YAML file, preset resolution and run-directory naming.

Schema (all sections optional except ``dataset``)::

    seed: 0
    out: runs
    preset: pemsd7            # dataset preset used for loss / prune tables
    dataset:
      synthetic: {n_nodes: 10, n_timesteps: 2000, seed: 0, noise_std: 1.0}
      # or: speed_csv: V_228.csv, distance_csv: W_228.csv
      header: false
      delimiter: ","
      interval_minutes: 5
      M: 12
      h: 9
      split: [0.7, 0.15, 0.15]
      sigma_sq: null          # default: variance of nonzero distances
      epsilon: 0.5
    models:                   # per-role overrides of the published channel lists
      teacher: {block_channels: [[1, 32, 64], [64, 32, 128]]}
      base: {block_channels: [[1, 8, 16], [16, 8, 32]]}
      student: {block_channels: [[1, 2, 4], [4, 2, 8]]}
      temporal_kernel: 3
      spatial_order: 3
      dropout: 0.0
    train: {batch_size: 50, learning_rate: 0.001, lr_decay: 0.7, lr_decay_every: 5, epochs: 50}
    loss: {kind: stcd, alpha1: 0.17, alpha2: 0.047, alpha3: 0.313, beta: 0.5}
    prune: {target_sparsity: 0.97, per_event_fraction: 0.05, pruning_minibatch: 50,
            granularity: parameter, finetune_epochs: 5}
    bench: {batch: 1140, runs: 100, warmup: 10}
    export: {sample_count: 50}

Explicit ``loss`` / ``prune`` / ``train`` values override preset rows.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LOSS_KINDS, LossWeights
from .presets import ROLE_CHANNELS, loss_preset, prune_preset
from .pruning import PruneSchedule
from .training import TrainConfig

DEFAULT_DATASET = {
    "header": False,
    "delimiter": ",",
    "interval_minutes": 5,
    "M": 12,
    "h": 9,
    "split": [0.7, 0.15, 0.15],
    "sigma_sq": None,
    "epsilon": 0.5,
}
DEFAULT_PRUNE = {"target_sparsity": 0.97, "per_event_fraction": 0.05, "pruning_minibatch": 50, "granularity": "parameter", "finetune_epochs": 5}
DEFAULT_BENCH = {"batch": 1140, "runs": 100, "warmup": 10}
DEFAULT_LOSS = {"kind": "stcd", "alpha1": 0.5, "alpha2": 0.5, "alpha3": 0.0, "beta": 0.5}


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    # ---------------------------------------------------------- loading

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        cfg = cls(copy.deepcopy(raw))
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.raw[key] = value
        cfg.validate()
        return cfg

    def validate(self) -> None:
        ds = self.raw.get("dataset")
        if not isinstance(ds, dict):
            raise ConfigError("config needs a 'dataset' section")
        sources = [k for k in ("synthetic", "speed_csv") if ds.get(k) is not None]
        if len(sources) != 1:
            raise ConfigError(f"dataset section must name exactly one source (synthetic or speed_csv), got {sources or 'none'}")
        if "speed_csv" in sources and not ds.get("distance_csv"):
            raise ConfigError("speed_csv requires distance_csv")
        preset = self.raw.get("preset")
        if preset is not None and str(preset).lower() not in ("pemsd7", "pemsd8"):
            raise ConfigError(f"unknown preset {preset!r}; choose pemsd7 or pemsd8")
        kind = self.raw.get("loss", {}).get("kind", DEFAULT_LOSS["kind"])
        if kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {kind!r}")

    # ---------------------------------------------------------- sections

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def preset(self) -> str | None:
        p = self.raw.get("preset")
        return None if p is None else str(p).lower()

    @property
    def dataset(self) -> dict:
        return {**DEFAULT_DATASET, **self.raw["dataset"]}

    def model_kwargs(self, role: str) -> dict:
        if role not in ROLE_CHANNELS:
            raise ConfigError(f"unknown model role {role!r}")
        models = self.raw.get("models", {}) or {}
        shared = {k: models[k] for k in ("temporal_kernel", "spatial_order", "dropout") if k in models}
        role_cfg = dict(models.get(role, {}) or {})
        return {
            "block_channels": role_cfg.pop("block_channels", ROLE_CHANNELS[role]),
            "input_window": int(self.dataset["M"]),
            **shared,
            **role_cfg,
        }

    def train_config(self, loss_kind: str | None = None, target_sparsity: float | None = None, **overrides) -> TrainConfig:
        values = {"seed": self.seed}
        if self.preset and target_sparsity is not None:
            row = prune_preset(self.preset, target_sparsity)
            values.update(batch_size=row["batch_size"], learning_rate=row["learning_rate"])
        elif self.preset and loss_kind is not None:
            row = loss_preset(self.preset, loss_kind)
            values.update(batch_size=row["batch_size"], learning_rate=row["learning_rate"])
        values.update(self.raw.get("train", {}) or {})
        values.update({k: v for k, v in overrides.items() if v is not None})
        if self.preset and loss_kind:
            values.setdefault("preset", f"{self.preset}-{loss_kind}")
        return TrainConfig(**values)

    def loss_weights(self, loss_kind: str | None = None, target_sparsity: float | None = None) -> LossWeights:
        values = {k: DEFAULT_LOSS[k] for k in ("alpha1", "alpha2", "alpha3", "beta")}
        if self.preset and target_sparsity is not None:
            row = prune_preset(self.preset, target_sparsity)
            values.update({k: row[k] for k in ("alpha1", "alpha2", "alpha3") if k in row})
        elif self.preset and loss_kind is not None:
            row = loss_preset(self.preset, loss_kind)
            values.update({k: row[k] for k in ("alpha1", "alpha2", "alpha3", "beta") if k in row})
        explicit = self.raw.get("loss", {}) or {}
        values.update({k: explicit[k] for k in ("alpha1", "alpha2", "alpha3", "beta") if k in explicit})
        return LossWeights(**values)

    def loss_kind(self) -> str:
        return (self.raw.get("loss", {}) or {}).get("kind", DEFAULT_LOSS["kind"])

    def prune_settings(self, target_sparsity: float | None = None) -> tuple[PruneSchedule, int]:
        values = {**DEFAULT_PRUNE, **(self.raw.get("prune", {}) or {})}
        if target_sparsity is not None:
            values["target_sparsity"] = target_sparsity
        finetune = int(values.pop("finetune_epochs"))
        return PruneSchedule(**values), finetune

    @property
    def bench(self) -> dict:
        return {**DEFAULT_BENCH, **(self.raw.get("bench", {}) or {})}

    @property
    def sample_count(self) -> int:
        return int((self.raw.get("export", {}) or {}).get("sample_count", 50))

    # ---------------------------------------------------------- identity

    def resolved(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["seed"] = self.seed
        out["dataset"] = self.dataset
        out.setdefault("out", "runs")
        return out

    def hash(self) -> str:
        blob = {k: v for k, v in self.resolved().items() if k != "out"}
        return hashlib.sha256(json.dumps(blob, sort_keys=True, default=str).encode()).hexdigest()[:10]

    def run_dir(self, out: str | None = None) -> Path:
        base = Path(out if out is not None else self.raw.get("out", "runs"))
        return base / f"{self.hash()}-s{self.seed}"

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(self.resolved(), fh, sort_keys=True)
        return path
