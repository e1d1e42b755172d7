"""Multi-horizon evaluation, latency benchmarking and hidden-feature export."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datahub import WindowedDataset, ZScore
from .errors import ConfigError
from .model import STGCN, count_flops
from .training import model_dtype

log = logging.getLogger(__name__)

MAPE_EPS = 1e-3
DEFAULT_HORIZONS = (15, 30, 45)


@torch.no_grad()
def predict_sequence(model: STGCN, window, h: int, stats: ZScore | None = None):
    """Roll the one-step model forward ``h`` times.

    Each prediction becomes the newest input graph and the oldest is
    dropped. ``window`` is z-scored, shaped ``(M, N, 1)`` or
    ``(B, M, N, 1)``; outputs are ``(h, N, 1)`` / ``(B, h, N, 1)``,
    denormalised when ``stats`` is given.
    """
    if h < 1:
        raise ConfigError(f"h must be >= 1, got {h}")
    x = torch.as_tensor(window, dtype=model_dtype(model))
    single = x.ndim == 3
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    preds = []
    for _ in range(h):
        y = model(x)  # (B, 1, N, 1)
        preds.append(y)
        x = torch.cat([x[:, 1:], y], dim=1)
    model.train(was_training)
    out = torch.cat(preds, dim=1).cpu().numpy().astype(np.float64)
    if stats is not None:
        out = stats.denormalize(out)
    return out[0] if single else out


def horizon_steps(horizons_minutes=DEFAULT_HORIZONS, interval_minutes: int = 5) -> dict[int, int]:
    steps = {}
    for m in horizons_minutes:
        if m % interval_minutes:
            raise ConfigError(f"horizon {m} min is not a multiple of the {interval_minutes}-min interval")
        steps[m] = m // interval_minutes
    return steps


def mape(pred, true, eps: float = MAPE_EPS) -> float | None:
    pred, true = np.asarray(pred, dtype=np.float64), np.asarray(true, dtype=np.float64)
    keep = np.abs(true) > eps
    if not keep.any():
        return None
    return float(np.mean(np.abs(pred[keep] - true[keep]) / np.abs(true[keep])) * 100.0)


def mae(pred, true) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(true))))


def rmse(pred, true) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(true)) ** 2)))


@dataclass
class HorizonMetrics:
    # minutes -> {"mape": % or None, "mae": ..., "rmse": ...}
    by_horizon: dict[int, dict[str, float | None]] = field(default_factory=dict)

    def __getitem__(self, minutes: int) -> dict:
        return self.by_horizon[minutes]

    def rows(self, model_name: str = "model") -> list[dict]:
        return [{"model": model_name, "horizon_min": m, **v} for m, v in sorted(self.by_horizon.items())]


def metrics_from_predictions(pred, true, horizons_minutes=DEFAULT_HORIZONS, interval_minutes: int = 5) -> HorizonMetrics:
    """``pred`` / ``true``: ``(S, h, N[, 1])`` arrays in original units."""
    out = HorizonMetrics()
    for minutes, step in horizon_steps(horizons_minutes, interval_minutes).items():
        if step > pred.shape[1]:
            continue
        p, t = pred[:, step - 1], true[:, step - 1]
        out.by_horizon[minutes] = {"mape": mape(p, t), "mae": mae(p, t), "rmse": rmse(p, t)}
    return out


def evaluate(
    model: STGCN,
    test: WindowedDataset,
    horizons_minutes=DEFAULT_HORIZONS,
    interval_minutes: int = 5,
    batch_size: int = 256,
) -> HorizonMetrics:
    """MAPE / MAE / RMSE of sequential predictions at each horizon."""
    h = test.targets.shape[1]
    chunks = [
        predict_sequence(model, test.inputs[i : i + batch_size], h, test.stats)
        for i in range(0, len(test), batch_size)
    ]
    pred = np.concatenate(chunks, axis=0)
    return metrics_from_predictions(pred, test.targets, horizons_minutes, interval_minutes)


def write_metrics_csv(results: dict[str, HorizonMetrics], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "horizon_min", "mape", "mae", "rmse"])
        w.writeheader()
        for name, hm in results.items():
            for row in hm.rows(name):
                w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return path


def format_metrics_table(results: dict[str, HorizonMetrics]) -> str:
    """One row per model, columns grouped metric-major then horizon."""
    horizons = sorted({m for hm in results.values() for m in hm.by_horizon})
    head = ["Model"] + [f"{metric.upper()} {m}min" for metric in ("mape", "mae", "rmse") for m in horizons]
    lines = [head]
    for name, hm in results.items():
        row = [name]
        for metric in ("mape", "mae", "rmse"):
            for m in horizons:
                v = hm.by_horizon.get(m, {}).get(metric)
                row.append("-" if v is None else f"{v:.3f}")
        lines.append(row)
    widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(wd) if i else c.ljust(wd) for i, (c, wd) in enumerate(zip(r, widths))) for r in lines)


@dataclass
class BenchReport:
    mean_time: float
    runs: int
    batch: int
    flops: int
    warmup: int = 10

    def to_dict(self) -> dict:
        return {"mean_time_s": self.mean_time, "runs": self.runs, "batch": self.batch, "flops": self.flops, "warmup": self.warmup}


@torch.no_grad()
def benchmark(model: STGCN, n_nodes: int | None = None, batch: int = 1140, runs: int = 100, warmup: int = 10, seed: int = 0) -> BenchReport:
    """Mean wall-clock forward latency over ``runs`` timed passes."""
    cfg = model.config
    N = cfg.n_nodes if n_nodes is None else n_nodes
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, cfg.input_window, N, 1, generator=gen, dtype=model_dtype(model))
    model.eval()
    for _ in range(warmup):
        model(x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - t0)
    return BenchReport(
        mean_time=float(np.mean(times)),
        runs=runs,
        batch=batch,
        flops=count_flops(cfg, N, cfg.input_window, batch),
        warmup=warmup,
    )


@torch.no_grad()
def hidden_features(model: STGCN, x) -> np.ndarray:
    """Final hidden-block output averaged over channels, flattened per sample."""
    model.eval()
    _, taps = model(torch.as_tensor(x, dtype=model_dtype(model)), return_taps=True)
    feat = taps.block_outputs[-1].mean(dim=-1)  # (B, T, N)
    return feat.reshape(feat.shape[0], -1).cpu().numpy().astype(np.float64)


@dataclass
class Projection:
    rows: list[dict]
    explained_variance_ratio: np.ndarray
    n_features: int


def export_hidden_projection(models: dict[str, STGCN], inputs, sample_count: int = 50) -> Projection:
    """Project every model's hidden features onto 2 principal axes fit on the union."""
    available = len(inputs)
    if available < sample_count:
        log.warning("only %d samples available, projecting %d instead of %d", available, available, sample_count)
        sample_count = available
    x = np.asarray(inputs[:sample_count])
    feats = {name: hidden_features(m, x) for name, m in models.items()}
    dims = {f.shape[1] for f in feats.values()}
    if len(dims) != 1:
        raise ConfigError(f"hidden feature sizes differ across models: {dims}")
    stacked = np.concatenate(list(feats.values()), axis=0)
    mu = stacked.mean(axis=0)
    _, s, vt = np.linalg.svd(stacked - mu, full_matrices=False)
    var = s**2
    ratio = var / var.sum() if var.sum() > 0 else np.zeros_like(var)
    axes = vt[:2]
    rows = []
    for name, f in feats.items():
        proj = (f - mu) @ axes.T
        if proj.shape[1] < 2:
            proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
        for i, (a, b) in enumerate(proj):
            rows.append({"model": name, "sample": i, "pc1": float(a), "pc2": float(b)})
    return Projection(rows=rows, explained_variance_ratio=ratio, n_features=stacked.shape[1])


def write_projection_csv(proj: Projection, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "sample", "pc1", "pc2"])
        w.writeheader()
        w.writerows(proj.rows)
    return path
