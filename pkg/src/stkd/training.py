"""Teacher training and teacher-to-student distillation loops."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import Checkpoint
from .datahub import WindowedDataset
from .errors import ArchitecturePairingError, ConfigError, TrainingDivergence
from .losses import LOSS_KINDS, LossWeights, OrdResult, distillation_loss, target_loss
from .model import STGCN

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 1e-3
    lr_decay: float = 0.7
    lr_decay_every: int = 5
    epochs: int = 50
    seed: int = 0
    preset: str | None = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.lr_decay_every <= 0 or self.epochs < 0:
            raise ConfigError("lr_decay_every must be positive and epochs nonnegative")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: STGCN
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_rmse: float = math.inf

    def checkpoint(self, stats, meta: dict | None = None) -> Checkpoint:
        return Checkpoint.from_model(self.model, stats, meta=meta)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``: decays by ``lr_decay`` every ``lr_decay_every`` epochs."""
    return cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def make_optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay)
    return opt, sched


def model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def iterate_minibatches(ds: WindowedDataset, batch_size: int, shuffle: bool = False, generator=None, dtype=torch.float32):
    """Yield ``(x, y)``: z-scored inputs ``(B, M, N, 1)`` and the z-scored
    next-step target ``(B, N)``."""
    n = len(ds)
    order = torch.randperm(n, generator=generator).numpy() if shuffle else np.arange(n)
    y_all = (ds.targets[:, 0, :, 0] - ds.mean) / ds.std
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield (
            torch.as_tensor(ds.inputs[idx], dtype=dtype),
            torch.as_tensor(y_all[idx], dtype=dtype),
        )


@torch.no_grad()
def one_step_rmse(model: STGCN, ds: WindowedDataset, batch_size: int = 256) -> float:
    """Next-step RMSE in original units."""
    was_training = model.training
    model.eval()
    sq, count = 0.0, 0
    for x, y in iterate_minibatches(ds, batch_size, dtype=model_dtype(model)):
        pred = model(x)[:, 0, :, 0]
        sq += float(((pred - y) ** 2).sum()) * ds.std**2
        count += y.numel()
    model.train(was_training)
    return math.sqrt(sq / count) if count else math.nan


def _check_finite(loss, epoch, step):
    if not torch.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss at epoch {epoch + 1}, step {step} (loss={float(loss.detach())})")


def _fit(model, train_ds, val_ds, cfg: TrainConfig, step_loss, extra_epoch_stats=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt, sched = make_optimizer(model, cfg)
    dtype = model_dtype(model)
    result = TrainResult(model=model)
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(cfg.epochs):
        model.train()
        total, batches = 0.0, 0
        routed, counted = 0, 0
        for step, (x, y) in enumerate(iterate_minibatches(train_ds, cfg.batch_size, True, gen, dtype)):
            out: OrdResult = step_loss(x, y)
            _check_finite(out.loss, epoch, step)
            opt.zero_grad(set_to_none=True)
            out.loss.backward()
            opt.step()
            model.enforce_masks()
            total += float(out.loss.detach())
            batches += 1
            routed += out.routed
            counted += out.total
        lr = opt.param_groups[0]["lr"]
        sched.step()
        val_rmse = one_step_rmse(model, val_ds) if val_ds is not None and len(val_ds) else math.nan
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / max(batches, 1), "val_rmse": val_rmse}
        if extra_epoch_stats is not None:
            row.update(extra_epoch_stats(routed, counted))
        result.history.append(row)
        log.info("epoch %d %s", epoch + 1, {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
        if not math.isnan(val_rmse) and val_rmse < result.best_val_rmse:
            result.best_val_rmse = val_rmse
            result.best_epoch = epoch + 1
            best_state = copy.deepcopy(model.state_dict())
        elif math.isnan(val_rmse):
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.enforce_masks()
    model.eval()
    return result


def train_teacher(model: STGCN, train_ds: WindowedDataset, val_ds: WindowedDataset | None, cfg: TrainConfig) -> TrainResult:
    """Target-only training; the best-validation weights are restored at the end."""

    def step_loss(x, y):
        pred = model(x)[:, 0, :, 0]
        return OrdResult(target_loss(pred, y), 0, y.numel())

    return _fit(model, train_ds, val_ds, cfg, step_loss)


def check_tap_pairing(student: STGCN, teacher: STGCN, x) -> None:
    with torch.no_grad():
        _, ts = student(x[:1].to(model_dtype(student)), return_taps=True)
        _, tt = teacher(x[:1].to(model_dtype(teacher)), return_taps=True)
    for kind in ("temporal", "spatial"):
        a, b = getattr(ts, kind), getattr(tt, kind)
        if len(a) != len(b) or any(fa.shape[:3] != fb.shape[:3] for fa, fb in zip(a, b)):
            raise ArchitecturePairingError(
                f"{kind} taps do not pair: student {[tuple(t.shape) for t in a]} vs teacher {[tuple(t.shape) for t in b]}"
            )


def make_kd_step(student: STGCN, teacher: STGCN, loss_weights: LossWeights, loss_kind: str):
    """Return ``step(x, y) -> OrdResult`` running a frozen teacher forward
    and a student forward with taps."""
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}; choose from {LOSS_KINDS}")
    needs_taps = loss_kind in ("tcd", "scd", "stcd")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    def step(x, y):
        if loss_kind == "none":
            return distillation_loss("none", student(x)[:, 0, :, 0], None, y, None, None, loss_weights)
        with torch.no_grad():
            y_t, taps_t = teacher(x.to(model_dtype(teacher)), return_taps=True)
        y_s, taps_s = student(x, return_taps=True)
        y_t = y_t[:, 0, :, 0].to(y_s.dtype)
        return distillation_loss(
            loss_kind, y_s[:, 0, :, 0], y_t, y, taps_s if needs_taps else None, taps_t if needs_taps else None, loss_weights
        )

    return step


def _ratio_stats(routed, counted):
    return {"teacher_routed": routed, "teacher_terms": counted, "teacher_ratio": routed / counted if counted else 0.0}


def train_student_kd(
    student: STGCN,
    teacher: STGCN,
    train_ds: WindowedDataset,
    val_ds: WindowedDataset | None,
    cfg: TrainConfig,
    loss_weights: LossWeights,
    loss_kind: str = "stcd",
) -> TrainResult:
    """Distil ``teacher`` into ``student``; history rows carry the epoch's
    fraction of node terms routed to the teacher."""
    if loss_kind != "none":
        x0, _ = next(iterate_minibatches(train_ds, 1))
        check_tap_pairing(student, teacher, x0)
    step = make_kd_step(student, teacher, loss_weights, loss_kind)
    return _fit(student, train_ds, val_ds, cfg, step, _ratio_stats)
