"""Distillation-aware importance scoring and joint prune / fine-tune.

Importance of a parameter is the squared product of its gradient and its
value, accumulated over a window of minibatches while the network trains
on the distillation objective, then averaged over the window. Each prune
event masks the lowest-scoring still-active units of every hidden-block
weight tensor, where a unit is a single parameter or a whole output filter.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datahub import WindowedDataset
from .errors import ConfigError, PruningSequenceError, ShapeError
from .losses import LossWeights, OrdResult, target_loss
from .model import STGCN, MaskSet, apply_mask, ones_masks
from .training import TrainConfig, _check_finite, iterate_minibatches, make_kd_step, make_optimizer, model_dtype

log = logging.getLogger(__name__)

GRANULARITIES = ("parameter", "filter")


@dataclass
class PruneSchedule:
    pruning_minibatch: int = 50
    per_event_fraction: float = 0.05
    target_sparsity: float = 0.5
    granularity: str = "parameter"

    def __post_init__(self):
        if self.pruning_minibatch < 1:
            raise ConfigError("pruning_minibatch must be >= 1")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if not 0.0 <= self.target_sparsity <= 1.0:
            raise ConfigError("target_sparsity must lie in [0, 1]")
        if self.target_sparsity > 0 and not 0.0 < self.per_event_fraction <= self.target_sparsity + 1e-12:
            raise ConfigError("need 0 < per_event_fraction <= target_sparsity")


@dataclass
class KdisAccumulator:
    scores: dict[str, torch.Tensor]
    counter: int = 0

    @classmethod
    def for_model(cls, model: STGCN) -> "KdisAccumulator":
        return cls({n: torch.zeros_like(p, dtype=torch.float64) for n, p in model.maskable_parameters().items()})

    def reset(self) -> None:
        for s in self.scores.values():
            s.zero_()
        self.counter = 0


def accumulate_kdis(acc: KdisAccumulator, grads: dict, weights: dict) -> KdisAccumulator:
    """Add one minibatch's ``(g * w)^2`` to every tracked tensor."""
    for name, s in acc.scores.items():
        g, w = grads.get(name), weights[name]
        if g is None:
            g = torch.zeros_like(w)
        if g.shape != s.shape or w.shape != s.shape:
            raise ShapeError(f"{name}: gradient {tuple(g.shape)} / weight {tuple(w.shape)} vs score {tuple(s.shape)}")
        s += (g.detach().double() * w.detach().double()) ** 2
    acc.counter += 1
    return acc


def filter_axis(name: str) -> int:
    # Chebyshev weights are (order, c_in, c_out); conv weights lead with c_out
    return -1 if name.endswith("spatial.weight") else 0


def unit_view(name: str, t: torch.Tensor, granularity: str) -> torch.Tensor:
    """Per-unit scores (or masks) of a tensor as a flat vector."""
    if granularity == "parameter":
        return t.reshape(-1)
    axis = filter_axis(name) % t.ndim
    return t.movedim(axis, 0).reshape(t.shape[axis], -1).sum(dim=1)


def _expand_units(name: str, unit_mask: torch.Tensor, like: torch.Tensor, granularity: str) -> torch.Tensor:
    if granularity == "parameter":
        return unit_mask.reshape(like.shape).to(like.dtype)
    axis = filter_axis(name) % like.ndim
    shape = [1] * like.ndim
    shape[axis] = like.shape[axis]
    return unit_mask.reshape(shape).expand_as(like).to(like.dtype).clone()


def _unit_alive(name, mask, granularity):
    if granularity == "parameter":
        return mask.reshape(-1) != 0
    axis = filter_axis(name) % mask.ndim
    return (mask.movedim(axis, 0).reshape(mask.shape[axis], -1) != 0).all(dim=1)


def target_count(n_units: int, target: float) -> int:
    return int(math.floor(target * n_units + 0.5 + 1e-9))


def layer_complete(name, mask, schedule: PruneSchedule) -> bool:
    alive = _unit_alive(name, mask, schedule.granularity)
    return int((~alive).sum()) >= target_count(alive.numel(), schedule.target_sparsity)


def pruning_complete(masks: MaskSet, schedule: PruneSchedule) -> bool:
    return all(layer_complete(n, m, schedule) for n, m in masks.items())


def unit_sparsity(masks: MaskSet, granularity: str = "parameter") -> dict[str, float]:
    out = {}
    for n, m in masks.items():
        alive = _unit_alive(n, m, granularity)
        out[n] = float((~alive).sum()) / alive.numel()
    return out


@dataclass
class PruneEvent:
    index: int
    step: int
    sparsity: dict[str, float]
    mean_kdis: dict[str, float]
    pruned: dict[str, int]


def prune_event(model: STGCN | None, acc: KdisAccumulator, masks: MaskSet, schedule: PruneSchedule) -> tuple[MaskSet, dict]:
    """Mask the lowest-importance active units of every layer.

    Scores are averaged over the window; ties break towards the lower unit
    index. Each layer loses ``ceil(fraction * n_units)`` units, capped so it
    never passes ``round(target * n_units)``. The accumulator is reset.
    Returns the new mask set and the averaged per-layer mean score.
    """
    if acc.counter != schedule.pruning_minibatch:
        raise PruningSequenceError(
            f"prune event requested after {acc.counter} minibatches; interval is {schedule.pruning_minibatch}"
        )
    new_masks, mean_scores = {}, {}
    for name, mask in masks.items():
        avg = acc.scores[name] / schedule.pruning_minibatch
        mean_scores[name] = float(avg.mean())
        units = unit_view(name, avg, schedule.granularity).cpu().numpy()
        alive = _unit_alive(name, mask, schedule.granularity).cpu().numpy()
        n_units = units.size
        quota = target_count(n_units, schedule.target_sparsity) - int((~alive).sum())
        k = min(math.ceil(schedule.per_event_fraction * n_units - 1e-9), quota)
        if k <= 0:
            new_masks[name] = mask.clone()
            continue
        candidates = np.flatnonzero(alive)
        order = np.argsort(units[candidates], kind="stable")
        drop = candidates[order[:k]]
        keep = torch.as_tensor(alive.copy())
        keep[torch.as_tensor(drop)] = False
        new_masks[name] = mask * _expand_units(name, keep, mask, schedule.granularity)
    acc.reset()
    return new_masks, mean_scores


@dataclass
class PruneResult:
    masks: MaskSet
    model: STGCN
    history: list[PruneEvent] = field(default_factory=list)
    epochs_run: int = 0
    finetune_history: list[dict] = field(default_factory=list)

    def kept_fraction(self) -> float:
        kept = sum(float(m.sum()) for m in self.masks.values())
        total = sum(m.numel() for m in self.masks.values())
        return kept / total


def _prune_loop(
    model: STGCN,
    train_ds: WindowedDataset,
    schedule: PruneSchedule,
    cfg: TrainConfig,
    step_loss,
    epochs_finetune: int,
    callback=None,
    max_epochs: int = 10_000,
) -> PruneResult:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    masks = ones_masks(model)
    apply_mask(model, masks)
    acc = KdisAccumulator.for_model(model)
    opt, sched = make_optimizer(model, cfg)
    dtype = model_dtype(model)
    tracked = model.maskable_parameters()
    result = PruneResult(masks=masks, model=model)
    global_step = 0

    def train_step(x, y, epoch, step):
        out: OrdResult = step_loss(x, y)
        _check_finite(out.loss, epoch, step)
        opt.zero_grad(set_to_none=True)
        out.loss.backward()
        return out

    epoch = 0
    while not pruning_complete(masks, schedule):
        if epoch >= max_epochs:
            raise PruningSequenceError(f"target sparsity not reached after {max_epochs} epochs")
        model.train()
        for step, (x, y) in enumerate(iterate_minibatches(train_ds, cfg.batch_size, True, gen, dtype)):
            train_step(x, y, epoch, step)
            accumulate_kdis(
                acc,
                {n: p.grad for n, p in tracked.items()},
                {n: p for n, p in tracked.items()},
            )
            opt.step()
            model.enforce_masks()
            global_step += 1
            if acc.counter == schedule.pruning_minibatch:
                masks, mean_scores = prune_event(model, acc, masks, schedule)
                apply_mask(model, masks)
                ev = PruneEvent(
                    index=len(result.history) + 1,
                    step=global_step,
                    sparsity=unit_sparsity(masks, schedule.granularity),
                    mean_kdis=mean_scores,
                    pruned={n: int((m == 0).sum()) for n, m in masks.items()},
                )
                result.history.append(ev)
                log.info("prune event %d at step %d: %s", ev.index, ev.step, ev.sparsity)
                if callback is not None:
                    callback(ev, masks, model)
                if pruning_complete(masks, schedule):
                    break
        sched.step()
        epoch += 1

    for ft_epoch in range(epochs_finetune):
        model.train()
        total, n = 0.0, 0
        for step, (x, y) in enumerate(iterate_minibatches(train_ds, cfg.batch_size, True, gen, dtype)):
            out = train_step(x, y, epoch + ft_epoch, step)
            opt.step()
            model.enforce_masks()
            total += float(out.loss.detach())
            n += 1
        sched.step()
        result.finetune_history.append({"epoch": ft_epoch + 1, "train_loss": total / max(n, 1)})

    model.eval()
    result.masks = masks
    result.epochs_run = epoch + epochs_finetune
    return result


def run_kd_pruning(
    teacher: STGCN,
    base_model: STGCN,
    train_ds: WindowedDataset,
    schedule: PruneSchedule,
    loss_weights: LossWeights,
    epochs_finetune: int,
    cfg: TrainConfig,
    callback=None,
) -> PruneResult:
    """Joint KD-pruning: fine-tune a copy of ``base_model`` with the
    spatio-temporal correlation loss, scoring parameters from those
    gradients and pruning on schedule, then fine-tune the masked network."""
    model = copy.deepcopy(base_model)
    step = make_kd_step(model, teacher, loss_weights, "stcd")
    return _prune_loop(model, train_ds, schedule, cfg, step, epochs_finetune, callback)


def traditional_prune_baseline(
    base_model: STGCN,
    train_ds: WindowedDataset,
    schedule: PruneSchedule,
    epochs_finetune: int,
    cfg: TrainConfig,
    callback=None,
) -> PruneResult:
    """Same loop, but importance comes from the target-only regression loss."""
    model = copy.deepcopy(base_model)

    def step(x, y):
        pred = model(x)[:, 0, :, 0]
        return OrdResult(target_loss(pred, y), 0, y.numel())

    return _prune_loop(model, train_ds, schedule, cfg, step, epochs_finetune, callback)


# name used by the original interface listing
run_algorithm1 = run_kd_pruning


def write_history_csv(history: list[PruneEvent], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event", "step", "layer", "sparsity", "masked", "mean_kdis"])
        for ev in history:
            for layer in ev.sparsity:
                w.writerow([ev.index, ev.step, layer, f"{ev.sparsity[layer]:.6f}", ev.pruned[layer], f"{ev.mean_kdis[layer]:.6e}"])
    return path
