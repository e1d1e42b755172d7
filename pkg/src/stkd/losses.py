"""Response- and feature-based distillation objectives.

Responses are ``(batch, node)`` tensors; feature taps are ``(B, T, N, C)``.
The per-node L2 norm of a scalar difference is its absolute value.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ArchitecturePairingError, ConfigError, ShapeError

LOSS_KINDS = ("none", "rd_l2", "rd_kl", "ord", "tcd", "scd", "stcd")


@dataclass
class LossWeights:
    alpha1: float = 0.5
    alpha2: float = 0.5
    alpha3: float = 0.0
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.alpha3 < 0:
            raise ConfigError(f"alpha3 must be >= 0, got {self.alpha3}")


@dataclass
class OrdResult:
    loss: torch.Tensor
    routed: int
    total: int

    @property
    def teacher_ratio(self) -> float:
        return self.routed / self.total if self.total else 0.0


def _check_triple(y_s, y_t, target):
    if not (y_s.shape == y_t.shape == target.shape):
        raise ShapeError(f"response shapes differ: {tuple(y_s.shape)}, {tuple(y_t.shape)}, {tuple(target.shape)}")
    if y_s.ndim == 1:
        y_s, y_t, target = y_s[None], y_t[None], target[None]
    return y_s, y_t, target


def _check_beta(beta):
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")


def target_loss(y_s, target):
    """Plain regression loss: mean per-node absolute error."""
    return (y_s - target).abs().mean()


def loss_rd_l2(y_s, y_t, target, beta: float):
    _check_beta(beta)
    y_s, y_t, target = _check_triple(y_s, y_t, target)
    return (beta * (y_s - y_t).abs() + (1 - beta) * (y_s - target).abs()).mean()


def kl_divergence(y_s, y_t):
    """Per-sample ``sum_i p_t log(p_t / p_s)`` of node-wise softmax distributions."""
    log_ps = torch.log_softmax(y_s, dim=-1)
    log_pt = torch.log_softmax(y_t, dim=-1)
    return (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)


def loss_rd_kl(y_s, y_t, target, beta: float):
    _check_beta(beta)
    y_s, y_t, target = _check_triple(y_s, y_t, target)
    per_sample = beta * kl_divergence(y_s, y_t) + (1 - beta) * (y_s - target).abs().mean(dim=-1)
    return per_sample.mean()


def ord_routing(y_t, target, alpha1: float):
    """Boolean mask of node terms supervised by the teacher.

    Teacher error is min-max normalised per batch element; a row whose
    errors are all equal normalises to zero and routes nothing.
    """
    d = (y_t - target).abs()
    lo = d.min(dim=-1, keepdim=True).values
    hi = d.max(dim=-1, keepdim=True).values
    span = hi - lo
    flat = span == 0
    d_norm = torch.where(flat, torch.zeros_like(d), (d - lo) / torch.where(flat, torch.ones_like(span), span))
    return d_norm > alpha1


def loss_ord(y_s, y_t, target, alpha1: float) -> OrdResult:
    if not 0.0 <= alpha1 <= 1.0:
        raise ConfigError(f"alpha1 must lie in [0, 1], got {alpha1}")
    y_s, y_t, target = _check_triple(y_s, y_t, target)
    with torch.no_grad():
        route = ord_routing(y_t.detach(), target, alpha1)
    terms = torch.where(route, (y_s - y_t).abs(), (y_s - target).abs())
    return OrdResult(loss=terms.mean(), routed=int(route.sum()), total=route.numel())


def correlation_tensor_temporal(F):
    """``TCD[b, n, i, j] = mean_c |F[b, i, n, c] - F[b, j, n, c]|``."""
    B, T, N, C = F.shape
    x = F.permute(0, 2, 1, 3).reshape(B * N, T, C)
    return (torch.cdist(x, x, p=1) / C).reshape(B, N, T, T)


def correlation_tensor_spatial(F):
    """``SCD[b, t, i, j] = mean_c |F[b, t, i, c] - F[b, t, j, c]|``."""
    B, T, N, C = F.shape
    x = F.reshape(B * T, N, C)
    return (torch.cdist(x, x, p=1) / C).reshape(B, T, N, N)


def _pair_mean(a, b):
    # mean of |a - b| over the strict upper triangle of the last two axes
    k = a.shape[-1]
    if k < 2:
        return a.new_zeros(())
    i, j = torch.triu_indices(k, k, offset=1, device=a.device)
    return (a[..., i, j] - b[..., i, j]).abs().mean()


def _check_taps(taps_s, taps_t, kind):
    if len(taps_s) != len(taps_t):
        raise ArchitecturePairingError(f"{kind} tap count mismatch: {len(taps_s)} vs {len(taps_t)}")
    for k, (fs, ft) in enumerate(zip(taps_s, taps_t)):
        if fs.shape[:3] != ft.shape[:3]:
            raise ArchitecturePairingError(
                f"{kind} tap {k}: student (B,T,N)={tuple(fs.shape[:3])} vs teacher {tuple(ft.shape[:3])}"
            )


def loss_tcd(taps_s, taps_t):
    _check_taps(taps_s, taps_t, "temporal")
    if not taps_s:
        raise ArchitecturePairingError("no temporal taps")
    terms = [
        _pair_mean(correlation_tensor_temporal(fs), correlation_tensor_temporal(ft))
        for fs, ft in zip(taps_s, taps_t)
    ]
    return torch.stack(terms).mean()


def loss_scd(taps_s, taps_t):
    _check_taps(taps_s, taps_t, "spatial")
    if not taps_s:
        raise ArchitecturePairingError("no spatial taps")
    terms = [
        _pair_mean(correlation_tensor_spatial(fs), correlation_tensor_spatial(ft))
        for fs, ft in zip(taps_s, taps_t)
    ]
    return torch.stack(terms).mean()


def loss_stcd(y_s, y_t, target, taps_s, taps_t, w: LossWeights) -> OrdResult:
    """``L_ORD + alpha3 * (alpha2 * L_SCD + (1 - alpha2) * L_TCD)``.

    ``taps_s`` / ``taps_t`` are :class:`~stkd.model.FeatureTaps`. The
    returned result carries the routing counts of the response term.
    """
    ord_ = loss_ord(y_s, y_t, target, w.alpha1)
    loss = ord_.loss
    if w.alpha3 != 0:
        hidden = w.alpha2 * loss_scd(taps_s.spatial, taps_t.spatial) + (1 - w.alpha2) * loss_tcd(
            taps_s.temporal, taps_t.temporal
        )
        loss = loss + w.alpha3 * hidden
    return OrdResult(loss=loss, routed=ord_.routed, total=ord_.total)


def distillation_loss(kind: str, y_s, y_t, target, taps_s, taps_t, w: LossWeights) -> OrdResult:
    """Dispatch on ``kind``; non-routing losses report zero routed terms.

    ``tcd`` and ``scd`` are the single-correlation ablations: the routed
    response term plus ``alpha3`` times one hidden-layer term.
    """
    if kind == "none":
        return OrdResult(target_loss(y_s, target), 0, y_s.numel())
    if kind == "rd_l2":
        return OrdResult(loss_rd_l2(y_s, y_t, target, w.beta), 0, y_s.numel())
    if kind == "rd_kl":
        return OrdResult(loss_rd_kl(y_s, y_t, target, w.beta), 0, y_s.numel())
    if kind == "ord":
        return loss_ord(y_s, y_t, target, w.alpha1)
    if kind == "stcd":
        return loss_stcd(y_s, y_t, target, taps_s, taps_t, w)
    if kind in ("tcd", "scd"):
        mix = 0.0 if kind == "tcd" else 1.0
        return loss_stcd(y_s, y_t, target, taps_s, taps_t, LossWeights(w.alpha1, mix, w.alpha3, w.beta))
    raise ConfigError(f"unknown loss kind {kind!r}; choose from {LOSS_KINDS}")
