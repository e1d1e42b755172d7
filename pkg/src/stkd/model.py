"""Spatio-temporal graph convolutional network with feature taps and pruning masks.

Layout follows the original ST-GCN: each hidden block is a gated temporal
convolution, a Chebyshev graph convolution and a ReLU temporal convolution,
followed by layer normalisation over (node, channel). The output block
collapses the remaining time axis with a gated convolution, normalises,
applies a 1x1 sigmoid convolution and a per-node linear readout.

Internally tensors are ``(batch, channel, time, node)``; the public
interfaces take ``(batch, time, node, channel)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

TEACHER_CHANNELS = ((1, 32, 64), (64, 32, 128))
BASE_CHANNELS = ((1, 8, 16), (16, 8, 32))
STUDENT_CHANNELS = ((1, 2, 4), (4, 2, 8))


@dataclass
class ModelConfig:
    block_channels: tuple = STUDENT_CHANNELS
    n_nodes: int = 228
    temporal_kernel: int = 3
    spatial_order: int = 3
    input_window: int = 12
    dropout: float = 0.0

    def __post_init__(self):
        self.block_channels = tuple(tuple(int(c) for c in b) for b in self.block_channels)
        self.validate()

    def validate(self) -> None:
        bc = self.block_channels
        if len(bc) != 2 or any(len(b) != 3 for b in bc):
            raise ConfigError(f"block_channels must be two [c_in, c_mid, c_out] triples, got {bc}")
        if bc[1][0] != bc[0][2]:
            raise ConfigError(f"block 2 input channels ({bc[1][0]}) must equal block 1 output channels ({bc[0][2]})")
        if min(c for b in bc for c in b) < 1:
            raise ConfigError("all channel counts must be >= 1")
        if self.temporal_kernel < 1 or self.spatial_order < 1 or self.n_nodes < 1:
            raise ConfigError("temporal_kernel, spatial_order and n_nodes must be positive")
        if self.output_kernel < 1:
            raise ConfigError(
                f"input_window={self.input_window} leaves no timestep for the output block "
                f"(need > {4 * (self.temporal_kernel - 1)})"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def output_kernel(self) -> int:
        return self.input_window - 4 * (self.temporal_kernel - 1)

    def tap_lengths(self) -> list[int]:
        """Time length of each temporal tap, in forward order."""
        step = self.temporal_kernel - 1
        return [self.input_window - k * step for k in range(1, 5)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = [list(b) for b in self.block_channels]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ScaledLaplacian:
    L_tilde: np.ndarray
    lambda_max: float


@dataclass
class FeatureTaps:
    """Post-activation hidden outputs, each shaped ``(batch, T_l, N, C_l)``."""

    temporal: list = field(default_factory=list)
    spatial: list = field(default_factory=list)
    block_outputs: list = field(default_factory=list)


# ---------------------------------------------------------------- graph


def _power_iteration(A: np.ndarray, tol: float = 1e-6, max_iter: int = 10_000) -> float:
    v = np.random.default_rng(0).normal(size=A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def scaled_laplacian(W, degree_floor: float = 1e-6, exact_limit: int = 512) -> ScaledLaplacian:
    """``L~ = 2 L_sym / lambda_max - I`` with ``L_sym = I - D^-1/2 W D^-1/2``."""
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    n = W.shape[0]
    deg = np.maximum(W.sum(axis=1), degree_floor)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    L = np.eye(n) - d_inv_sqrt[:, None] * W * d_inv_sqrt[None, :]
    L = 0.5 * (L + L.T)
    if n <= exact_limit:
        lam = float(np.linalg.eigvalsh(L)[-1])
    else:
        lam = _power_iteration(L)
    L_tilde = 2.0 * L / lam - np.eye(n)
    return ScaledLaplacian(L_tilde=L_tilde, lambda_max=lam)


def chebyshev_basis(L_tilde: np.ndarray, order: int) -> np.ndarray:
    """Stack ``[T_0(L~), ..., T_{order-1}(L~)]`` of shape ``(order, N, N)``."""
    n = L_tilde.shape[0]
    polys = [np.eye(n)]
    if order > 1:
        polys.append(np.asarray(L_tilde, dtype=np.float64))
    for _ in range(2, order):
        polys.append(2.0 * L_tilde @ polys[-1] - polys[-2])
    return np.stack(polys[:order])


# ---------------------------------------------------------------- layers


class _Align(nn.Module):
    """Residual path: 1x1 projection when shrinking, zero-padding when growing."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.proj = nn.Conv2d(c_in, c_out, 1, bias=False) if c_in > c_out else None

    def forward(self, x):
        if self.proj is not None:
            return self.proj(x)
        if self.c_in < self.c_out:
            return F.pad(x, (0, 0, 0, 0, 0, self.c_out - self.c_in))
        return x


class TemporalConv(nn.Module):
    def __init__(self, kernel: int, c_in: int, c_out: int, act: str = "relu"):
        super().__init__()
        if act not in ("glu", "relu", "sigmoid", "linear"):
            raise ConfigError(f"unknown temporal activation {act!r}")
        self.kernel, self.c_out, self.act = kernel, c_out, act
        self.align = _Align(c_in, c_out)
        self.conv = nn.Conv2d(c_in, 2 * c_out if act == "glu" else c_out, (kernel, 1))

    def forward(self, x):
        h = self.conv(x)
        if self.act == "sigmoid":
            return torch.sigmoid(h)
        if self.act == "linear":
            return h
        res = self.align(x)[:, :, self.kernel - 1 :, :]
        if self.act == "glu":
            return (h[:, : self.c_out] + res) * torch.sigmoid(h[:, self.c_out :])
        return torch.relu(h + res)


class ChebGraphConv(nn.Module):
    def __init__(self, order: int, c_in: int, c_out: int):
        super().__init__()
        self.order = order
        self.align = _Align(c_in, c_out)
        self.weight = nn.Parameter(torch.empty(order, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out))
        bound = 1.0 / math.sqrt(order * c_in)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x, basis):
        # x: (B, C, T, N); basis: (K, N, N)
        xk = torch.einsum("kmn,bctn->bkctm", basis, x)
        h = torch.einsum("bkctm,kco->botm", xk, self.weight) + self.bias[None, :, None, None]
        return torch.relu(h + self.align(x))


class NodeChannelNorm(nn.Module):
    """Layer norm over (node, channel) for each (batch, time)."""

    def __init__(self, n_nodes: int, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm([n_nodes, channels])

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class STBlock(nn.Module):
    def __init__(self, channels, n_nodes, kt, ks, dropout):
        super().__init__()
        c_in, c_mid, c_out = channels
        self.temporal1 = TemporalConv(kt, c_in, c_mid, "glu")
        self.spatial = ChebGraphConv(ks, c_mid, c_mid)
        self.temporal2 = TemporalConv(kt, c_mid, c_out, "relu")
        self.norm = NodeChannelNorm(n_nodes, c_out)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, basis, taps=None):
        t1 = self.temporal1(x)
        s = self.spatial(t1, basis)
        t2 = self.temporal2(s)
        out = self.dropout(self.norm(t2))
        if taps is not None:
            taps.temporal += [t1, t2]
            taps.spatial.append(s)
            taps.block_outputs.append(out)
        return out


class OutputBlock(nn.Module):
    def __init__(self, ko, channels, n_nodes):
        super().__init__()
        self.temporal = TemporalConv(ko, channels, channels, "glu")
        self.norm = NodeChannelNorm(n_nodes, channels)
        self.gate = TemporalConv(1, channels, channels, "sigmoid")
        self.readout = nn.Conv2d(channels, 1, 1, bias=False)
        self.node_bias = nn.Parameter(torch.zeros(n_nodes))

    def forward(self, x):
        x = self.gate(self.norm(self.temporal(x)))
        return self.readout(x) + self.node_bias[None, None, None, :]


class STGCN(nn.Module):
    def __init__(self, config: ModelConfig, L_tilde: np.ndarray | None = None):
        super().__init__()
        self.config = config
        c = config
        self.blocks = nn.ModuleList(
            STBlock(ch, c.n_nodes, c.temporal_kernel, c.spatial_order, c.dropout) for ch in c.block_channels
        )
        self.output = OutputBlock(c.output_kernel, c.block_channels[1][2], c.n_nodes)
        self.register_buffer("basis", torch.zeros(c.spatial_order, c.n_nodes, c.n_nodes), persistent=False)
        self.masks: dict[str, torch.Tensor] = {}
        if L_tilde is None:
            L_tilde = np.zeros((c.n_nodes, c.n_nodes))
        self.set_graph(L_tilde)

    def set_graph(self, L_tilde) -> None:
        L = np.asarray(getattr(L_tilde, "L_tilde", L_tilde), dtype=np.float64)
        if L.shape != (self.config.n_nodes, self.config.n_nodes):
            raise ShapeError(f"Laplacian shape {L.shape} does not match n_nodes={self.config.n_nodes}")
        basis = torch.as_tensor(chebyshev_basis(L, self.config.spatial_order))
        self.basis = basis.to(device=self.basis.device, dtype=self.basis.dtype)
        self.laplacian = torch.as_tensor(L)

    def forward(self, x, return_taps: bool = False):
        if x.ndim != 4 or x.shape[2] != self.config.n_nodes or x.shape[3] != 1:
            raise ShapeError(f"expected input (batch, M, {self.config.n_nodes}, 1), got {tuple(x.shape)}")
        if x.shape[1] != self.config.input_window:
            raise ShapeError(f"expected {self.config.input_window} input timesteps, got {x.shape[1]}")
        taps = FeatureTaps() if return_taps else None
        h = x.permute(0, 3, 1, 2)
        for block in self.blocks:
            h = block(h, self.basis, taps)
        y = self.output(h).permute(0, 2, 3, 1)  # (B, 1, N, 1)
        if not return_taps:
            return y
        to_btnc = lambda t: t.permute(0, 2, 3, 1)
        taps.temporal = [to_btnc(t) for t in taps.temporal]
        taps.spatial = [to_btnc(t) for t in taps.spatial]
        taps.block_outputs = [to_btnc(t) for t in taps.block_outputs]
        return y, taps

    # ------------------------------------------------------------ masks

    def maskable_parameters(self) -> dict[str, nn.Parameter]:
        """Weight tensors of the two hidden blocks (no biases, no norms)."""
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("blocks.") and ".norm." not in name and not name.endswith("bias"):
                out[name] = p
        return out

    @torch.no_grad()
    def enforce_masks(self) -> None:
        params = dict(self.named_parameters())
        for name, m in self.masks.items():
            params[name].mul_(m)


def build_model(config: ModelConfig, laplacian=None) -> STGCN:
    config.validate()
    return STGCN(config, laplacian)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward_with_taps(model: STGCN, x, laplacian=None):
    """Prediction ``(B, 1, N, 1)`` plus the hidden feature taps."""
    if laplacian is not None:
        model.set_graph(laplacian)
    return model(x, return_taps=True)


# ---------------------------------------------------------------- masks


MaskSet = dict  # parameter name -> {0,1} tensor, shape-matched


def ones_masks(model: STGCN) -> MaskSet:
    return {n: torch.ones_like(p) for n, p in model.maskable_parameters().items()}


def apply_mask(model: STGCN, masks: MaskSet) -> None:
    """Attach ``masks`` to the model and zero the masked weights.

    The mask is persistent: :meth:`STGCN.enforce_masks` re-zeroes masked
    entries and training loops call it after every optimiser step.
    """
    params = model.maskable_parameters()
    checked = {}
    for name, m in masks.items():
        if name not in params:
            raise ShapeError(f"mask {name!r} does not name a maskable hidden-block weight")
        p = params[name]
        if tuple(m.shape) != tuple(p.shape):
            raise ShapeError(f"mask for {name!r} has shape {tuple(m.shape)}, weight has {tuple(p.shape)}")
        checked[name] = m.detach().to(device=p.device, dtype=p.dtype)
    model.masks = checked
    model.enforce_masks()


def mask_sparsity(masks: MaskSet) -> dict[str, float]:
    return {n: float((m == 0).sum()) / m.numel() for n, m in masks.items()}


# ---------------------------------------------------------------- FLOPs


def _flops_terms(config: ModelConfig, n_nodes: int, input_window: int) -> dict[str, int]:
    """Multiply-accumulate counts per sample, grouped by operation kind."""
    kt, ks = config.temporal_kernel, config.spatial_order
    N, T = n_nodes, input_window
    macs = {"temporal": 0, "graph": 0, "theta": 0, "output": 0}

    def tconv(T_in, kernel, c_in, c_out, glu):
        T_out = T_in - kernel + 1
        m = T_out * N * kernel * c_in * (2 * c_out if glu else c_out)
        if c_in > c_out:
            m += T_out * N * c_in * c_out
        return T_out, m

    for c_in, c_mid, c_out in config.block_channels:
        T, m = tconv(T, kt, c_in, c_mid, True)
        macs["temporal"] += m
        # dense Chebyshev kernel product T_k(L~) x, then the channel mixing
        macs["graph"] += T * c_mid * ks * N * N
        macs["theta"] += T * N * ks * c_mid * c_mid
        T, m = tconv(T, kt, c_mid, c_out, False)
        macs["temporal"] += m
    c = config.block_channels[1][2]
    ko = T
    macs["output"] = N * ko * c * 2 * c + N * c * c + N * c
    return macs


def count_flops(config: ModelConfig, n_nodes: int | None = None, input_window: int | None = None, batch: int = 1) -> int:
    """Forward-pass FLOPs: 2 x multiply-accumulates of convolutions,
    Chebyshev graph products and dense layers, times ``batch``.
    Element-wise work (activations, norms, residual adds) is ignored."""
    N = config.n_nodes if n_nodes is None else n_nodes
    M = config.input_window if input_window is None else input_window
    return 2 * batch * sum(_flops_terms(config, N, M).values())
