"""Self-describing model archives.

A checkpoint holds the weights, the :class:`ModelConfig`, the graph
Laplacian, the z-score statistics and an optional pruning mask set, plus a
mandatory format version.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .datahub import ZScore
from .errors import MissingArtifactError, ValidationError
from .model import ModelConfig, STGCN, apply_mask, build_model

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict
    laplacian: torch.Tensor
    stats: ZScore | None = None
    masks: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: STGCN, stats: ZScore | None = None, meta: dict | None = None) -> "Checkpoint":
        return cls(
            config=model.config,
            state_dict={k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
            laplacian=model.laplacian.detach().cpu().clone(),
            stats=stats,
            masks={k: v.detach().cpu().clone() for k, v in model.masks.items()} or None,
            meta=dict(meta or {}),
        )

    def build(self) -> STGCN:
        model = build_model(self.config, self.laplacian.double().numpy())
        model.load_state_dict(self.state_dict)
        if self.masks:
            apply_mask(model, self.masks)
        model.eval()
        return model

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "model_config": self.config.to_dict(),
                "state_dict": self.state_dict,
                "laplacian": self.laplacian,
                "stats": self.stats.to_dict() if self.stats else None,
                "masks": self.masks,
                "meta": self.meta,
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"checkpoint not found: {path}")
        blob = torch.load(path, map_location="cpu", weights_only=True)
        version = blob.get("version")
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version!r}")
        stats = blob.get("stats")
        return cls(
            config=ModelConfig.from_dict(blob["model_config"]),
            state_dict=blob["state_dict"],
            laplacian=blob["laplacian"],
            stats=ZScore(**stats) if stats else None,
            masks=blob.get("masks"),
            meta=blob.get("meta") or {},
        )
