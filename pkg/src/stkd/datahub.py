"""Traffic speed ingestion, graph construction, windowing and synthetic data.

Speed matrices are laid out ``(timestep, station)``. Windowed samples follow
``(sample, time, node, channel)`` with a single speed channel.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    EmptyInputError,
    InsufficientDataError,
    ValidationError,
)

STD_FLOOR = 1e-6


@dataclass
class SpeedMatrix:
    values: np.ndarray
    interval_minutes: int = 5

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] == 0:
            raise DataFormatError(f"speed matrix must be 2-D (timestep, station), got {self.values.shape}")
        if self.interval_minutes <= 0:
            raise ConfigError("interval_minutes must be positive")

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]


@dataclass
class WeightedAdjacency:
    W: np.ndarray
    sigma_sq: float
    epsilon: float

    @property
    def n_nodes(self) -> int:
        return self.W.shape[0]


@dataclass
class ZScore:
    mean: float
    std: float

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": float(self.mean), "std": float(self.std)}


@dataclass
class WindowedDataset:
    """Supervised samples: z-scored inputs and raw-unit targets."""

    inputs: np.ndarray  # (samples, M, N, 1), z-scored
    targets: np.ndarray  # (samples, h, N, 1), original units
    mean: float
    std: float

    @property
    def stats(self) -> ZScore:
        return ZScore(self.mean, self.std)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class SyntheticSpec:
    n_nodes: int = 10
    n_timesteps: int = 2000
    seed: int = 0
    # (amplitude, period in timesteps) pairs
    waves: list[tuple[float, float]] = field(default_factory=lambda: [(10.0, 288.0), (4.0, 36.0)])
    noise_std: float = 1.0
    coupling: float = 0.3
    base_speed: float = 60.0
    interval_minutes: int = 5

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_timesteps < 1:
            raise ConfigError("synthetic spec needs n_nodes >= 1 and n_timesteps >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if not 0.0 <= self.coupling <= 1.0:
            raise ConfigError("coupling must lie in [0, 1]")
        for amp, period in self.waves:
            if period <= 0:
                raise ConfigError(f"wave period must be positive, got {period}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "waves" in d:
            d["waves"] = [tuple(map(float, w)) for w in d["waves"]]
        return cls(**d)


def _read_numeric_csv(path, delimiter: str, header: bool) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows: list[list[float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        if header:
            next(reader, None)
        width = None
        for lineno, row in enumerate(reader, start=2 if header else 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def load_speed_csv(path, delimiter: str = ",", header: bool = False, interval_minutes: int = 5) -> SpeedMatrix:
    """Read a rows=timesteps, columns=stations speed table."""
    return SpeedMatrix(_read_numeric_csv(path, delimiter, header), interval_minutes)


def load_distance_csv(path, delimiter: str = ",", header: bool = False) -> np.ndarray:
    d = _read_numeric_csv(path, delimiter, header)
    if d.shape[0] != d.shape[1]:
        raise DataFormatError(f"{path}: distance matrix must be square, got {d.shape}")
    return d


def clean_speeds(speed: SpeedMatrix) -> SpeedMatrix:
    """Linearly interpolate zero / NaN readings along time, per station."""
    v = speed.values.copy()
    t = np.arange(v.shape[0])
    for j in range(v.shape[1]):
        col = v[:, j]
        bad = ~np.isfinite(col) | (col == 0)
        if not bad.any():
            continue
        if bad.all():
            raise DataFormatError(f"station {j} has no valid readings")
        col[bad] = np.interp(t[bad], t[~bad], col[~bad])
    return SpeedMatrix(v, speed.interval_minutes)


def build_adjacency(distances, sigma_sq: float | None = None, epsilon: float = 0.5, atol: float = 1e-8) -> WeightedAdjacency:
    """Thresholded Gaussian kernel ``W_ij = exp(-d_ij^2 / sigma_sq)``.

    ``sigma_sq`` defaults to the variance of the nonzero off-diagonal
    distances; entries below ``epsilon`` and the diagonal are set to 0.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValidationError(f"distance matrix must be square, got {d.shape}")
    if not np.allclose(d, d.T, atol=atol, rtol=0):
        raise ValidationError("distance matrix is not symmetric")
    if (d < 0).any():
        raise ValidationError("distance matrix has negative entries")
    if not np.allclose(np.diag(d), 0.0, atol=atol):
        raise ValidationError("distance matrix must have a zero diagonal")
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")

    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    if sigma_sq is None:
        nz = d[off & (d > 0)]
        sigma_sq = float(nz.var()) if nz.size > 1 else 1.0
        if sigma_sq <= 0:
            sigma_sq = 1.0
    if sigma_sq <= 0:
        raise ConfigError("sigma_sq must be positive")

    W = np.exp(-(d**2) / sigma_sq)
    W[(W < epsilon) | ~off] = 0.0
    return WeightedAdjacency(W=W, sigma_sq=float(sigma_sq), epsilon=float(epsilon))


def sliding_windows(values: np.ndarray, M: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """All stride-1 (input, target) windows of a ``(T, N)`` array.

    Returns arrays shaped ``(S, M, N, 1)`` and ``(S, h, N, 1)`` with
    ``S = T - M - h + 1``; sample ``s`` starts at timestep ``s``.
    """
    T = values.shape[0]
    S = T - M - h + 1
    if S < 1:
        raise InsufficientDataError(f"need at least {M + h} timesteps for M={M}, h={h}; got {T}", M + h)
    idx = np.arange(S)[:, None]
    x = values[idx + np.arange(M)[None, :]]
    y = values[idx + M + np.arange(h)[None, :]]
    return x[..., None], y[..., None]


def _split_counts(n_samples: int, h: int, ratios) -> tuple[int, int, int] | None:
    # consecutive splits are separated by h-1 purged samples so their target
    # timesteps never overlap
    usable = n_samples - 2 * (h - 1)
    if usable < 3:
        return None
    n_train = int(math.floor(ratios[0] * usable))
    n_val = int(math.floor(ratios[1] * usable))
    n_test = usable - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        return None
    return n_train, n_val, n_test


def split_sample_ranges(n_samples: int, h: int, ratios=(0.7, 0.15, 0.15)) -> list[range]:
    counts = _split_counts(n_samples, h, ratios)
    if counts is None:
        raise InsufficientDataError("not enough samples for a three-way split", 0)
    gap = h - 1
    n_train, n_val, n_test = counts
    train = range(0, n_train)
    val = range(train.stop + gap, train.stop + gap + n_val)
    test = range(val.stop + gap, val.stop + gap + n_test)
    return [train, val, test]


def minimum_timesteps(M: int, h: int, ratios=(0.7, 0.15, 0.15)) -> int:
    T = M + h
    while _split_counts(T - M - h + 1, h, ratios) is None:
        T += 1
    return T


def window(speed: SpeedMatrix | np.ndarray, M: int = 12, h: int = 9, split_ratios=(0.7, 0.15, 0.15)):
    """Chronological train/val/test windowing with train-only z-scoring."""
    values = speed.values if isinstance(speed, SpeedMatrix) else np.asarray(speed, dtype=np.float64)
    if M <= 0 or h <= 0:
        raise ConfigError(f"M and h must be positive, got M={M}, h={h}")
    if len(split_ratios) != 3 or abs(sum(split_ratios) - 1.0) > 1e-9 or min(split_ratios) < 0:
        raise ConfigError(f"split ratios must be three nonnegative values summing to 1, got {split_ratios}")

    T = values.shape[0]
    n_samples = T - M - h + 1
    if n_samples < 1 or _split_counts(n_samples, h, split_ratios) is None:
        need = minimum_timesteps(M, h, split_ratios)
        raise InsufficientDataError(
            f"{T} timesteps is too few for M={M}, h={h}, splits={tuple(split_ratios)}; need at least {need}",
            need,
        )
    x, y = sliding_windows(values, M, h)
    ranges = split_sample_ranges(n_samples, h, split_ratios)

    train = ranges[0]
    # raw timesteps seen by train inputs
    train_values = values[train.start : train.stop - 1 + M]
    mean = float(train_values.mean())
    std = max(float(train_values.std()), STD_FLOOR)
    stats = ZScore(mean, std)

    return tuple(
        WindowedDataset(
            inputs=stats.normalize(x[r.start : r.stop]),
            targets=y[r.start : r.stop].copy(),
            mean=mean,
            std=std,
        )
        for r in ranges
    )


def generate_synthetic(spec: SyntheticSpec) -> tuple[SpeedMatrix, WeightedAdjacency]:
    """Sinusoid-plus-noise speeds on a random 1-D road layout.

    Each node carries the configured waves with its own phase; ``coupling``
    blends a node's signal with the adjacency-weighted mean of its
    neighbours before noise is added.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, T = spec.n_nodes, spec.n_timesteps

    pos = np.sort(rng.uniform(0.0, float(n), size=n))
    dist = np.abs(pos[:, None] - pos[None, :])
    adj = build_adjacency(dist, sigma_sq=1.0, epsilon=0.1)

    phases = rng.uniform(0.0, 2 * np.pi, size=(len(spec.waves), n))
    t = np.arange(T, dtype=np.float64)[:, None]
    own = np.zeros((T, n))
    for k, (amp, period) in enumerate(spec.waves):
        own += amp * np.sin(2 * np.pi * t / period + phases[k][None, :])

    deg = adj.W.sum(axis=1)
    P = np.divide(adj.W, deg[:, None], out=np.zeros_like(adj.W), where=deg[:, None] > 0)
    mixed = (1.0 - spec.coupling) * own + spec.coupling * own @ P.T
    noise = rng.normal(0.0, spec.noise_std, size=(T, n)) if spec.noise_std > 0 else 0.0
    speeds = spec.base_speed + mixed + noise
    return SpeedMatrix(speeds, spec.interval_minutes), adj
