"""Published architecture, hyperparameter and result tables.

Loss presets are addressed as ``"<dataset>-<loss>"`` (e.g. ``"pemsd7-stcd"``)
and pruning presets as ``"<dataset>-prune-<pct>"`` (e.g. ``"pemsd8-prune-97"``).
"""
from __future__ import annotations

from .errors import ConfigError
from .model import BASE_CHANNELS, STUDENT_CHANNELS, TEACHER_CHANNELS

DATASETS = ("pemsd7", "pemsd8")
N_NODES = {"pemsd7": 228, "pemsd8": 170}

ROLE_CHANNELS = {"teacher": TEACHER_CHANNELS, "base": BASE_CHANNELS, "student": STUDENT_CHANNELS}

# parameters, test time (s, batch 1140, 100 runs), FLOPs
MODEL_TABLE = {
    "pemsd7": {
        "teacher": {"parameters": 333_604, "test_time": 3.423, "flops": 49_889_172_087},
        "base": {"parameters": 48_628, "test_time": 1.069, "flops": 9_113_934_711},
        "student": {"parameters": 10_144, "test_time": 0.547, "flops": 1_726_990_455},
    },
    "pemsd8": {
        "teacher": {"parameters": 296_426, "test_time": 2.556, "flops": 40_636_466_453},
        "base": {"parameters": 39_290, "test_time": 0.810, "flops": 5_659_617_749},
        "student": {"parameters": 7_766, "test_time": 0.441, "flops": 1_003_700_933},
    },
}

# batch size, learning rate, alpha1, alpha2, alpha3, beta (None = unused)
LOSS_TABLE = {
    "pemsd7": {
        "rd_l2": dict(batch_size=50, learning_rate=1e-3, beta=0.045),
        "rd_kl": dict(batch_size=50, learning_rate=1e-3, beta=0.007),
        "ord": dict(batch_size=50, learning_rate=1e-3, alpha1=0.593),
        "stcd": dict(batch_size=50, learning_rate=1e-3, alpha1=0.170, alpha2=0.047, alpha3=0.313),
    },
    "pemsd8": {
        "rd_l2": dict(batch_size=50, learning_rate=1e-3, beta=0.905),
        "rd_kl": dict(batch_size=50, learning_rate=1e-3, beta=0.728),
        "ord": dict(batch_size=50, learning_rate=1e-3, alpha1=0.541),
        "stcd": dict(batch_size=50, learning_rate=1e-3, alpha1=0.846, alpha2=0.465, alpha3=0.504),
    },
}

PRUNE_TABLE = {
    "pemsd7": {
        97: dict(batch_size=25, learning_rate=1e-3, alpha1=0.746, alpha2=0.445, alpha3=0.020),
        75: dict(batch_size=50, learning_rate=1e-3, alpha1=0.963, alpha2=0.716, alpha3=0.081),
        50: dict(batch_size=50, learning_rate=1e-3, alpha1=0.935, alpha2=0.981, alpha3=0.129),
        25: dict(batch_size=50, learning_rate=1e-3, alpha1=0.971, alpha2=0.234, alpha3=0.684),
    },
    "pemsd8": {
        97: dict(batch_size=25, learning_rate=1e-3, alpha1=0.099, alpha2=0.091, alpha3=0.531),
        75: dict(batch_size=50, learning_rate=1e-3, alpha1=0.996, alpha2=0.720, alpha3=0.405),
        50: dict(batch_size=50, learning_rate=1e-3, alpha1=0.946, alpha2=0.516, alpha3=0.094),
        25: dict(batch_size=50, learning_rate=1e-3, alpha1=0.748, alpha2=0.324, alpha3=0.868),
    },
}

# Fraction of node terms routed to the teacher over training.
TEACHER_RATIO_TABLE = {
    "pemsd7": {"ord": 0.03009, "scd": 0.01377, "tcd": 0.64637, "stcd": 0.15844},
    "pemsd8": {"ord": 0.00749, "scd": 0.00046, "tcd": 0.00503, "stcd": 0.00103},
}


def _m(*vals):
    # MAPE 15/30/45, MAE 15/30/45, RMSE 15/30/45
    keys = ("mape", "mae", "rmse")
    return {15: {k: vals[3 * i] for i, k in enumerate(keys)},
            30: {k: vals[3 * i + 1] for i, k in enumerate(keys)},
            45: {k: vals[3 * i + 2] for i, k in enumerate(keys)}}


# Reported test metrics keyed by run name (see ``reproduce``).
METRIC_TABLE = {
    "pemsd7": {
        "teacher": _m(5.223, 7.316, 8.739, 2.230, 3.010, 3.565, 4.097, 5.752, 6.834),
        "student_none": _m(6.423, 9.685, 12.298, 2.666, 3.868, 4.799, 4.649, 6.938, 8.610),
        "student_rd_l2": _m(6.379, 9.661, 12.474, 2.768, 4.214, 5.527, 4.709, 7.185, 9.178),
        "student_rd_kl": _m(6.411, 9.527, 11.894, 2.700, 3.938, 4.918, 4.672, 6.984, 8.657),
        "student_ord": _m(6.411, 9.516, 12.104, 2.762, 4.091, 5.221, 4.645, 6.847, 8.569),
        "student_tcd": _m(6.320, 9.411, 11.667, 2.730, 3.966, 4.853, 4.678, 6.899, 8.512),
        "student_scd": _m(6.326, 9.193, 11.380, 2.743, 3.957, 4.866, 4.645, 6.853, 8.476),
        "student_stcd": _m(6.078, 9.043, 11.488, 2.615, 3.776, 4.754, 4.537, 6.678, 8.344),
        "pruned_kd_97": _m(5.691, 8.410, 10.520, 2.470, 3.366, 4.131, 4.264, 6.152, 7.564),
        "base": _m(5.512, 8.004, 9.988, 2.321, 3.216, 3.896, 4.177, 6.006, 7.341),
        "pruned_traditional_75": _m(6.185, 8.981, 11.060, 2.721, 3.889, 4.728, 4.682, 6.947, 8.579),
        "pruned_kd_75": _m(5.950, 8.654, 10.906, 2.544, 3.705, 4.751, 4.406, 6.424, 8.014),
        "pruned_traditional_50": _m(6.571, 9.735, 12.114, 2.975, 4.389, 5.418, 4.858, 7.255, 8.971),
        "pruned_kd_50": _m(6.232, 9.185, 11.419, 2.584, 3.773, 4.723, 4.524, 6.773, 8.448),
        "pruned_traditional_25": _m(7.090, 11.746, 15.940, 2.925, 4.635, 6.034, 4.943, 7.759, 9.967),
        "pruned_kd_25": _m(6.275, 9.436, 12.261, 2.644, 3.783, 4.708, 4.586, 6.680, 8.270),
    },
    "pemsd8": {
        "teacher": _m(2.293, 3.239, 3.925, 1.211, 1.665, 2.031, 2.524, 3.501, 4.081),
        "student_none": _m(2.967, 4.035, 4.734, 1.472, 1.956, 2.294, 2.988, 4.090, 4.706),
        "student_rd_l2": _m(2.812, 3.976, 4.908, 1.426, 1.953, 2.387, 2.839, 3.978, 4.733),
        "student_rd_kl": _m(2.964, 4.179, 5.057, 1.507, 2.125, 2.575, 2.895, 3.971, 4.664),
        "student_ord": _m(2.661, 3.717, 4.553, 1.363, 1.885, 2.285, 2.788, 3.862, 4.573),
        "student_tcd": _m(2.509, 3.497, 4.215, 1.296, 1.747, 2.063, 2.665, 3.716, 4.406),
        "student_scd": _m(2.619, 3.680, 4.457, 1.355, 1.850, 2.214, 2.722, 3.778, 4.478),
        "student_stcd": _m(2.491, 3.375, 4.067, 1.281, 1.719, 2.052, 2.716, 3.707, 4.385),
        "pruned_kd_97": _m(2.379, 3.307, 3.961, 1.248, 1.679, 1.990, 2.597, 3.594, 4.193),
        "base": _m(2.206, 3.028, 3.677, 1.187, 1.592, 1.924, 2.479, 3.434, 4.084),
        "pruned_traditional_75": _m(2.438, 3.459, 4.338, 1.279, 1.781, 2.227, 2.615, 3.644, 4.359),
        "pruned_kd_75": _m(2.427, 3.200, 3.782, 1.236, 1.630, 1.927, 2.672, 3.645, 4.303),
        "pruned_traditional_50": _m(2.456, 3.514, 4.449, 1.322, 1.890, 2.397, 2.648, 3.797, 4.685),
        "pruned_kd_50": _m(2.424, 3.310, 3.988, 1.261, 1.693, 2.029, 2.605, 3.550, 4.169),
        "pruned_traditional_25": _m(2.530, 3.503, 4.275, 1.335, 1.823, 2.225, 2.715, 3.810, 4.596),
        "pruned_kd_25": _m(2.348, 3.192, 3.788, 1.228, 1.627, 1.911, 2.595, 3.577, 4.216),
    },
}


def _dataset(name: str) -> str:
    key = name.lower()
    if key not in DATASETS:
        raise ConfigError(f"unknown dataset preset {name!r}; choose from {DATASETS}")
    return key


def loss_preset(dataset: str, loss_kind: str) -> dict:
    """Training and loss-weight values for a dataset / loss pair.

    Ablation kinds ``tcd`` and ``scd`` reuse the ``stcd`` row.
    """
    table = LOSS_TABLE[_dataset(dataset)]
    key = "stcd" if loss_kind in ("tcd", "scd") else loss_kind
    if key == "none":
        return dict(batch_size=50, learning_rate=1e-3)
    if key not in table:
        raise ConfigError(f"no preset for loss {loss_kind!r} on {dataset}")
    return dict(table[key])


def prune_preset(dataset: str, target_sparsity: float) -> dict:
    pct = int(round(target_sparsity * 100))
    table = PRUNE_TABLE[_dataset(dataset)]
    if pct not in table:
        raise ConfigError(f"no pruning preset for {pct}% on {dataset}; available: {sorted(table)}")
    return dict(table[pct])


def named_preset(name: str) -> dict:
    """Resolve ``"pemsd7-stcd"`` or ``"pemsd8-prune-97"`` style names."""
    parts = name.lower().split("-")
    if len(parts) == 3 and parts[1] == "prune":
        return prune_preset(parts[0], int(parts[2]) / 100)
    if len(parts) == 2:
        return loss_preset(parts[0], parts[1].replace("rdl2", "rd_l2").replace("rdkl", "rd_kl"))
    raise ConfigError(f"cannot parse preset name {name!r}")
