import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stkd.errors import ArchitecturePairingError, ConfigError, ShapeError
from stkd.losses import (
    LossWeights,
    correlation_tensor_spatial,
    correlation_tensor_temporal,
    distillation_loss,
    kl_divergence,
    loss_ord,
    loss_rd_kl,
    loss_rd_l2,
    loss_scd,
    loss_stcd,
    loss_tcd,
    ord_routing,
    target_loss,
)
from stkd.model import FeatureTaps

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# ------------------------------------------------------------ brute-force oracles


def brute_tcd_tensor(F):
    B, T, N, C = F.shape
    out = np.zeros((B, N, T, T))
    for b in range(B):
        for n in range(N):
            for i in range(T):
                for j in range(T):
                    out[b, n, i, j] = sum(abs(F[b, i, n, c] - F[b, j, n, c]) for c in range(C)) / C
    return out


def brute_scd_tensor(F):
    B, T, N, C = F.shape
    out = np.zeros((B, T, N, N))
    for b in range(B):
        for s in range(T):
            for i in range(N):
                for j in range(N):
                    out[b, s, i, j] = sum(abs(F[b, s, i, c] - F[b, s, j, c]) for c in range(C)) / C
    return out


def brute_pair_loss(A, Bt):
    # mean |A - B| over i < j of the last two axes, all leading indices
    K = A.shape[-1]
    if K < 2:
        return 0.0
    lead = A.shape[:-2]
    total, count = 0.0, 0
    for idx in np.ndindex(*lead):
        for i in range(K):
            for j in range(i + 1, K):
                total += abs(A[idx + (i, j)] - Bt[idx + (i, j)])
                count += 1
    return total / count


def random_dims(rng):
    return tuple(int(v) for v in rng.integers(1, 5, size=4))


def test_tcd_tensor_matches_nested_loops_on_100_draws():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        F = rng.normal(size=random_dims(rng))
        got = correlation_tensor_temporal(t(F)).numpy()
        worst = max(worst, np.abs(got - brute_tcd_tensor(F)).max())
    assert worst < 1e-6


def test_scd_tensor_matches_nested_loops_on_100_draws():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        F = rng.normal(size=random_dims(rng))
        got = correlation_tensor_spatial(t(F)).numpy()
        worst = max(worst, np.abs(got - brute_scd_tensor(F)).max())
    assert worst < 1e-6


def test_tcd_scd_losses_match_nested_loops_with_unequal_channels():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        B, T, N, Cs = random_dims(rng)
        Ct = int(rng.integers(1, 5))
        Fs, Ft = rng.normal(size=(B, T, N, Cs)), rng.normal(size=(B, T, N, Ct))
        got_t = loss_tcd([t(Fs)], [t(Ft)]).item()
        got_s = loss_scd([t(Fs)], [t(Ft)]).item()
        exp_t = brute_pair_loss(brute_tcd_tensor(Fs), brute_tcd_tensor(Ft))
        exp_s = brute_pair_loss(brute_scd_tensor(Fs), brute_scd_tensor(Ft))
        worst = max(worst, abs(got_t - exp_t), abs(got_s - exp_s))
    assert worst < 1e-6


def test_tap_losses_average_over_tap_pairs():
    rng = np.random.default_rng(3)
    a = [t(rng.normal(size=(2, 3, 4, 2))), t(rng.normal(size=(2, 5, 4, 3)))]
    b = [t(rng.normal(size=(2, 3, 4, 5))), t(rng.normal(size=(2, 5, 4, 1)))]
    per = [loss_tcd([x], [y]).item() for x, y in zip(a, b)]
    assert loss_tcd(a, b).item() == pytest.approx(np.mean(per), abs=1e-12)


# ------------------------------------------------------------ hand examples


def test_tcd_hand_example():
    F = torch.zeros(1, 2, 1, 2, dtype=D)
    F[0, :, 0, :] = t([[1, 3], [2, 5]])
    tcd = correlation_tensor_temporal(F)
    assert tcd[0, 0, 0, 1].item() == pytest.approx(1.5)
    assert tcd[0, 0, 1, 0].item() == pytest.approx(1.5)
    assert tcd[0, 0, 0, 0].item() == 0.0


def test_tcd_constant_in_time_is_zero():
    F = t(np.random.default_rng(0).normal(size=(2, 1, 3, 4))).expand(2, 5, 3, 4)
    assert not correlation_tensor_temporal(F).any()


def test_correlation_tensors_symmetric_zero_diagonal():
    F = t(np.random.default_rng(0).normal(size=(2, 4, 3, 2)))
    for c in (correlation_tensor_temporal(F), correlation_tensor_spatial(F)):
        torch.testing.assert_close(c, c.transpose(-1, -2))
        assert not torch.diagonal(c, dim1=-2, dim2=-1).any()


def test_scd_hand_example():
    Ft = t([0, 1, 3]).reshape(1, 1, 3, 1)
    Fs = t([0, 2, 3]).reshape(1, 1, 3, 1)
    assert loss_scd([Fs], [Ft]).item() == pytest.approx(2 / 3)


def test_scd_constant_across_nodes_is_zero():
    rng = np.random.default_rng(0)
    Fs = t(rng.normal(size=(2, 3, 1, 2))).expand(2, 3, 4, 2)
    Ft = t(rng.normal(size=(2, 3, 1, 5))).expand(2, 3, 4, 5)
    assert loss_scd([Fs], [Ft]).item() == 0.0


def test_tcd_zero_for_channel_duplicated_student():
    rng = np.random.default_rng(0)
    Ft = t(rng.normal(size=(2, 5, 3, 1)))
    Fs = Ft.expand(2, 5, 3, 4)  # four copies of the teacher channel
    assert loss_tcd([Fs], [Ft]).item() == pytest.approx(0.0, abs=1e-15)


def test_tcd_invariant_under_reflection_and_shift():
    rng = np.random.default_rng(0)
    Fs, Ft = t(rng.normal(size=(2, 5, 3, 2))), t(rng.normal(size=(2, 5, 3, 3)))
    assert loss_tcd([7.0 - Fs], [Ft]).item() == pytest.approx(loss_tcd([Fs], [Ft]).item(), abs=1e-12)


def test_rd_l2_hand_example():
    assert loss_rd_l2(t([0.0]), t([1.0]), t([2.0]), 0.5).item() == pytest.approx(1.5)


def test_rd_l2_beta_zero_is_target_loss():
    rng = np.random.default_rng(0)
    ys, yt, y = (t(rng.normal(size=(3, 4))) for _ in range(3))
    assert loss_rd_l2(ys, yt, y, 0.0).item() == pytest.approx(target_loss(ys, y).item())


def test_kl_hand_example():
    ys = t([[math.log(3.0), 0.0]])  # softmax -> [0.75, 0.25]
    yt = t([[0.0, 0.0]])  # softmax -> [0.5, 0.5]
    expected = 0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)
    assert kl_divergence(ys, yt).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.1438, abs=1e-4)


def test_kl_zero_for_equal_responses():
    y = t(np.random.default_rng(0).normal(size=(3, 5)) * 20)
    assert kl_divergence(y, y).abs().max().item() == 0.0
    assert loss_rd_kl(y, y, y + 1.0, 1.0).item() == 0.0


def test_ord_hand_example():
    # D_raw = [0, 1, 2] normalises to [0, 0.5, 1]; with alpha1 = 0.4 nodes 2 and 3 use the teacher
    target = t([[0.0, 0.0, 0.0]])
    y_t = t([[0.0, 1.0, 2.0]])
    y_s = t([[0.5, 0.5, 0.5]])
    route = ord_routing(y_t, target, 0.4)
    assert route.tolist() == [[False, True, True]]
    res = loss_ord(y_s, y_t, target, 0.4)
    assert res.teacher_ratio == pytest.approx(2 / 3)
    assert res.loss.item() == pytest.approx((0.5 + 0.5 + 1.5) / 3)


def test_ord_perfect_teacher_routes_nothing():
    rng = np.random.default_rng(0)
    y, ys = t(rng.normal(size=(4, 5))), t(rng.normal(size=(4, 5)))
    res = loss_ord(ys, y.clone(), y, 0.3)
    assert res.routed == 0
    assert res.loss.item() == pytest.approx(target_loss(ys, y).item())


def test_ord_alpha_one_routes_nothing():
    rng = np.random.default_rng(0)
    ys, yt, y = (t(rng.normal(size=(6, 7))) for _ in range(3))
    assert loss_ord(ys, yt, y, 1.0).routed == 0


def test_stcd_mixing_limits():
    rng = np.random.default_rng(0)
    ys, yt, y = (t(rng.normal(size=(2, 3))) for _ in range(3))
    taps_s = FeatureTaps([t(rng.normal(size=(2, 4, 3, 2)))], [t(rng.normal(size=(2, 4, 3, 2)))])
    taps_t = FeatureTaps([t(rng.normal(size=(2, 4, 3, 5)))], [t(rng.normal(size=(2, 4, 3, 5)))])
    ord_only = loss_ord(ys, yt, y, 0.3).loss.item()
    assert loss_stcd(ys, yt, y, taps_s, taps_t, LossWeights(0.3, 0.7, 0.0)).loss.item() == pytest.approx(ord_only)
    both = loss_stcd(ys, yt, y, taps_s, taps_t, LossWeights(0.3, 1.0, 1.0)).loss.item()
    assert both == pytest.approx(ord_only + loss_scd(taps_s.spatial, taps_t.spatial).item())


def test_tcd_scd_ablation_kinds():
    rng = np.random.default_rng(1)
    ys, yt, y = (t(rng.normal(size=(2, 3))) for _ in range(3))
    taps_s = FeatureTaps([t(rng.normal(size=(2, 4, 3, 2)))], [t(rng.normal(size=(2, 4, 3, 2)))])
    taps_t = FeatureTaps([t(rng.normal(size=(2, 4, 3, 5)))], [t(rng.normal(size=(2, 4, 3, 5)))])
    w = LossWeights(0.3, 0.4, 0.8)
    ord_only = loss_ord(ys, yt, y, 0.3).loss.item()
    tcd = distillation_loss("tcd", ys, yt, y, taps_s, taps_t, w).loss.item()
    scd = distillation_loss("scd", ys, yt, y, taps_s, taps_t, w).loss.item()
    assert tcd == pytest.approx(ord_only + 0.8 * loss_tcd(taps_s.temporal, taps_t.temporal).item())
    assert scd == pytest.approx(ord_only + 0.8 * loss_scd(taps_s.spatial, taps_t.spatial).item())


# ------------------------------------------------------------ fixed points


def _self_distillation_inputs(seed=0):
    rng = np.random.default_rng(seed)
    y = t(rng.normal(size=(3, 4)))
    taps = FeatureTaps([t(rng.normal(size=(3, 5, 4, 2)))], [t(rng.normal(size=(3, 5, 4, 2)))])
    return y, taps


@pytest.mark.parametrize("kind", ["none", "rd_l2", "rd_kl", "ord", "tcd", "scd", "stcd"])
def test_every_loss_zero_at_self_distillation(kind):
    y, taps = _self_distillation_inputs()
    w = LossWeights(0.4, 0.5, 0.9, 0.3)
    out = distillation_loss(kind, y.clone(), y.clone(), y.clone(), taps, taps, w)
    assert out.loss.item() == 0.0


def test_unknown_kind_and_bad_weights():
    y, taps = _self_distillation_inputs()
    with pytest.raises(ConfigError):
        distillation_loss("mse", y, y, y, taps, taps, LossWeights())
    with pytest.raises(ConfigError):
        LossWeights(alpha1=1.5)
    with pytest.raises(ConfigError):
        LossWeights(alpha3=-1)
    with pytest.raises(ConfigError):
        loss_rd_l2(y, y, y, 2.0)


def test_shape_and_pairing_errors():
    y = torch.zeros(2, 3, dtype=D)
    with pytest.raises(ShapeError):
        loss_rd_l2(y, torch.zeros(2, 4, dtype=D), y, 0.5)
    with pytest.raises(ArchitecturePairingError):
        loss_tcd([torch.zeros(1, 4, 3, 2, dtype=D)], [torch.zeros(1, 5, 3, 2, dtype=D)])
    with pytest.raises(ArchitecturePairingError):
        loss_scd([torch.zeros(1, 4, 3, 2, dtype=D)], [])


# ------------------------------------------------------------ gradients


def _fd_check(fn, inputs, eps=1e-6):
    """Central finite differences against autograd; returns the worst relative error."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    fn(*inputs).backward()
    worst = 0.0
    for x in inputs:
        # response-only losses leave the taps without a gradient
        analytic = torch.zeros_like(x).reshape(-1) if x.grad is None else x.grad.reshape(-1)
        fd = torch.zeros_like(analytic)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            up = fn(*inputs).item()
            flat[i] = old - eps
            down = fn(*inputs).item()
            flat[i] = old
            fd[i] = (up - down) / (2 * eps)
        err = (analytic - fd).norm().item()
        worst = max(worst, err / fd.norm().item() if fd.norm() > 0 else err)
    return worst


@pytest.mark.parametrize("kind", ["rd_l2", "rd_kl", "ord", "tcd", "scd", "stcd"])
def test_loss_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    yt, y = t(rng.normal(size=(2, 4))), t(rng.normal(size=(2, 4)))
    ys = t(rng.normal(size=(2, 4)))
    ft_tmp, ft_sp = t(rng.normal(size=(2, 4, 4, 3))), t(rng.normal(size=(2, 4, 4, 3)))
    fs_tmp, fs_sp = t(rng.normal(size=(2, 4, 4, 2))), t(rng.normal(size=(2, 4, 4, 2)))
    w = LossWeights(0.4, 0.6, 0.7, 0.35)

    def fn(ys_, a, b):
        taps_s = FeatureTaps([a], [b])
        taps_t = FeatureTaps([ft_tmp], [ft_sp])
        return distillation_loss(kind, ys_, yt, y, taps_s, taps_t, w).loss

    assert _fd_check(fn, [ys, fs_tmp, fs_sp]) < 1e-4


# ------------------------------------------------------------ properties


@settings(max_examples=100, deadline=None)
@given(
    d=st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=8),
    a=st.floats(0.01, 100),
    c=st.floats(0, 50),
    alpha1=st.floats(0, 1),
)
def test_ord_routing_affine_invariant(d, a, c, alpha1):
    d = np.asarray(d)
    span = d.max() - d.min()
    # keep clear of the threshold so float rounding cannot flip a node
    if span > 0 and np.min(np.abs((d - d.min()) / span - alpha1)) < 1e-6:
        return
    target = torch.zeros(1, d.size, dtype=D)
    base = ord_routing(t(d)[None], target, alpha1)
    moved = ord_routing(t(a * d + c)[None], target, alpha1)
    assert torch.equal(base, moved)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_node_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    B, T, N = 2, 3, 4
    ys, yt, y = (t(rng.normal(size=(B, N)) * 5) for _ in range(3))
    taps_s = FeatureTaps([t(rng.normal(size=(B, T, N, 2)))], [t(rng.normal(size=(B, T, N, 2)))])
    taps_t = FeatureTaps([t(rng.normal(size=(B, T, N, 3)))], [t(rng.normal(size=(B, T, N, 3)))])
    perm = torch.as_tensor(rng.permutation(N))

    def p_taps(taps):
        return FeatureTaps([x[:, :, perm] for x in taps.temporal], [x[:, :, perm] for x in taps.spatial])

    w = LossWeights(0.3, 0.5, 0.7, 0.4)
    for kind in ("none", "rd_l2", "rd_kl", "ord", "tcd", "scd", "stcd"):
        a = distillation_loss(kind, ys, yt, y, taps_s, taps_t, w)
        b = distillation_loss(kind, ys[:, perm], yt[:, perm], y[:, perm], p_taps(taps_s), p_taps(taps_t), w)
        assert a.loss.item() >= 0
        assert a.loss.item() == pytest.approx(b.loss.item(), rel=1e-12, abs=1e-12)
        assert a.routed == b.routed
