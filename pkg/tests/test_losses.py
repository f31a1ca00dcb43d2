import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from residualgan.losses import (
    LossBundle,
    StageAWeights,
    StageBWeights,
    adv_loss_wgan,
    cycle_loss,
    generator_adv_loss,
    gradient_penalty,
    osa_disc_loss,
    seg_adv_loss,
    seg_ce_loss,
    stage_a_total,
    stage_b_total,
)

TOL = 1e-6


# -- Wasserstein terms ---------------------------------------------------------


def test_wgan_equal_scores_is_zero():
    c = torch.full((4,), 0.37)
    assert adv_loss_wgan(c, c).item() == 0.0


def test_wgan_mean_difference():
    real = torch.tensor([1.0, 3.0])
    fake = torch.tensor([-2.0, 0.0])
    assert adv_loss_wgan(real, fake).item() == pytest.approx(3.0, abs=TOL)


@given(st.floats(-10, 10), st.integers(0, 10_000))
def test_wgan_linear_in_scale(alpha, seed):
    g = torch.Generator().manual_seed(seed)
    real, fake = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    assert adv_loss_wgan(alpha * real, alpha * fake).item() == pytest.approx(
        alpha * adv_loss_wgan(real, fake).item(), abs=TOL)


def test_wgan_rejects_nan_and_empty():
    with pytest.raises(ValueError):
        adv_loss_wgan(torch.tensor([float("nan")]), torch.zeros(1))
    with pytest.raises(ValueError):
        adv_loss_wgan(torch.zeros(0), torch.zeros(1))


def test_generator_term_has_same_gradient_as_critic_objective():
    fake = torch.randn(6, requires_grad=True)
    real = torch.randn(6)
    (g1,) = torch.autograd.grad(adv_loss_wgan(real, fake), fake)
    (g2,) = torch.autograd.grad(generator_adv_loss(fake), fake)
    assert torch.allclose(g1, g2)


# -- gradient penalty ----------------------------------------------------------


def test_gp_linear_critic_closed_form():
    real, fake = torch.rand(3, 2, 5, 5, dtype=torch.float64), torch.rand(3, 2, 5, 5, dtype=torch.float64)
    n = 2 * 5 * 5
    gp = gradient_penalty(lambda x: x.flatten(1).sum(1), real, fake, gp_weight=10.0)
    assert gp.item() == pytest.approx(10.0 * (math.sqrt(n) - 1) ** 2, abs=TOL)


def test_gp_constant_critic():
    real, fake = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    gp = gradient_penalty(lambda x: torch.ones(x.shape[0]), real, fake, gp_weight=10.0)
    assert gp.item() == pytest.approx(10.0, abs=TOL)


def test_gp_zero_weight():
    real, fake = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    assert gradient_penalty(lambda x: (x**2).sum((1, 2, 3)), real, fake, gp_weight=0.0).item() == 0.0


def test_gp_requires_tensors():
    with pytest.raises(TypeError):
        gradient_penalty(lambda x: x.sum(), np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        gradient_penalty(lambda x: x.sum(), torch.zeros(1, 3), torch.zeros(2, 3))


def test_gp_uses_per_sample_interpolation():
    # With critic x -> sum(w * x) the gradient is w regardless of eps, so use a
    # quadratic critic: grad = 2 x_hat, and x_hat must lie on each sample's segment.
    torch.manual_seed(0)
    real, fake = torch.rand(4, 1, 3, 3, dtype=torch.float64), torch.rand(4, 1, 3, 3, dtype=torch.float64)
    seen = []

    def critic(x):
        seen.append(x.detach().clone())
        return (x**2).flatten(1).sum(1)

    gradient_penalty(critic, real, fake, generator=torch.Generator().manual_seed(1))
    x_hat = seen[0]
    for i in range(4):
        d = (real[i] - fake[i]).flatten()
        t = ((x_hat[i] - fake[i]).flatten() @ d) / (d @ d)
        assert 0 <= t.item() <= 1
        assert torch.allclose(x_hat[i], t * real[i] + (1 - t) * fake[i], atol=1e-12)


class TinyCritic(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(2, 3, 3, padding=1)
        self.c2 = nn.Conv2d(3, 1, 3, padding=1)

    def forward(self, x):
        return self.c2(torch.tanh(self.c1(x)))


def test_gp_weight_gradient_matches_finite_differences():
    torch.manual_seed(0)
    critic = TinyCritic().double()
    real, fake = torch.rand(2, 2, 5, 5, dtype=torch.float64), torch.rand(2, 2, 5, 5, dtype=torch.float64)

    def gp():
        return gradient_penalty(critic, real, fake, 10.0, generator=torch.Generator().manual_seed(3))

    params = list(critic.parameters())
    # the output bias does not touch the input gradient, so autograd leaves it unused
    auto = torch.autograd.grad(gp(), params, allow_unused=True)
    auto = torch.cat([(torch.zeros_like(p) if g is None else g).flatten() for p, g in zip(params, auto)])

    h = 1e-6
    numeric = []
    for p in params:
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = gp().item()
            flat[i] = orig - h
            down = gp().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (auto - numeric).norm() / numeric.norm()
    assert rel.item() < 1e-3


# -- cycle and stage A total ---------------------------------------------------


def test_cycle_perfect_is_zero():
    a, b = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 4, 4)
    assert cycle_loss(a, a, b, b).item() == 0.0


def test_cycle_constant_offset():
    a, b = torch.rand(2, 3, 8, 8, dtype=torch.float64), torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert cycle_loss(a, a + 0.5, b, b).item() == pytest.approx(0.5, abs=TOL)


def test_cycle_symmetric():
    a, ac = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    b, bc = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
    assert cycle_loss(a, ac, b, bc).item() == pytest.approx(cycle_loss(b, bc, a, ac).item(), abs=TOL)
    with pytest.raises(ValueError):
        cycle_loss(a, b, b, b)


def test_stage_a_total_examples():
    w = StageAWeights()
    assert (w.lambda_adv, w.lambda_cyc) == (1.0, 10.0)
    assert stage_a_total(0.0, 0.0, 0.0, w) == 0.0
    assert stage_a_total(1.0, 2.0, 0.5, w) == pytest.approx(8.0, abs=TOL)
    w2 = StageAWeights(lambda_cyc=20.0, lambda_adv=2.0)
    assert stage_a_total(1.0, 2.0, 0.5, w2) == pytest.approx(16.0, abs=TOL)


@pytest.mark.parametrize("lc,la", [(0.0, 0.0), (10.0, 1.0), (3.5, 0.25)])
def test_stage_a_total_linear_in_weights(lc, la):
    adv_st, adv_ts, cyc = 0.3, -1.2, 0.7
    got = stage_a_total(adv_st, adv_ts, cyc, StageAWeights(lc, la))
    assert got == pytest.approx(lc * cyc + la * (adv_st + adv_ts), abs=1e-12)


# -- stage B terms -------------------------------------------------------------


def test_osa_half_is_two_log_two():
    half = torch.full((2, 1, 4, 4), 0.5)
    assert osa_disc_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=TOL)
    logits0 = torch.zeros(2, 1, 4, 4)
    assert osa_disc_loss(logits0, logits0, from_logits=True).item() == pytest.approx(2 * math.log(2), abs=TOL)


def test_osa_perfect_discrimination():
    loss = osa_disc_loss(torch.ones(3), torch.zeros(3)).item()
    assert 0 <= loss < 1e-6


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_osa_nonnegative(ps, pt):
    assert osa_disc_loss(torch.tensor(ps), torch.tensor(pt)).item() >= 0


def test_seg_adv_printed_form():
    assert seg_adv_loss(torch.full((4,), 0.5)).item() == pytest.approx(math.log(0.5), abs=TOL)
    fooled = seg_adv_loss(torch.ones(4)).item()
    assert fooled < -10
    assert seg_adv_loss(torch.full((4,), 0.5), variant="nonsaturating").item() == pytest.approx(math.log(2), abs=TOL)
    with pytest.raises(ValueError):
        seg_adv_loss(torch.zeros(0))


def test_adversarial_consistency_monotone():
    # As D gets better at flagging target outputs (p_t -> 0), its own loss falls
    # and the segmenter's adversarial term rises.
    p_s = torch.tensor([0.7])
    grid = torch.linspace(0.95, 0.05, 19)
    d_loss = [osa_disc_loss(p_s, p.view(1)).item() for p in grid]
    g_loss = [seg_adv_loss(p.view(1)).item() for p in grid]
    assert all(b < a for a, b in zip(d_loss, d_loss[1:]))
    assert all(b > a for a, b in zip(g_loss, g_loss[1:]))


def test_ce_uniform_logits():
    logits = torch.zeros(2, 6, 4, 4, dtype=torch.float64)
    labels = torch.randint(0, 6, (2, 4, 4))
    assert seg_ce_loss(logits, labels).item() == pytest.approx(math.log(6), abs=TOL)


def test_ce_confident_correct_is_near_zero():
    labels = torch.randint(0, 6, (1, 5, 5))
    logits = 50.0 * nn.functional.one_hot(labels, 6).permute(0, 3, 1, 2).double()
    assert seg_ce_loss(logits, labels).item() < 1e-6


def test_ce_permutation_invariant():
    logits = torch.randn(2, 6, 4, 4)
    labels = torch.randint(0, 6, (2, 4, 4))
    perm = torch.randperm(6)
    inv = torch.argsort(perm)
    # channel c of the permuted logits holds old channel perm[c]; old label l moves to inv[l]
    assert seg_ce_loss(logits[:, perm], inv[labels]).item() == pytest.approx(seg_ce_loss(logits, labels).item(), abs=TOL)


def test_ce_ignore_index():
    logits = torch.randn(1, 6, 2, 2)
    labels = torch.tensor([[[255, 1], [2, 255]]])
    full = seg_ce_loss(logits[..., [0, 1], [1, 0]].view(1, 6, 1, 2), labels[..., [0, 1], [1, 0]].view(1, 1, 2))
    assert seg_ce_loss(logits, labels, ignore_index=255).item() == pytest.approx(full.item(), abs=TOL)
    with pytest.raises(ValueError):
        seg_ce_loss(logits, torch.full((1, 2, 2), 255), ignore_index=255)


def test_stage_b_total_examples():
    w = StageBWeights()
    assert (w.lambda_seg, w.lambda_adv_o) == (1.0, 0.02)
    assert stage_b_total(1.0, -0.693, w) == pytest.approx(0.98614, abs=TOL)
    assert stage_b_total(1.3, -5.0, StageBWeights(1.0, 0.0)) == 1.3


@pytest.mark.parametrize("ls,la", [(1.0, 0.02), (0.5, 0.0), (2.0, 0.3)])
def test_stage_b_total_linear_in_weights(ls, la):
    assert stage_b_total(0.8, -0.4, StageBWeights(ls, la)) == pytest.approx(ls * 0.8 + la * -0.4, abs=1e-12)


def test_loss_bundle_total_is_weighted_sum():
    b = LossBundle({"a": torch.tensor(2.0), "b": torch.tensor(-1.0)}, {"a": 0.5, "b": 3.0})
    assert b.total.item() == pytest.approx(-2.0)
    assert b.scalars() == {"a": 2.0, "b": -1.0, "total": -2.0}


def test_weights_reject_negatives():
    with pytest.raises(ValueError):
        StageAWeights(lambda_cyc=-1)
    with pytest.raises(ValueError):
        StageBWeights(lambda_adv_o=-0.1)
