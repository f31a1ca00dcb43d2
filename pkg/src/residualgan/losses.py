"""Scalar objectives for both training stages.

Stage A: Wasserstein adversarial terms with gradient penalty and an L1
cycle term. Stage B: segmentation cross-entropy plus output-space
adversarial terms (binary cross-entropy for the output discriminator).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass(frozen=True)
class StageAWeights:
    lambda_cyc: float = 10.0
    lambda_adv: float = 1.0
    gp_weight: float = 10.0

    def __post_init__(self):
        if min(self.lambda_cyc, self.lambda_adv, self.gp_weight) < 0:
            raise ValueError("stage A weights must be >= 0")


@dataclass(frozen=True)
class StageBWeights:
    lambda_seg: float = 1.0
    lambda_adv_o: float = 0.02

    def __post_init__(self):
        if min(self.lambda_seg, self.lambda_adv_o) < 0:
            raise ValueError("stage B weights must be >= 0")


@dataclass
class LossBundle:
    """Named loss terms, their weights and the weighted total."""

    terms: dict[str, torch.Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return sum(self.weights.get(k, 0.0) * v for k, v in self.terms.items())

    def scalars(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _check_finite(*ts: torch.Tensor) -> None:
    for t in ts:
        if t.numel() == 0:
            raise ValueError("empty score batch")
        if torch.isnan(t).any():
            raise ValueError("NaN in discriminator scores")


# ------------------------------------------------------------------ stage A


def adv_loss_wgan(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Critic objective ``mean(D(real)) - mean(D(fake))`` (to be maximized)."""
    _check_finite(d_real, d_fake)
    return d_real.mean() - d_fake.mean()


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Generator side of the Wasserstein term; the real-score constant is dropped."""
    _check_finite(d_fake)
    return -d_fake.mean()


def gradient_penalty(
    critic: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    gp_weight: float = 10.0,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """``gp_weight * mean((||grad D(x_hat)||_2 - 1)^2)`` on random interpolates.

    ``x_hat = eps * real + (1 - eps) * fake`` with one ``eps ~ U[0, 1]`` per
    sample. The critic may return per-sample scores or score maps; maps are
    averaged per sample.
    """
    if not (isinstance(real, torch.Tensor) and isinstance(fake, torch.Tensor)):
        raise TypeError("gradient_penalty needs torch tensors (autodiff)")
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if not real.is_floating_point():
        raise TypeError("gradient_penalty needs floating point inputs")
    if gp_weight == 0:
        return real.new_zeros(())
    n = real.shape[0]
    eps = torch.rand((n,) + (1,) * (real.dim() - 1), generator=generator, dtype=real.dtype, device=real.device)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    out = critic(x_hat)
    if out.dim() > 1:
        out = out.reshape(out.shape[0], -1).mean(dim=1)
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norm = grad.reshape(n, -1).norm(2, dim=1)
    return gp_weight * ((norm - 1) ** 2).mean()


def cycle_loss(
    x_src: torch.Tensor, x_src_cycled: torch.Tensor, x_tgt: torch.Tensor, x_tgt_cycled: torch.Tensor
) -> torch.Tensor:
    """Mean absolute reconstruction error of both round trips, summed."""
    if x_src.shape != x_src_cycled.shape or x_tgt.shape != x_tgt_cycled.shape:
        raise ValueError("cycled images must match the originals' shapes")
    return F.l1_loss(x_src_cycled, x_src) + F.l1_loss(x_tgt_cycled, x_tgt)


def stage_a_total(adv_st, adv_ts, cyc, w: StageAWeights):
    return w.lambda_cyc * cyc + w.lambda_adv * (adv_st + adv_ts)


# ------------------------------------------------------------------ stage B


def _probs(x: torch.Tensor, from_logits: bool) -> torch.Tensor:
    p = torch.sigmoid(x) if from_logits else x
    return p.clamp(EPS, 1 - EPS)


def osa_disc_loss(
    d_on_translated: torch.Tensor, d_on_target: torch.Tensor, from_logits: bool = False
) -> torch.Tensor:
    """Binary cross-entropy for the output discriminator.

    Translated-source outputs are labeled 1, target outputs 0:
    ``-E[log(1 - D(f(x_T)))] - E[log D(f(x_S->T))]``.
    """
    _check_finite(d_on_translated, d_on_target)
    p_s = _probs(d_on_translated, from_logits)
    p_t = _probs(d_on_target, from_logits)
    return -torch.log1p(-p_t).mean() - torch.log(p_s).mean()


def seg_adv_loss(d_on_target: torch.Tensor, from_logits: bool = False, variant: str = "printed") -> torch.Tensor:
    """Segmenter's adversarial term on target outputs.

    ``printed``: ``E[log(1 - D(f(x_T)))]``, minimized by pushing D towards 1.
    ``nonsaturating``: ``-E[log D(f(x_T))]``, same optimum, stronger early gradients.
    """
    _check_finite(d_on_target)
    p = _probs(d_on_target, from_logits)
    if variant == "printed":
        return torch.log1p(-p).mean()
    if variant == "nonsaturating":
        return -torch.log(p).mean()
    raise ValueError(f"unknown variant {variant!r}")


def seg_ce_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels. Logits are NCHW."""
    labels = labels.long()
    if ignore_index is not None:
        if not (labels != ignore_index).any():
            raise ValueError("every pixel is ignored")
        return F.cross_entropy(logits, labels, ignore_index=ignore_index)
    return F.cross_entropy(logits, labels)


def stage_b_total(seg, adv_o, w: StageBWeights):
    return w.lambda_seg * seg + w.lambda_adv_o * adv_o
