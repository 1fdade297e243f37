"""Decomposition, adversarial and contrastive objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

CONTRAST_MODES = ("denominator_with_positive", "negatives_only")
GAN_MODES = ("logistic", "least_squares")

NORM_TOLERANCE = 1e-3
# raw PatchGAN scores are clamped here before the logistic
LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class LossWeights:
    recon_weight: float = 1.0
    lambda_sparse: float = 0.1
    delta_adv: float = 1.0
    mu_layer: float = 1.0
    sigma_loc: float = 1.0
    tau: float = 0.77

    def __post_init__(self):
        for name in ("recon_weight", "lambda_sparse", "delta_adv", "mu_layer", "sigma_loc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class LossReport:
    recon: float = 0.0
    sparse: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    layer_con: float = 0.0
    loc_con: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(*xs):
    if any(x.shape != xs[0].shape for x in xs[1:]):
        raise ValueError(f"shape mismatch: {[tuple(x.shape) for x in xs]}")


def reconstruction_loss(b, r, o):
    """Mean of ``(B + R - O)^2``."""
    _same_shape(b, r, o)
    return ((b + r - o) ** 2).mean()


def rain_sparsity(r):
    return r.abs().mean()


def gan_losses(d_fake, d_real, d_fake_detached=None, mode: str = "logistic"):
    """Generator and discriminator GAN losses from raw PatchGAN score maps.

    ``d_fake`` carries gradient to the generator; ``d_fake_detached`` (scores
    of the detached fake, defaulting to ``d_fake.detach()``) feeds the
    discriminator loss. Logistic mode is the non-saturating form.
    """
    if mode not in GAN_MODES:
        raise ValueError(f"unknown GAN mode {mode!r}")
    if d_fake_detached is None:
        d_fake_detached = d_fake.detach()
    d_fake = d_fake.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    d_real = d_real.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    d_fake_detached = d_fake_detached.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
    if mode == "logistic":
        # -log s(x) = softplus(-x);  -log(1 - s(x)) = softplus(x)
        adv_g = F.softplus(-d_fake).mean()
        adv_d = F.softplus(-d_real).mean() + F.softplus(d_fake_detached).mean()
    else:
        adv_g = ((d_fake - 1) ** 2).mean()
        adv_d = ((d_real - 1) ** 2).mean() + (d_fake_detached ** 2).mean()
    return adv_g, adv_d


def adversarial_losses(disc, b_fake, b_real, mode: str = "logistic"):
    """``(adv_g, adv_d)`` for a fake background batch against a clean batch."""
    return gan_losses(disc(b_fake), disc(b_real), disc(b_fake.detach()), mode)


def check_unit_norm(*features):
    for f in features:
        norms = f.detach().norm(dim=-1)
        if norms.numel() and (norms - 1).abs().max() > NORM_TOLERANCE:
            raise ValueError("contrastive features must be L2-normalised")


def info_nce(anchors, positives, negatives, tau: float, mode: str = "denominator_with_positive", pos_mask=None):
    """Mean ``-log`` softmax ratio of each (anchor, positive) pair against negatives.

    anchors ``(A, d)``; positives ``(A, K, d)``; negatives ``(M, d)`` shared by
    all anchors or ``(A, M, d)`` per anchor; ``pos_mask`` ``(A, K)`` marks
    which positive slots are real.
    """
    if mode not in CONTRAST_MODES:
        raise ValueError(f"unknown contrast mode {mode!r}")
    if negatives.shape[-2] == 0:
        raise ValueError("empty negative set")
    check_unit_norm(anchors, positives, negatives)
    pos_logits = torch.einsum("ad,akd->ak", anchors, positives) / tau
    if negatives.dim() == 2:
        neg_logits = anchors @ negatives.T / tau
    else:
        neg_logits = torch.einsum("ad,amd->am", anchors, negatives) / tau
    neg_lse = torch.logsumexp(neg_logits, dim=1, keepdim=True)  # (A, 1)
    if mode == "negatives_only":
        losses = neg_lse - pos_logits
    else:
        # log(exp(p) + sum exp(n)) - p, via logaddexp for stability
        losses = torch.logaddexp(pos_logits, neg_lse) - pos_logits
    if pos_mask is None:
        return losses.mean()
    pos_mask = pos_mask.to(losses.dtype)
    return (losses * pos_mask).sum() / pos_mask.sum()


def group_positives(features, groups):
    """For each row, the other members of its group, padded, with a mask.

    Returns ``(positives (A, K, d), mask (A, K))`` with ``K`` the largest group
    size minus one.
    """
    groups = torch.as_tensor(groups)
    same = groups[:, None] == groups[None, :]
    same.fill_diagonal_(False)
    k = max(int(same.sum(1).max()), 1)
    # stable order: positive index j sorted ascending within each row
    order = torch.argsort((~same).to(torch.int8), dim=1, stable=True)[:, :k]
    mask = torch.gather(same, 1, order)
    return features[order], mask


def layer_contrastive(
    f_anchor_b, f_pos_b, f_neg_r, f_anchor_r, f_pos_r, f_neg_b, tau: float,
    mode: str = "denominator_with_positive", pos_mask_b=None, pos_mask_r=None,
):
    """Two-sided layer contrast: background vs rain and rain vs background.

    Each side is :func:`info_nce` over its anchors, their non-local positives
    and the other layer's features as negatives; the result is the mean of
    the two sides.
    """
    side_b = info_nce(f_anchor_b, f_pos_b, f_neg_r, tau, mode, pos_mask_b)
    side_r = info_nce(f_anchor_r, f_pos_r, f_neg_b, tau, mode, pos_mask_r)
    return 0.5 * (side_b + side_r)


def location_contrastive(v_o_query, v_b_query, v_o_negatives, tau: float):
    """PatchNCE over locations.

    ``v_b_query`` ``(N, d)`` is the anchor, ``v_o_query`` ``(N, d)`` the one
    positive at the same location, ``v_o_negatives`` ``(N, M, d)`` the
    observation features at each query's negative locations.
    """
    _same_shape(v_o_query, v_b_query)
    return info_nce(v_b_query, v_o_query[:, None, :], v_o_negatives, tau)


def total_generator_loss(recon, sparse, adv_g, layer_con, loc_con, weights: LossWeights):
    return (
        weights.recon_weight * recon
        + weights.lambda_sparse * sparse
        + weights.delta_adv * adv_g
        + weights.mu_layer * layer_con
        + weights.sigma_loc * loc_con
    )

