"""Training objectives: adversarial pair, R1, path length, perpendicular,
alpha magnitude and multilayer contrastive losses, plus the FreezeD mask."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class LossWeights:
    lambda_perp: float = 1e-4
    lambda_alpha_reg: float = 0.1
    lambda_cl: float = 0.5
    gamma_r1: float = 1.0
    pl_weight: float = 2.0
    # Weight kept by the running path-length mean on each update:
    # a <- pl_decay * a + (1 - pl_decay) * mean_norm.
    pl_decay: float = 0.99
    pl_interval: int = 4
    use_pl: bool = True

    def __post_init__(self):
        for name in ("lambda_perp", "lambda_alpha_reg", "lambda_cl", "gamma_r1", "pl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.pl_decay <= 1.0:
            raise ValueError("pl_decay must lie in [0, 1]")
        if self.pl_interval < 1:
            raise ValueError("pl_interval must be >= 1")


def adv_losses(real_logits: torch.Tensor, fake_logits_for_d: torch.Tensor,
               fake_logits_for_g: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Non-saturating logistic losses ``(L_D, L_G)``."""
    if real_logits.numel() == 0 or fake_logits_for_d.numel() == 0 or fake_logits_for_g.numel() == 0:
        raise ValueError("empty logit batch")
    loss_d = F.softplus(fake_logits_for_d).mean() + F.softplus(-real_logits).mean()
    loss_g = F.softplus(-fake_logits_for_g).mean()
    return loss_d, loss_g


def r1_penalty(real_images: torch.Tensor, discriminator: Callable[[torch.Tensor], torch.Tensor],
               gamma: float = 1.0, create_graph: bool = True) -> torch.Tensor:
    """(gamma / 2) * E ||grad_x D(x)||^2 on real images."""
    if gamma == 0:
        return real_images.new_zeros(())
    x = real_images.detach().requires_grad_(True)
    logits = discriminator(x)
    if not logits.requires_grad:
        return real_images.new_zeros(())
    (grad,) = torch.autograd.grad(logits.sum(), x, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return real_images.new_zeros(())
    return 0.5 * gamma * grad.square().flatten(1).sum(1).mean()


def path_length_penalty(w_batch: torch.Tensor, synthesis: Callable[[torch.Tensor], torch.Tensor],
                        running_a: torch.Tensor, decay: float = 0.99,
                        noise: Optional[torch.Tensor] = None,
                        generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean of (||J^T y|| - a)^2 and the updated running mean.

    ``y`` is standard normal noise shaped like the image (drawn from
    ``generator`` unless given). The norm is divided by sqrt(H * W), so it
    measures the Jacobian per pixel and the penalty does not grow with the
    image area. The penalty uses the incoming ``running_a``; the returned mean
    is ``decay * a + (1 - decay) * batch_mean_norm``.
    """
    if not w_batch.requires_grad:
        w_batch = w_batch.detach().requires_grad_(True)
    img = synthesis(w_batch)
    if noise is None:
        noise = torch.randn(img.shape, generator=generator, dtype=img.dtype, device=img.device)
    if img.requires_grad:
        (grad,) = torch.autograd.grad((img * noise).sum(), w_batch, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(w_batch)
    # sqrt is not differentiable at 0; the tiny floor only matters for a constant map.
    sq = grad.square().flatten(1).sum(1)
    norms = torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch.zeros_like(sq))
    norms = norms / math.sqrt(img.shape[2] * img.shape[3])
    a = running_a.detach().to(norms.dtype)
    penalty = (norms - a).square().mean()
    new_a = decay * a + (1.0 - decay) * norms.detach().mean()
    return penalty, new_a


def _as_rows(w_batch: torch.Tensor, n_rows: int) -> torch.Tensor:
    # Plain (m, d) codes are extended to (m, n_rows, d).
    if w_batch.ndim == 2:
        return w_batch.unsqueeze(1).expand(-1, n_rows, -1)
    return w_batch


def _offset_inner(delta: torch.Tensor, diffs: torch.Tensor) -> torch.Tensor:
    # <delta, diff> over the whole (n_rows, d) extended space.
    if delta.ndim == 1:
        delta = delta.unsqueeze(0)
    diffs = _as_rows(diffs, delta.shape[0])
    return (diffs * delta).flatten(1).sum(1)


def perp_loss_full(delta: torch.Tensor, w_batch: torch.Tensor) -> torch.Tensor:
    """Sum over ordered pairs i != j of <delta, w_i - w_j>^2."""
    if w_batch.shape[0] < 2:
        raise ValueError("perpendicular loss needs at least two codes")
    m = w_batch.shape[0]
    ii, jj = torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")
    mask = ii != jj
    diffs = w_batch[ii[mask]] - w_batch[jj[mask]]
    return _offset_inner(delta, diffs).square().sum()


def perp_loss_simplified(delta: torch.Tensor, w_batch: torch.Tensor) -> torch.Tensor:
    """Sum over consecutive pairs of <delta, w_i - w_{i+1}>^2 (sampling order)."""
    if w_batch.shape[0] < 2:
        raise ValueError("perpendicular loss needs at least two codes")
    diffs = w_batch[:-1] - w_batch[1:]
    return _offset_inner(delta, diffs).square().sum()


def alpha_reg(alphas: torch.Tensor) -> torch.Tensor:
    return alphas.square().mean()


def contrastive_loss(src_feats: Sequence[torch.Tensor], tgt_feats: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers and items of -log softmax_j(cos(tgt_i, src_j))[i]."""
    if len(src_feats) != len(tgt_feats):
        raise ValueError(f"layer sets differ: {len(src_feats)} vs {len(tgt_feats)}")
    if not src_feats:
        raise ValueError("no layers given")
    total = None
    for s, t in zip(src_feats, tgt_feats):
        if s.shape[0] == 0 or s.shape[0] != t.shape[0]:
            raise ValueError("feature batches must be non-empty and aligned")
        s = F.normalize(s.flatten(1), dim=1)
        t = F.normalize(t.flatten(1), dim=1)
        sim = t @ s.T
        term = -torch.diagonal(torch.log_softmax(sim, dim=1)).sum()
        total = term if total is None else total + term
    return total


def contrastive_losses(src_feats_g, tgt_feats_g, src_feats_d, tgt_feats_d):
    """``(L_CL_G, L_CL_D)`` over synthesis-block and discriminator-block features."""
    return contrastive_loss(src_feats_g, tgt_feats_g), contrastive_loss(src_feats_d, tgt_feats_d)


@dataclass(frozen=True)
class FreezePolicy:
    frozen_layer_count: int = 0


def apply_freeze(discriminator: nn.Module, policy: FreezePolicy) -> Dict[str, bool]:
    """Turn off gradients for the lowest ``k`` layers; return a name -> trainable mask."""
    layers = discriminator.layers
    k = policy.frozen_layer_count
    if not 0 <= k <= len(layers):
        raise ValueError(f"cannot freeze {k} of {len(layers)} discriminator layers")
    mask = {}
    for i, layer in enumerate(layers):
        for name, p in layer.named_parameters():
            p.requires_grad_(i >= k)
            mask[f"layers.{i}.{name}"] = i >= k
    return mask


LN2 = math.log(2.0)
