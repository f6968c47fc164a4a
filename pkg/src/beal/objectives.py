"""Entropy maps, supervised losses and the adversarial objectives."""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-7
DEFAULT_LAMBDA = 0.01


def entropy_map(mask_prob: torch.Tensor, eps: float = EPS, complementary: bool = False) -> torch.Tensor:
    """Per-pixel self-information ``-p log p`` (natural log) of each channel.

    With ``complementary=True`` the full binary entropy
    ``-p log p - (1-p) log(1-p)`` is returned instead.
    """
    p = mask_prob.clamp(eps, 1.0 - eps)
    ent = -p * torch.log(p)
    if complementary:
        ent = ent - (1.0 - p) * torch.log(1.0 - p)
    return ent


def domain_bce(logits: torch.Tensor, label: int) -> torch.Tensor:
    """Mean binary cross-entropy of a logit map against a constant domain label."""
    if label not in (0, 1):
        raise ValueError(f"domain label must be 0 or 1, got {label}")
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, float(label)))


def _check_batch(maps: torch.Tensor, name: str) -> None:
    if maps is None or maps.shape[0] == 0:
        raise ValueError(f"{name} batch is empty")


def _per_sample_bce(logits: torch.Tensor, label: int) -> torch.Tensor:
    target = torch.full_like(logits, float(label))
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none").flatten(1).mean(1)


def discriminator_objective(source_maps: torch.Tensor, target_maps: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """Source maps labelled 1, target maps labelled 0, each averaged over its batch.

    Inputs are detached so this loss never reaches the segmentation network.
    """
    _check_batch(source_maps, "source")
    _check_batch(target_maps, "target")
    src = _per_sample_bce(disc(source_maps.detach()), 1).mean()
    tgt = _per_sample_bce(disc(target_maps.detach()), 0).mean()
    return src + tgt


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Temporarily stop gradients from reaching `module`'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def adversarial_objective(target_maps: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """Target maps scored against the source label, discriminator frozen."""
    _check_batch(target_maps, "target")
    with frozen(disc):
        return _per_sample_bce(disc(target_maps), 1).mean()


def mask_loss(mask_prob: torch.Tensor, od_mask: torch.Tensor | None, oc_mask: torch.Tensor | None,
              eps: float = EPS) -> torch.Tensor:
    """Multi-label BCE averaged over pixels, both channels and the batch."""
    if od_mask is None or oc_mask is None:
        raise ValueError("mask_loss needs disc and cup labels (source domain only)")
    y = torch.stack([od_mask, oc_mask], 1).to(mask_prob.dtype)
    if y.shape != mask_prob.shape:
        raise ValueError(f"label shape {tuple(y.shape)} != prediction shape {tuple(mask_prob.shape)}")
    p = mask_prob.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def boundary_loss(boundary_pred: torch.Tensor, boundary_target: torch.Tensor) -> torch.Tensor:
    if boundary_pred.shape != boundary_target.shape:
        raise ValueError(
            f"boundary shapes differ: {tuple(boundary_pred.shape)} vs {tuple(boundary_target.shape)}"
        )
    return ((boundary_target - boundary_pred) ** 2).mean()


@dataclass
class LossReport:
    l_mask: float = 0.0
    l_boundary: float = 0.0
    l_adv_b: float = 0.0
    l_adv_e: float = 0.0
    l_db: float = 0.0
    l_de: float = 0.0
    total_seg: float = 0.0

    def check_finite(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss term {name} = {value}")

    def to_dict(self) -> dict:
        return asdict(self)


def total_seg_objective(l_mask, l_boundary, l_adv_b, l_adv_e, lam: float = DEFAULT_LAMBDA):
    """Supervised terms plus the weighted adversarial terms; works on floats or tensors."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_mask + l_boundary + lam * (l_adv_b + l_adv_e)
