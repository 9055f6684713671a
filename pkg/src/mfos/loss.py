"""Confidence-weighted coordinate regression loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ShapeMismatch
from .model import PredictionMaps

Tensor = torch.Tensor


@dataclass(frozen=True)
class LossConfig:
    background_error: float = 1.0
    conf_clamp: float = 5.0

    def __post_init__(self):
        if self.background_error <= 0 or self.conf_clamp <= 0:
            raise ValueError("background_error and conf_clamp must be positive")


def conf_activation(raw, clamp: float = 5.0):
    """tau = exp(clamp(raw, -clamp, clamp)). Floats in, float out; tensors in, tensor out."""
    if isinstance(raw, Tensor):
        return torch.exp(torch.clamp(raw, -clamp, clamp))
    return math.exp(min(max(float(raw), -clamp), clamp))


def regr_loss(pred: PredictionMaps, target_coords: Tensor, target_mask: Tensor,
              cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-pixel Euclidean error on masked pixels, ``background_error`` elsewhere."""
    if pred.coords.shape != target_coords.shape or target_mask.shape != target_coords.shape[:-1]:
        raise ShapeMismatch(
            f"prediction {tuple(pred.coords.shape)} vs target {tuple(target_coords.shape)}")
    diff = pred.coords - target_coords.to(pred.coords.dtype)
    # sqrt(x + 0) has an infinite derivative at 0; add a tiny floor inside the root
    dist = torch.sqrt((diff * diff).sum(dim=-1) + 1e-12)
    bg = torch.full_like(dist, cfg.background_error)
    return torch.where(target_mask.bool(), dist, bg)


def final_loss(pred: PredictionMaps, target_coords: Tensor, target_mask: Tensor,
               cfg: LossConfig = LossConfig(), detach_conf: bool = False) -> Tensor:
    """Mean over pixels (and views) of tau * L_regr - log tau.

    ``detach_conf`` pins tau to 1, leaving the plain mean regression loss.
    """
    lr = regr_loss(pred, target_coords, target_mask, cfg)
    if detach_conf:
        return lr.mean()
    raw = torch.clamp(pred.conf_raw, -cfg.conf_clamp, cfg.conf_clamp)
    if raw.shape != lr.shape:
        raise ShapeMismatch(f"confidence {tuple(raw.shape)} vs coordinates {tuple(lr.shape)}")
    return (torch.exp(raw) * lr - raw).mean()
