"""Adversarial, cycle-consistency and Dice objectives.

All functions take torch tensors (any leading batch layout) or Volumes and
return 0-d tensors, so they can be differentiated directly.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .volume import Volume

DICE_EPS = 1e-5
DEFAULT_LAMBDA = 10.0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite loss term {term}: {value}")
        self.term = term


def _t(x) -> torch.Tensor:
    if isinstance(x, Volume):
        return torch.from_numpy(np.array(x.data))
    return torch.as_tensor(x)


def _nonempty(x: torch.Tensor, what: str) -> torch.Tensor:
    if x.numel() == 0:
        raise ValueError(f"{what} is empty")
    return x


def adv_loss_discriminator(real_scores, fake_scores) -> torch.Tensor:
    """Least-squares discriminator loss: mean (real - 1)^2 + mean fake^2."""
    real = _nonempty(_t(real_scores), "real score map")
    fake = _nonempty(_t(fake_scores), "fake score map")
    return ((real - 1.0) ** 2).mean() + (fake**2).mean()


def adv_loss_generator(fake_scores) -> torch.Tensor:
    fake = _nonempty(_t(fake_scores), "fake score map")
    return ((fake - 1.0) ** 2).mean()


def cycle_loss(a, a_rec, b, b_rec) -> torch.Tensor:
    a, a_rec, b, b_rec = map(_t, (a, a_rec, b, b_rec))
    if a.shape != a_rec.shape or b.shape != b_rec.shape:
        raise ValueError(f"cycle shapes differ: {tuple(a.shape)}/{tuple(a_rec.shape)}, {tuple(b.shape)}/{tuple(b_rec.shape)}")
    return (a_rec - a).abs().mean() + (b_rec - b).abs().mean()


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _check_finite(**terms) -> None:
    for name, value in terms.items():
        v = _scalar(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)


@dataclass
class CmftLossReport:
    adv_g_ab: float
    adv_g_ba: float
    adv_d_a: float
    adv_d_b: float
    cyc: float
    lam: float
    total_g: float
    total_d: float

    def to_log(self) -> dict:
        return asdict(self)


def cmft_total(adv_g_ab, adv_g_ba, adv_d_a, adv_d_b, cyc, lam: float = DEFAULT_LAMBDA) -> CmftLossReport:
    """Generator objective adv_g_ab + adv_g_ba + lam * cyc and the summed discriminator loss."""
    parts = dict(adv_g_ab=adv_g_ab, adv_g_ba=adv_g_ba, adv_d_a=adv_d_a, adv_d_b=adv_d_b, cyc=cyc)
    _check_finite(**parts, lam=lam)
    p = {k: _scalar(v) for k, v in parts.items()}
    if p["cyc"] < 0:
        raise ValueError("cycle loss must be non-negative")
    return CmftLossReport(
        **p,
        lam=float(lam),
        total_g=p["adv_g_ab"] + p["adv_g_ba"] + float(lam) * p["cyc"],
        total_d=p["adv_d_a"] + p["adv_d_b"],
    )


def soft_dice_loss(pred, target, eps: float = DICE_EPS, simplex_atol: float = 1e-4) -> torch.Tensor:
    """Mean soft Dice loss over the three tumor channels (channel 0 is background).

    ``pred`` and ``target`` are (4, ...) or (N, 4, ...) tensors; per channel the
    loss is ``1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)``.
    """
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    axis = 0 if pred.dim() == 4 else 1
    if pred.shape[axis] != 4:
        raise ValueError(f"expected 4 channels, got {pred.shape[axis]}")
    with torch.no_grad():
        s = pred.sum(dim=axis)
        if (pred < -simplex_atol).any() or not torch.allclose(s, torch.ones_like(s), atol=simplex_atol, rtol=0):
            raise ValueError("pred is not a per-voxel probability simplex")
    p = pred.movedim(axis, 0).reshape(4, -1)[1:]
    y = target.movedim(axis, 0).reshape(4, -1)[1:].to(p.dtype)
    inter = (p * y).sum(dim=1)
    dice = (2.0 * inter + eps) / (p.sum(dim=1) + y.sum(dim=1) + eps)
    return (1.0 - dice).mean()


@dataclass
class CmffLossReport:
    dice_a: float
    dice_b: float
    dice_f: float
    total: float

    def to_log(self) -> dict:
        return asdict(self)


def cmff_total(pred_a, pred_b, pred_f, target) -> tuple[torch.Tensor, CmffLossReport]:
    """Unweighted sum of the three heads' Dice losses; returns (differentiable total, report)."""
    terms = {
        "dice_a": soft_dice_loss(pred_a, target),
        "dice_b": soft_dice_loss(pred_b, target),
        "dice_f": soft_dice_loss(pred_f, target),
    }
    _check_finite(**terms)
    total = terms["dice_a"] + terms["dice_b"] + terms["dice_f"]
    vals = {k: _scalar(v) for k, v in terms.items()}
    return total, CmffLossReport(**vals, total=sum(vals.values()))
