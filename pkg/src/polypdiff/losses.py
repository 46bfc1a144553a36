"""Training objectives.

Every function takes torch tensors (Python floats are promoted) and returns a
0-d tensor, so gradients flow to whichever inputs require them.  Batched
inputs are averaged over the leading batch axis.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

PROB_CLAMP = 1e-7
IOU_SMOOTH = 1.0
NUM_CLASSES = 6


class ProbabilityClampWarning(RuntimeWarning):
    """A probability fed to a log term sat at 0 or 1 and was clamped."""


@dataclass(frozen=True)
class LossWeights:
    seg: float = 0.5
    cls: float = 0.05
    det: float = 0.2
    adv: float = 0.001
    mdm: float = 0.75
    trm: float = 0.25

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _clamp_prob(p: torch.Tensor, warn: bool = False) -> torch.Tensor:
    if warn and bool(((p < PROB_CLAMP) | (p > 1 - PROB_CLAMP)).any()):
        warnings.warn("probability clamped to [1e-7, 1 - 1e-7]", ProbabilityClampWarning, stacklevel=3)
    return p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(prob, target) -> torch.Tensor:
    """Mean binary cross-entropy of clamped probabilities."""
    prob, target = _t(prob), _t(target)
    _same_shape(prob, target, "bce")
    p = _clamp_prob(prob)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def iou_loss(prob, gt) -> torch.Tensor:
    """Soft IoU loss over the last two axes, averaged over the rest."""
    prob, gt = _t(prob), _t(gt)
    _same_shape(prob, gt, "iou_loss")
    inter = (prob * gt).sum(dim=(-2, -1))
    union = prob.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1)) - inter
    return (1 - (inter + IOU_SMOOTH) / (union + IOU_SMOOTH)).mean()


def seg_loss(prob, z0_hat, z0, gt, return_parts: bool = False):
    """Pixel cross-entropy + latent MSE + soft IoU, unweighted."""
    prob, gt = _t(prob), _t(gt)
    z0_hat, z0 = _t(z0_hat), _t(z0)
    _same_shape(z0_hat, z0, "seg_loss latents")
    parts = {
        "ce": bce(prob, gt),
        "mse": F.mse_loss(z0_hat, z0),
        "iou": iou_loss(prob, gt),
    }
    total = parts["ce"] + parts["mse"] + parts["iou"]
    return (total, parts) if return_parts else total


def cls_loss(cls_logits, y_cls) -> torch.Tensor:
    cls_logits = _t(cls_logits)
    y = torch.as_tensor(y_cls, dtype=torch.long)
    if cls_logits.ndim == 1:
        cls_logits, y = cls_logits[None], y.reshape(1)
    if bool(((y < 0) | (y >= cls_logits.shape[-1])).any()):
        raise ValueError(f"class index out of range: {y.tolist()}")
    return F.cross_entropy(cls_logits, y)


def box_loss(box, y_box, kind: str = "bce") -> torch.Tensor:
    """Coordinate-wise BCE between squashed boxes and normalised targets (or L1)."""
    box, y_box = _t(box), _t(y_box)
    y_box = y_box.to(box.dtype)
    _same_shape(box, y_box, "box_loss")
    if kind == "bce":
        return bce(box, y_box)
    if kind == "l1":
        return (box - y_box).abs().mean()
    raise ValueError(f"unknown box loss {kind!r}")


def mdm_loss(seg, cls_logits, y_cls, box, y_box, w: LossWeights = LossWeights(),
             box_kind: str = "bce", return_parts: bool = False):
    """``w.seg * seg + w.cls * CE(cls) + w.det * CE_box(box)``."""
    seg = _t(seg)
    parts = {"cls": cls_loss(cls_logits, y_cls), "det": box_loss(box, y_box, box_kind)}
    total = w.seg * seg + w.cls * parts["cls"] + w.det * parts["det"]
    return (total, parts) if return_parts else total


def disc_loss(d_fake, d_real) -> torch.Tensor:
    """``-log(1 - D(fake)) - log D(real)``, batch-averaged."""
    d_fake, d_real = _t(d_fake), _t(d_real)
    f = _clamp_prob(d_fake, warn=True)
    r = _clamp_prob(d_real, warn=True)
    return (-torch.log1p(-f)).mean() - torch.log(r).mean()


def gen_loss(frame_hat, frame, d_fake, lambda_adv: float = 0.001, return_parts: bool = False):
    """Reconstruction MSE minus ``lambda_adv * log D(fake)``."""
    frame_hat, frame = _t(frame_hat), _t(frame)
    _same_shape(frame_hat, frame, "gen_loss")
    mse = F.mse_loss(frame_hat, frame)
    if lambda_adv == 0:
        adv = torch.zeros((), dtype=mse.dtype)
    else:
        adv = -torch.log(_clamp_prob(_t(d_fake, mse))).mean()
    total = mse + lambda_adv * adv
    return (total, {"mse": mse, "adv": adv}) if return_parts else total


def total_loss(l_mdm, l_trm, w: LossWeights = LossWeights()) -> torch.Tensor:
    return w.mdm * _t(l_mdm) + w.trm * _t(l_trm)

