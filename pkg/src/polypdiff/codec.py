"""Mask <-> latent codec.

A binary mask is area-pooled by 4 and mapped affinely from [0, 1] to
[-b, +b].  Decoding inverts the affine map, clamps to [0, 1] and upsamples.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

LATENT_STRIDE = 4


def encode_mask(mask, scale_b: float = 1.0) -> np.ndarray:
    """Encode an ``H x W`` binary mask into a ``1 x H/4 x W/4`` latent."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary {0, 1}")
    h, w = mask.shape
    if h % LATENT_STRIDE or w % LATENT_STRIDE:
        raise ValueError(f"mask dimensions {mask.shape} not divisible by {LATENT_STRIDE}")
    s = LATENT_STRIDE
    pooled = mask.astype(np.float64).reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    return ((2.0 * pooled - 1.0) * scale_b)[None]


def encode_mask_batch(masks: torch.Tensor, scale_b: float = 1.0) -> torch.Tensor:
    """Torch version of :func:`encode_mask` for ``(B, 1, H, W)`` float masks."""
    pooled = F.avg_pool2d(masks, LATENT_STRIDE)
    return (2.0 * pooled - 1.0) * scale_b


def latent_to_prob(z: torch.Tensor, scale_b: float = 1.0) -> torch.Tensor:
    return ((z + scale_b) / (2.0 * scale_b)).clamp(0.0, 1.0)


def decode_pred(z0_hat, scale_b: float = 1.0, out_h: int | None = None,
                out_w: int | None = None, mode: str = "nearest") -> np.ndarray:
    """Decode a latent (``C x h x w`` or ``h x w``) into an ``out_h x out_w`` probability map.

    ``mode="nearest"`` replicates each latent cell over its 4x4 block, which
    makes encode -> decode -> binarize exact for block-constant masks;
    ``mode="bilinear"`` gives a smooth map.
    """
    z = np.asarray(z0_hat, dtype=np.float64)
    if z.ndim == 3:
        if z.shape[0] != 1:
            raise ValueError("only single-channel latents can be decoded")
        z = z[0]
    if z.ndim != 2:
        raise ValueError(f"bad latent shape {np.shape(z0_hat)}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite latent")
    out_h = z.shape[0] * LATENT_STRIDE if out_h is None else out_h
    out_w = z.shape[1] * LATENT_STRIDE if out_w is None else out_w
    prob = np.clip((z + scale_b) / (2.0 * scale_b), 0.0, 1.0)
    if prob.shape == (out_h, out_w):
        return prob
    pt = torch.from_numpy(prob)[None, None]
    if mode == "nearest":
        up = F.interpolate(pt, size=(out_h, out_w), mode="nearest")
    elif mode == "bilinear":
        up = F.interpolate(pt, size=(out_h, out_w), mode="bilinear", align_corners=False)
    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    return up[0, 0].numpy().clip(0.0, 1.0)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold``, else 0."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)
