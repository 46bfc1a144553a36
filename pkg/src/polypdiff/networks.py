"""Network components.

Shape contract: every encoder returns a 4-level pyramid whose level ``j``
(1-based) has ``channels[j-1]`` channels at ``H / 2**(j+1)`` resolution.  All
modules take a leading batch axis.  Activations are smooth (SiLU/GELU) so the
whole model is differentiable everywhere, which the finite-difference tests
rely on.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_LEVELS = 4
PYRAMID_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256)
    encoder: str = "attention"  # or "conv"
    head_dim: int = 64
    recon_dim: int = 32
    latent_channels: int = 1
    num_classes: int = 6
    num_timesteps: int = 1000
    attn_heads: int = 1
    sr_ratios: tuple[int, ...] = (4, 2, 1, 1)
    disc_channels: tuple[int, ...] = (16, 32, 64, 64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("channels", "sr_ratios", "disc_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class MultiTaskPrediction:
    mask_logits: torch.Tensor  # (B, 1, H, W)
    cls_logits: torch.Tensor  # (B, num_classes)
    box: torch.Tensor  # (B, 4) as (xc, yc, w, h) in [0, 1]


def _groups(c: int) -> int:
    for g in (4, 2, 1):
        if c % g == 0:
            return g
    return 1


def norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(_groups(c), c)


def conv_block(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    pad = (k - 1) // 2 if stride == 1 else 0
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, pad), norm(cout), nn.SiLU())


def check_pyramid(levels, channels, height: int, width: int):
    if len(levels) != NUM_LEVELS:
        raise ValueError(f"pyramid needs {NUM_LEVELS} levels, got {len(levels)}")
    for j, (x, c, s) in enumerate(zip(levels, channels, PYRAMID_STRIDES), start=1):
        want = (c, height // s, width // s)
        if tuple(x.shape[-3:]) != want:
            raise ValueError(f"level {j}: expected {want}, got {tuple(x.shape[-3:])}")


def _check_frames(frames: torch.Tensor):
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) frames, got {tuple(frames.shape)}")
    h, w = frames.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"frame size {h}x{w} is not divisible by 32")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


class ConvEncoder(nn.Module):
    """Plain strided-convolution pyramid encoder (fast fallback)."""

    def __init__(self, channels):
        super().__init__()
        stages = []
        cin = 3
        for j, c in enumerate(channels):
            k = 4 if j == 0 else 2
            stages.append(nn.Sequential(conv_block(cin, c, k, stride=k), conv_block(c, c, 3)))
            cin = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        _check_frames(x)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class SpatialReductionAttention(nn.Module):
    """Multi-head self-attention whose keys/values come from an ``sr``-pooled map."""

    def __init__(self, dim: int, heads: int, sr: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr = sr
        if sr > 1:
            self.reduce = nn.Conv2d(dim, dim, sr, sr)
            self.reduce_norm = nn.LayerNorm(dim)

    def forward(self, x, h: int, w: int):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        if self.sr > 1:
            kv_in = x.transpose(1, 2).reshape(b, c, h, w)
            kv_in = self.reduce(kv_in).flatten(2).transpose(1, 2)
            kv_in = self.reduce_norm(kv_in)
        else:
            kv_in = x
        k, v = self.kv(kv_in).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(c // self.heads)
        y = attn.softmax(dim=-1) @ v
        return self.proj(y.transpose(1, 2).reshape(b, n, c))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, heads, sr)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x))


class AttentionEncoder(nn.Module):
    """Four-stage patch-merging transformer encoder.

    Stage 1 embeds 4x4 patches, later stages merge 2x2 neighbourhoods; each
    stage then runs one transformer block with spatially reduced attention.
    """

    def __init__(self, channels, heads: int = 1, sr_ratios=(4, 2, 1, 1)):
        super().__init__()
        self.embeds = nn.ModuleList()
        self.embed_norms = nn.ModuleList()
        self.blocks = nn.ModuleList()
        self.out_norms = nn.ModuleList()
        cin = 3
        for j, c in enumerate(channels):
            k = 4 if j == 0 else 2
            self.embeds.append(nn.Conv2d(cin, c, k, k))
            self.embed_norms.append(nn.LayerNorm(c))
            self.blocks.append(TransformerBlock(c, heads if c % heads == 0 else 1, sr_ratios[j]))
            self.out_norms.append(nn.LayerNorm(c))
            cin = c

    def forward(self, x):
        _check_frames(x)
        out = []
        for embed, n0, block, n1 in zip(self.embeds, self.embed_norms, self.blocks, self.out_norms):
            x = embed(x)
            b, c, h, w = x.shape
            tokens = n0(x.flatten(2).transpose(1, 2))
            tokens = n1(block(tokens, h, w))
            x = tokens.transpose(1, 2).reshape(b, c, h, w)
            out.append(x)
        return out


def make_encoder(cfg: ModelConfig) -> nn.Module:
    if cfg.encoder == "conv":
        return ConvEncoder(cfg.channels)
    if cfg.encoder == "attention":
        return AttentionEncoder(cfg.channels, cfg.attn_heads, cfg.sr_ratios)
    raise ValueError(f"unknown encoder {cfg.encoder!r}")


# ---------------------------------------------------------------------------
# prior fusion (feature pyramid network)
# ---------------------------------------------------------------------------


class PriorFusion(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in channels)
        self.reduce = nn.ModuleList(nn.Conv2d(channels[j + 1], channels[j], 1) for j in range(len(channels) - 1))
        self.smooth = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for c in channels[:-1])

    def topdown(self, levels):
        """Top-down pass: upsample the coarser output, add, smooth."""
        out = [None] * len(levels)
        out[-1] = levels[-1]
        for j in range(len(levels) - 2, -1, -1):
            up = F.interpolate(self.reduce[j](out[j + 1]), size=levels[j].shape[-2:], mode="nearest")
            out[j] = self.smooth[j](levels[j] + up)
        return out

    def forward(self, spatial, temporal):
        lateral = [p(torch.cat([s, r], dim=1)) for p, s, r in zip(self.proj, spatial, temporal)]
        return self.topdown(lateral)


# ---------------------------------------------------------------------------
# denoising head
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DenoiseHead(nn.Module):
    def __init__(self, channels, dim: int, latent_channels: int, num_classes: int, num_timesteps: int):
        super().__init__()
        self.dim = dim
        self.num_timesteps = num_timesteps
        self.unify = nn.ModuleList(nn.Conv2d(c + latent_channels, dim, 1) for c in channels)
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.fuse = nn.Sequential(nn.Conv2d(dim, dim, 1), norm(dim), nn.SiLU(), conv_block(dim, dim, 3))
        self.z0_out = nn.Conv2d(dim, latent_channels, 1)
        self.mask_out = nn.Conv2d(dim, 1, 1)
        self.cls_out = nn.Linear(dim, num_classes)
        self.box_out = nn.Linear(dim, 4)

    def forward(self, z_t, levels, t, out_size):
        if z_t.shape[-2:] != levels[0].shape[-2:]:
            raise ValueError(f"latent {tuple(z_t.shape[-2:])} does not match finest level "
                             f"{tuple(levels[0].shape[-2:])}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and z_t.shape[0] > 1:
            t = t.expand(z_t.shape[0])
        if bool(((t < 0) | (t >= self.num_timesteps)).any()):
            raise ValueError(f"timestep out of range [0, {self.num_timesteps})")
        temb = self.time_mlp(timestep_embedding(t, self.dim).to(z_t.dtype))[:, :, None, None]
        base = levels[0].shape[-2:]
        acc = 0
        for j, (h_j, unify) in enumerate(zip(levels, self.unify)):
            z_j = F.avg_pool2d(z_t, 2 ** j) if j else z_t
            u = F.silu(unify(torch.cat([h_j, z_j], dim=1)) + temb)
            acc = acc + (F.interpolate(u, size=base, mode="bilinear", align_corners=False) if j else u)
        f = self.fuse(acc)
        z0_hat = self.z0_out(f)
        mask_logits = F.interpolate(self.mask_out(f), size=out_size, mode="bilinear", align_corners=False)
        pooled = f.mean(dim=(2, 3))
        pred = MultiTaskPrediction(mask_logits, self.cls_out(pooled), torch.sigmoid(self.box_out(pooled)))
        return z0_hat, pred


# ---------------------------------------------------------------------------
# reconstruction decoder and discriminator
# ---------------------------------------------------------------------------


class ReconstructionDecoder(nn.Module):
    """Predicts the target frame from the temporal pyramid, output in [-1, 1]."""

    def __init__(self, channels, dim: int):
        super().__init__()
        self.unify = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in channels)
        self.fuse = nn.Sequential(nn.Conv2d(dim, dim, 1), norm(dim), nn.SiLU(), conv_block(dim, dim, 3))
        self.out = nn.Conv2d(dim, 3, 1)

    def forward(self, levels, out_size):
        base = levels[0].shape[-2:]
        acc = 0
        for j, (r_j, unify) in enumerate(zip(levels, self.unify)):
            u = F.silu(unify(r_j))
            acc = acc + (F.interpolate(u, size=base, mode="bilinear", align_corners=False) if j else u)
        y = self.out(self.fuse(acc))
        return torch.tanh(F.interpolate(y, size=out_size, mode="bilinear", align_corners=False))


class Discriminator(nn.Module):
    """Strided-convolution real/fake classifier returning logits of shape (B,)."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        layers = []
        cin = 3
        for c in channels:
            layers += [nn.Conv2d(cin, c, 4, 2, 1), nn.SiLU()]
            cin = c
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(cin, 1)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))[:, 0]

    def load_weights(self, state_dict):
        """Load externally trained weights, validating every shape."""
        own = self.state_dict()
        for k, v in state_dict.items():
            if k not in own:
                raise KeyError(f"unexpected discriminator weight {k!r}")
            if tuple(v.shape) != tuple(own[k].shape):
                raise ValueError(f"{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
        self.load_state_dict(state_dict)


class ExternalDiscriminator(nn.Module):
    """Wraps any pretrained classifier ``frames -> logits`` as the discriminator."""

    def __init__(self, classifier: nn.Module, input_size: int | None = None):
        super().__init__()
        self.classifier = classifier
        self.input_size = input_size

    def forward(self, x):
        if self.input_size is not None:
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        logits = self.classifier(x)
        return logits.reshape(x.shape[0], -1)[:, 0]


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

PARAM_GROUPS = ("image_encoder", "temporal_encoder", "fusion", "denoise_head", "recon_decoder", "discriminator")


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.GroupNorm, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class PolypDiffusionNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        if len(cfg.channels) != NUM_LEVELS:
            raise ValueError(f"need {NUM_LEVELS} channel widths, got {cfg.channels}")
        self.cfg = cfg
        self.image_encoder = make_encoder(cfg)
        self.temporal_encoder = make_encoder(cfg)
        self.fusion = PriorFusion(cfg.channels)
        self.denoise_head = DenoiseHead(cfg.channels, cfg.head_dim, cfg.latent_channels,
                                        cfg.num_classes, cfg.num_timesteps)
        self.recon_decoder = ReconstructionDecoder(cfg.channels, cfg.recon_dim)
        self.discriminator = Discriminator(cfg.disc_channels)
        init_weights(self)

    # -- components --------------------------------------------------------
    def image_encode(self, frame):
        return self.image_encoder(frame)

    def temporal_encode(self, frames):
        """Encode ``(B, delta, 3, H, W)`` frames with shared weights, mean over time."""
        if frames.ndim != 5 or frames.shape[1] < 1:
            raise ValueError(f"expected (B, delta>=1, 3, H, W), got {tuple(frames.shape)}")
        b, d = frames.shape[:2]
        levels = self.temporal_encoder(frames.reshape(b * d, *frames.shape[2:]))
        return [x.reshape(b, d, *x.shape[1:]).mean(dim=1) for x in levels]

    def zero_temporal(self, frame):
        b, _, h, w = frame.shape
        return [frame.new_zeros(b, c, h // s, w // s) for c, s in zip(self.cfg.channels, PYRAMID_STRIDES)]

    def fuse_prior(self, spatial, temporal):
        h, w = spatial[0].shape[-2] * 4, spatial[0].shape[-1] * 4
        check_pyramid(spatial, self.cfg.channels, h, w)
        check_pyramid(temporal, self.cfg.channels, h, w)
        return self.fusion(spatial, temporal)

    def denoise(self, z_t, prior, t, out_size=None):
        if out_size is None:
            out_size = (prior[0].shape[-2] * 4, prior[0].shape[-1] * 4)
        return self.denoise_head(z_t, prior, t, out_size)

    def reconstruct(self, temporal, out_size=None):
        if out_size is None:
            out_size = (temporal[0].shape[-2] * 4, temporal[0].shape[-1] * 4)
        check_pyramid(temporal, self.cfg.channels, *out_size)
        return self.recon_decoder(temporal, out_size)

    def discriminate(self, frame):
        if not bool(torch.isfinite(frame).all()):
            raise ValueError("non-finite frame passed to the discriminator")
        return torch.sigmoid(self.discriminator(frame))

    def set_discriminator(self, classifier: nn.Module, input_size: int | None = None):
        """Swap in an externally supplied (e.g. pretrained) classifier as D."""
        self.discriminator = ExternalDiscriminator(classifier, input_size)

    # -- parameter bookkeeping --------------------------------------------------
    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        return {g: [(f"{g}.{n}", p) for n, p in getattr(self, g).named_parameters()] for g in PARAM_GROUPS}

    def generator_parameters(self):
        return [p for g in PARAM_GROUPS if g != "discriminator" for p in getattr(self, g).parameters()]

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())
