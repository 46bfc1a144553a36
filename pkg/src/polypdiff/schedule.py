"""Noise schedules, the Gaussian forward process and deterministic reverse steps.

All tables are float64 numpy arrays.  ``forward_diffuse`` and ``reverse_step``
only use elementwise arithmetic, so they accept numpy arrays and torch tensors
alike; randomness is always supplied by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas, kind: str = "custom") -> "NoiseSchedule":
        """Build a schedule from an explicit beta table (zeros allowed)."""
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty vector")
        if np.any(betas < 0) or np.any(betas >= 1) or not np.all(np.isfinite(betas)):
            raise ValueError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        return cls(kind, int(betas.size), float(betas[0]), float(betas[-1]),
                   betas, alphas, alpha_bars)

    def to_dict(self) -> dict:
        # tables are recomputed on load, never stored
        return {"kind": self.kind, "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["kind"], int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def _cosine_betas(T: int, beta_start: float, beta_end: float, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
    betas = 1.0 - f[1:] / f[:-1]
    # clipped into [beta_start, beta_end]
    return np.clip(betas, beta_start, beta_end)


def make_schedule(kind: str = "linear", T: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Construct a linear or cosine beta schedule of ``T`` steps."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        betas = _cosine_betas(T, beta_start, beta_end)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    sched = NoiseSchedule.from_betas(betas, kind=kind)
    if not np.all(sched.alpha_bars > 0):
        raise ValueError("alpha_bar underflowed to zero; use fewer steps or smaller betas")
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end),
                         sched.betas, sched.alphas, sched.alpha_bars)


def make_step_schedule(T: int, K: int) -> np.ndarray:
    """Return ``K + 1`` strictly decreasing timesteps from ``T - 1`` down to 0.

    Timesteps are ``linspace(T - 1, 0, K + 1)`` rounded half-up; because the
    spacing is at least one step this keeps the sequence strictly decreasing.
    """
    if T < 1 or K < 1:
        raise ValueError("T and K must be positive")
    if K > T:
        raise ValueError(f"K={K} exceeds T={T}")
    if K > T - 1:
        # K + 1 distinct timesteps cannot fit in [0, T - 1]
        raise ValueError(f"K={K} needs at least K + 1 = {K + 1} distinct timesteps, T={T}")
    raw = np.linspace(T - 1, 0, K + 1)
    return np.floor(raw + 0.5).astype(np.int64)


def _check_t(t, T: int):
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        if np.any(t_arr != np.round(t_arr)):
            raise ValueError(f"timestep must be integral, got {t!r}")
        t_arr = t_arr.astype(np.int64)
    if np.any(t_arr < 0) or np.any(t_arr >= T):
        raise ValueError(f"timestep out of range [0, {T}): {t!r}")
    return t_arr


def _to_numpy_index(t):
    if hasattr(t, "detach"):
        return t.detach().cpu().numpy()
    return t


def _coef(values: np.ndarray, like):
    """Scalar coefficient, or a per-sample column broadcastable against ``like``."""
    if values.ndim == 0:
        return float(values)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if hasattr(like, "detach"):
        import torch

        return torch.as_tensor(values, dtype=like.dtype, device=like.device).reshape(shape)
    return values.astype(like.dtype, copy=False).reshape(shape)


def _is_finite(x) -> bool:
    if hasattr(x, "detach"):
        import torch

        return bool(torch.isfinite(x).all())
    return bool(np.all(np.isfinite(x)))


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule):
    """Sample ``z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.

    ``t`` is an integer or a length-B vector of per-sample timesteps (the
    leading axis of ``z0`` is then the batch axis).
    """
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    t_arr = _check_t(_to_numpy_index(t), schedule.T)
    abar = schedule.alpha_bars[t_arr]
    return _coef(np.sqrt(abar), z0) * z0 + _coef(np.sqrt(1.0 - abar), z0) * eps


def reverse_step(z_t, z0_hat, t, t_prev, schedule: NoiseSchedule, eta: float = 0.0, noise=None):
    """One reverse-chain update from timestep ``t`` to ``t_prev`` given ``z0_hat``.

    ``t_prev == -1`` emits ``z0_hat``.  With ``eta == 0`` (default) the update is
    deterministic; ``eta > 0`` adds DDIM-style stochasticity using ``noise``.
    """
    t_arr = _check_t(_to_numpy_index(t), schedule.T)
    tp_arr = np.asarray(_to_numpy_index(t_prev))
    if np.any(tp_arr >= t_arr):
        raise ValueError(f"t_prev ({t_prev!r}) must be smaller than t ({t!r})")
    if tuple(z_t.shape) != tuple(z0_hat.shape):
        raise ValueError("z_t and z0_hat shapes differ")
    if not (_is_finite(z_t) and _is_finite(z0_hat)):
        raise ValueError("non-finite input to reverse_step")
    if np.all(tp_arr == -1):
        return z0_hat * 1
    if np.any(tp_arr < -1):
        raise ValueError(f"invalid t_prev {t_prev!r}")
    if np.any(tp_arr == -1):
        raise ValueError("mixed terminal and non-terminal t_prev in one batch")
    tp_arr = _check_t(tp_arr, schedule.T)

    abar_t = schedule.alpha_bars[t_arr]
    abar_p = schedule.alpha_bars[tp_arr]
    eps_hat = (z_t - _coef(np.sqrt(abar_t), z_t) * z0_hat) / _coef(np.sqrt(1.0 - abar_t), z_t)
    if eta == 0.0:
        return _coef(np.sqrt(abar_p), z_t) * z0_hat + _coef(np.sqrt(1.0 - abar_p), z_t) * eps_hat
    if noise is None:
        raise ValueError("stochastic reverse step (eta > 0) needs injected noise")
    sigma = eta * np.sqrt((1.0 - abar_p) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_p)
    dir_coef = np.sqrt(np.clip(1.0 - abar_p - sigma ** 2, 0.0, None))
    return (_coef(np.sqrt(abar_p), z_t) * z0_hat + _coef(dir_coef, z_t) * eps_hat
            + _coef(sigma, z_t) * noise)
