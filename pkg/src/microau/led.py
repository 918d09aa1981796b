"""Learnable temporal difference-of-exponentials filter over the frame axis.

A clip is re-weighted along time by an upper-triangular T x T matrix built
from three learnable scalars (gain ``alpha`` and two decay rates ``r1``,
``r2``). Rows are L1-normalized by default so each output frame is a bounded
mix of current and later input frames, which accentuates brief
rise-peak-decay transients.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, DimensionError
from .tensorcore import Rng

RATE_MIN = 1e-4          # open interval (RATE_MIN, 1 - RATE_MIN) for r1, r2
_CLAMP_LO = 1.01e-4      # projection targets strictly inside the interval
_CLAMP_HI = 1.0 - 1.01e-4


@dataclass
class LedConfig:
    alpha_init: float = 1.0
    r1_init: float = 0.4
    r2_init: float = 0.1
    normalize: str = "l1"  # "l1" | "none"

    def validate(self) -> None:
        if self.normalize not in ("l1", "none"):
            raise ConfigurationError(f"led.normalize must be 'l1' or 'none', got {self.normalize!r}")
        for name, r in (("r1_init", self.r1_init), ("r2_init", self.r2_init)):
            if not RATE_MIN < r < 1.0 - RATE_MIN:
                raise ConfigurationError(f"led.{name}={r} outside ({RATE_MIN}, {1 - RATE_MIN})")
        if self.r1_init == self.r2_init:
            raise ConfigurationError("led rates must differ at initialization "
                                     "(equal rates zero out the filter diagonal)")


@dataclass
class LedMatrix:
    w: torch.Tensor  # (T, T)
    normalized: bool


class LedFilter(nn.Module):
    """Holds the three scalar parameters and builds/applies the filter matrix."""

    def __init__(self, cfg: LedConfig | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg = cfg or LedConfig()
        cfg.validate()
        self.cfg = cfg
        self.alpha = nn.Parameter(torch.tensor(cfg.alpha_init, dtype=dtype))
        self.r1 = nn.Parameter(torch.tensor(cfg.r1_init, dtype=dtype))
        self.r2 = nn.Parameter(torch.tensor(cfg.r2_init, dtype=dtype))

    @torch.no_grad()
    def project(self) -> None:
        """Clamp the decay rates strictly inside their open interval (post-step)."""
        self.r1.clamp_(_CLAMP_LO, _CLAMP_HI)
        self.r2.clamp_(_CLAMP_LO, _CLAMP_HI)

    def matrix(self, t: int) -> LedMatrix:
        m = build_led_matrix(self.alpha, self.r1, self.r2, t)
        if self.cfg.normalize == "l1":
            m = normalize_rows(m)
        return m

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        t = video.shape[-3]
        return apply_led(self.matrix(t), video)


def build_led_matrix(alpha: torch.Tensor, r1: torch.Tensor, r2: torch.Tensor,
                     t: int) -> LedMatrix:
    """Unnormalized filter matrix, differentiable in (alpha, r1, r2).

    With 0-based indices, entry (i, j) is 0 below the diagonal,
    alpha*(r1 - r2) on it, and
    alpha*((1-r1)^(j-i) * r1^min(1,i) - (1-r2)^(j-i) * r2^min(1,i)) above it.
    """
    if t < 2:
        raise ConfigurationError(f"filter needs at least 2 frames, got t={t}")
    dtype = alpha.dtype
    idx = torch.arange(t)
    expo = (idx[None, :] - idx[:, None]).to(dtype)          # j - i
    row_pow = (idx[:, None] >= 1).to(dtype).expand(t, t)    # min(1, i)
    upper = (idx[None, :] > idx[:, None]).to(dtype)
    eye = torch.eye(t, dtype=dtype)
    # Powers are evaluated densely and masked; off-support entries multiply by 0.
    term1 = torch.pow(1.0 - r1, expo * upper) * torch.pow(r1, row_pow)
    term2 = torch.pow(1.0 - r2, expo * upper) * torch.pow(r2, row_pow)
    w = alpha * (upper * (term1 - term2) + eye * (r1 - r2))
    return LedMatrix(w=w, normalized=False)


def normalize_rows(m: LedMatrix) -> LedMatrix:
    """Divide each row by max(sum |row|, 1e-8); stays in the autograd graph."""
    row_l1 = m.w.abs().sum(dim=1, keepdim=True)
    w = m.w / torch.clamp(row_l1, min=1e-8)
    return LedMatrix(w=w, normalized=True)


def apply_led(m: LedMatrix, video: torch.Tensor) -> torch.Tensor:
    """Mix frames per pixel: out[t] = sum_t' W[t, t'] * video[t'].

    Accepts (T, H, W) or batched (B, T, H, W); differentiable through both
    the matrix and the video.
    """
    t = m.w.shape[0]
    if video.ndim not in (3, 4) or video.shape[-3] != t:
        raise DimensionError(
            f"video shape {tuple(video.shape)} incompatible with {t}x{t} filter matrix")
    eq = "ts,shw->thw" if video.ndim == 3 else "ts,bshw->bthw"
    return torch.einsum(eq, m.w, video)


def led_oracle_entry(alpha: float, r1: float, r2: float, i: int, j: int) -> float:
    """Scalar reference evaluation of one matrix entry (independent oracle)."""
    if j < i:
        return 0.0
    if j == i:
        return alpha * (r1 - r2)
    e = j - i
    p = min(1, i)
    return alpha * ((1.0 - r1) ** e * r1 ** p - (1.0 - r2) ** e * r2 ** p)
