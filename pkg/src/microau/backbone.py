"""Two-block 3D CNN producing spatially resolved mid-level features and a
global high-level vector, with a squeeze-excitation gate after block two.

Block layout: conv3d -> batchnorm -> ReLU -> 2x2 spatial max-pool, twice,
with the SE gate between block two's activation and its pool. The mid-level
tap is the post-pool map of block two (before dropout, so its eval and train
values agree up to batch-norm statistics); dropout is applied downstream on
the copy that feeds the high-level projection and fusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError
from .tensorcore import Rng, dropout, xavier_uniform

KERNEL = 3
PADDING = 1
POOL = 2


@dataclass
class BackboneConfig:
    conv1_channels: int = 8
    conv2_channels: int = 16
    se_reduction: int = 4
    dropout_p: float = 0.3
    f_high_dim: int = 128
    se_squeeze: str = "per_frame"  # "per_frame" | "global"

    def validate(self) -> None:
        if self.conv2_channels % self.se_reduction != 0:
            raise ConfigurationError(
                f"se_reduction={self.se_reduction} must divide conv2_channels={self.conv2_channels}")
        if self.f_high_dim < 8:
            raise ConfigurationError(f"f_high_dim must be >= 8, got {self.f_high_dim}")
        if self.se_squeeze not in ("per_frame", "global"):
            raise ConfigurationError(f"se_squeeze must be 'per_frame' or 'global', got {self.se_squeeze!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


@dataclass
class FeatureBundle:
    """Backbone outputs for one batch.

    ``f_mid`` is the clean mid-level tap; ``fusion_mid`` is the same map
    after dropout (identical to ``f_mid`` in eval mode) and is what the
    downstream projector consumes. ``se_gates`` is the (C, T) gate tap.
    """

    f_mid: torch.Tensor      # (B, C2, T, H', W')
    f_high: torch.Tensor     # (B, f_high_dim)
    se_gates: torch.Tensor   # (B, C2, T)
    fusion_mid: torch.Tensor  # (B, C2, T, H', W')


def _pool_hw(x: torch.Tensor) -> torch.Tensor:
    # Spatial 2x2 max-pool on (B, C, T, H, W); routed through the 2D kernel.
    b, c, t, h, w = x.shape
    if h % POOL or w % POOL:
        raise DimensionError(f"spatial extents {(h, w)} not divisible by pool {POOL}")
    y = F.max_pool2d(x.reshape(b, c * t, h, w), POOL)
    return y.view(b, c, t, h // POOL, w // POOL)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, input_shape: tuple[int, int, int] = (6, 64, 64),
                 rng: Rng | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.input_shape = tuple(input_shape)
        t, h, w = self.input_shape
        if h % (POOL * POOL) or w % (POOL * POOL):
            raise ConfigurationError(f"input spatial extents {(h, w)} must be divisible by {POOL * POOL}")
        c1, c2 = cfg.conv1_channels, cfg.conv2_channels
        # batch norm follows each conv, which cancels any constant shift;
        # conv biases would be structurally gradient-free, so drop them
        self.conv1 = nn.Conv3d(1, c1, KERNEL, padding=PADDING, bias=False, dtype=dtype)
        self.bn1 = nn.BatchNorm3d(c1, dtype=dtype)
        self.conv2 = nn.Conv3d(c1, c2, KERNEL, padding=PADDING, bias=False, dtype=dtype)
        self.bn2 = nn.BatchNorm3d(c2, dtype=dtype)
        squeeze = c2 // cfg.se_reduction
        self.se_fc1 = nn.Linear(c2, squeeze, dtype=dtype)
        self.se_fc2 = nn.Linear(squeeze, c2, dtype=dtype)
        # Mid extents follow from kernel/padding/pool arithmetic; asserted at forward.
        self.mid_shape = (c2, t, h // (POOL * POOL), w // (POOL * POOL))
        self.mid_numel = int(np.prod(self.mid_shape))
        self.f_high = nn.Linear(self.mid_numel, cfg.f_high_dim, dtype=dtype)
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: Rng) -> None:
        dtype = self.conv1.weight.dtype
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * KERNEL ** 3
                fan_out = conv.out_channels * KERNEL ** 3
                conv.weight.copy_(xavier_uniform(rng, conv.weight.shape, fan_in, fan_out, dtype))
            for lin in (self.se_fc1, self.se_fc2, self.f_high):
                conv_in, conv_out = lin.in_features, lin.out_features
                lin.weight.copy_(xavier_uniform(rng, lin.weight.shape, conv_in, conv_out, dtype))
                lin.bias.zero_()

    def se_gates(self, features: torch.Tensor) -> torch.Tensor:
        """Sigmoid channel gates from spatially squeezed features.

        ``features`` is (B, C, T, H, W). Per-frame squeeze averages over
        (H, W) and applies the shared two-layer excitation to every frame
        column; global squeeze averages over (T, H, W) and broadcasts.
        Returned shape is (B, C, T) in both modes.
        """
        if self.cfg.se_squeeze == "per_frame":
            s = features.mean(dim=(3, 4)).transpose(1, 2)        # (B, T, C)
            g = torch.sigmoid(self.se_fc2(F.relu(self.se_fc1(s))))
            return g.transpose(1, 2)                             # (B, C, T)
        s = features.mean(dim=(2, 3, 4))                         # (B, C)
        g = torch.sigmoid(self.se_fc2(F.relu(self.se_fc1(s))))
        return g[:, :, None].expand(-1, -1, features.shape[2])

    def forward(self, x: torch.Tensor, train: bool, rng: Rng | None = None) -> FeatureBundle:
        if x.ndim == 3:
            x = x[None, None]
        elif x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.input_shape:
            raise DimensionError(
                f"backbone expects clips shaped {self.input_shape}, got {tuple(x.shape)}")
        if train and self.cfg.dropout_p > 0 and rng is None:
            raise ConfigurationError("training-mode forward needs an rng for dropout")
        self.train(train)

        h = self.bn1(self.conv1(x))
        h = F.relu(_pool_hw(h))          # relu commutes with max-pool; pool first is cheaper
        h = F.relu(self.bn2(self.conv2(h)))
        gates = self.se_gates(h)
        h = h * gates[:, :, :, None, None]
        f_mid = _pool_hw(h)
        if tuple(f_mid.shape[1:]) != self.mid_shape:
            raise DimensionError(f"mid-level shape {tuple(f_mid.shape[1:])} != expected {self.mid_shape}")
        fusion_mid = dropout(f_mid, self.cfg.dropout_p, rng, train)
        f_high = F.relu(self.f_high(fusion_mid.flatten(1)))
        return FeatureBundle(f_mid=f_mid, f_high=f_high, se_gates=gates, fusion_mid=fusion_mid)


def heatmap(f_mid: torch.Tensor, target_size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Apex-frame activation map, upsampled and min-max scaled to [0, 1].

    ``f_mid`` is a single sample (C, T, H', W'). The apex frame is the time
    step with the largest total |activation| (ties -> smallest index); the
    channel-mean |activation| of that frame is bilinearly upsampled. A
    constant map normalizes to all zeros.
    """
    if f_mid.ndim != 4:
        raise DimensionError(f"heatmap expects (C, T, H', W'), got {tuple(f_mid.shape)}")
    amag = f_mid.detach().abs().mean(dim=0)              # (T, H', W')
    apex = int(torch.argmax(amag.sum(dim=(1, 2))).item())
    plane = amag[apex][None, None]                       # (1, 1, H', W')
    up = F.interpolate(plane, size=target_size, mode="bilinear", align_corners=True)[0, 0]
    lo, hi = float(up.min()), float(up.max())
    # a few ulps of interpolation wobble on a constant map is noise, not signal
    noise_floor = 32 * torch.finfo(up.dtype).eps * max(abs(hi), abs(lo), 1.0)
    if hi - lo <= noise_floor:
        return np.zeros(target_size, dtype=np.float64)
    return ((up - lo) / (hi - lo)).double().numpy()
