"""Fusion projector: flatten + concatenate the two feature levels and map
them into the reasoner's embedding space as a single visual token.

Variants cover the ablation arms: the full two-layer MLP, a single linear
map, and mid-only / high-only inputs (each consuming a disjoint slice of the
concatenated vector, so the unused half receives exactly zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeatureBundle
from .errors import ConfigurationError, DimensionError
from .tensorcore import Rng, xavier_uniform

VARIANTS = ("full_mlp", "linear", "mid_only", "high_only")


@dataclass
class EfpConfig:
    variant: str = "full_mlp"
    hidden_dim: int = 256
    output_activation: str = "tanh"  # "tanh" | "sigmoid" | "none"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"efp.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.output_activation not in ("tanh", "sigmoid", "none"):
            raise ConfigurationError(f"unknown efp.output_activation {self.output_activation!r}")
        if self.hidden_dim < 1:
            raise ConfigurationError(f"efp.hidden_dim must be positive, got {self.hidden_dim}")


class FusionProjector(nn.Module):
    def __init__(self, cfg: EfpConfig, mid_numel: int, high_dim: int, out_dim: int,
                 rng: Rng | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.mid_numel = mid_numel
        self.high_dim = high_dim
        self.out_dim = out_dim
        if cfg.variant == "mid_only":
            in_dim = mid_numel
        elif cfg.variant == "high_only":
            in_dim = high_dim
        else:
            in_dim = mid_numel + high_dim
        self.in_dim = in_dim
        if cfg.variant == "linear":
            self.proj = nn.Linear(in_dim, out_dim, dtype=dtype)
        else:
            self.fc1 = nn.Linear(in_dim, cfg.hidden_dim, dtype=dtype)
            self.fc2 = nn.Linear(cfg.hidden_dim, out_dim, dtype=dtype)
        if rng is not None:
            self.reset_parameters(rng)

    def reset_parameters(self, rng: Rng) -> None:
        with torch.no_grad():
            for lin in self.children():
                if isinstance(lin, nn.Linear):
                    lin.weight.copy_(xavier_uniform(
                        rng, lin.weight.shape, lin.in_features, lin.out_features,
                        lin.weight.dtype))
                    lin.bias.zero_()

    def _select(self, f_cat: torch.Tensor) -> torch.Tensor:
        # mid/high variants take disjoint slices of the concatenated vector
        if self.cfg.variant == "mid_only":
            return f_cat[:, :self.mid_numel]
        if self.cfg.variant == "high_only":
            return f_cat[:, self.mid_numel:]
        return f_cat

    def fuse(self, bundle: FeatureBundle) -> torch.Tensor:
        """Produce the visual token (B, out_dim) from a feature bundle."""
        f_cat = torch.cat([bundle.fusion_mid.flatten(1), bundle.f_high], dim=1)
        return self.fuse_flat(f_cat)

    def fuse_flat(self, f_cat: torch.Tensor) -> torch.Tensor:
        expected = self.mid_numel + self.high_dim
        if f_cat.ndim != 2 or f_cat.shape[1] != expected:
            raise DimensionError(
                f"fusion input must be (B, {expected}), got {tuple(f_cat.shape)}")
        x = self._select(f_cat)
        if self.cfg.variant == "linear":
            y = self.proj(x)
        else:
            y = self.fc2(F.relu(self.fc1(x)))
        if self.cfg.output_activation == "tanh":
            return torch.tanh(y)
        if self.cfg.output_activation == "sigmoid":
            return torch.sigmoid(y)
        return y

    forward = fuse
