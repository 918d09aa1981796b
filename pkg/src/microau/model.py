"""End-to-end detector: temporal filter -> 3D CNN -> fusion projector ->
transformer reasoner -> per-AU logits, plus the versioned binary checkpoint
container.

Checkpoint layout (little-endian, 64-bit length prefixes): magic "AULM",
u32 format version, length-prefixed UTF-8 config echo, u64 tensor count,
then per tensor: name, dtype tag ("f32"/"f64"/"i64"), u64 rank + extents,
and the raw payload.
"""

from __future__ import annotations

import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeatureBundle
from .errors import DimensionError, FormatError
from .fusion import EfpConfig, FusionProjector
from .led import LedConfig, LedFilter
from .reasoner import Reasoner, ReasonerConfig
from .tensorcore import Rng, checksum_tensors

CHECKPOINT_MAGIC = b"AULM"
CHECKPOINT_VERSION = 1

_DTYPES = {"f32": (torch.float32, "<f4"), "f64": (torch.float64, "<f8"),
           "i64": (torch.int64, "<i8")}
_TAGS = {torch.float32: "f32", torch.float64: "f64", torch.int64: "i64"}


class AuDetector(nn.Module):
    """Full pipeline over (B, T, H, W) clips."""

    def __init__(self, led_cfg: LedConfig, backbone_cfg: BackboneConfig,
                 efp_cfg: EfpConfig, reasoner_cfg: ReasonerConfig,
                 input_shape: tuple[int, int, int] = (6, 64, 64),
                 rng: Rng | None = None, dtype: torch.dtype = torch.float32):
        super().__init__()
        rng = rng or Rng(0)
        self.led = LedFilter(led_cfg, dtype=dtype)
        self.backbone = Backbone(backbone_cfg, input_shape, rng=rng.derive(11), dtype=dtype)
        self.reasoner = Reasoner(reasoner_cfg, rng=rng.derive(13), dtype=dtype)
        self.fusion = FusionProjector(
            efp_cfg, mid_numel=self.backbone.mid_numel,
            high_dim=backbone_cfg.f_high_dim, out_dim=reasoner_cfg.d_model,
            rng=rng.derive(12), dtype=dtype)
        self.input_shape = tuple(input_shape)

    @property
    def uses_visual_path(self) -> bool:
        return self.reasoner.cfg.prompt_mode != "learnable_text"

    def forward(self, frames: torch.Tensor, train: bool, rng: Rng | None = None) -> torch.Tensor:
        if frames.ndim == 3:
            frames = frames[None]
        if frames.ndim != 4 or tuple(frames.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"expected clips shaped {self.input_shape}, got {tuple(frames.shape)}")
        if not self.uses_visual_path:
            # learnable-text ablation: the output is video-independent
            return self.reasoner(None, batch_size=frames.shape[0])
        filtered = self.led(frames)
        bundle = self.backbone(filtered, train=train, rng=rng)
        token = self.fusion.fuse(bundle)
        return self.reasoner(token)

    def analyze(self, frames: torch.Tensor) -> FeatureBundle:
        """Eval-mode feature bundle for one clip (heatmaps, gate traces)."""
        if frames.ndim == 3:
            frames = frames[None]
        with torch.no_grad():
            filtered = self.led(frames)
            return self.backbone(filtered, train=False)

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def decay_parameter_split(self) -> tuple[list[tuple[str, nn.Parameter]],
                                             list[tuple[str, nn.Parameter]]]:
        """(decayed, non-decayed) trainable parameters.

        Weight decay applies only to rank >= 2 weights; biases, norm
        scales/shifts and the filter scalars stay undecayed.
        """
        decay, no_decay = [], []
        for name, p in self.trainable_parameters():
            (decay if p.ndim >= 2 else no_decay).append((name, p))
        return decay, no_decay

    @torch.no_grad()
    def project(self) -> None:
        self.led.project()

    def state_checksum(self) -> str:
        named = list(self.named_parameters()) + list(self.named_buffers())
        named = [(n, t) for n, t in named if t.dtype.is_floating_point or t.numel() > 0]
        return checksum_tensors(named)

    # ---- checkpoint container ------------------------------------------

    def save_checkpoint(self, path: str | Path, config_echo: str) -> None:
        tensors = [(name, t) for name, t in self.state_dict().items()]
        blob = bytearray()
        blob += CHECKPOINT_MAGIC
        blob += struct.pack("<I", CHECKPOINT_VERSION)
        cfg_bytes = config_echo.encode("utf-8")
        blob += struct.pack("<Q", len(cfg_bytes)) + cfg_bytes
        blob += struct.pack("<Q", len(tensors))
        for name, t in tensors:
            arr = t.detach().cpu().contiguous()
            tag = _TAGS.get(arr.dtype)
            if tag is None:
                raise FormatError(f"unsupported tensor dtype {arr.dtype} for {name}")
            payload = arr.numpy().astype(_DTYPES[tag][1], copy=False).tobytes()
            name_b = name.encode("utf-8")
            blob += struct.pack("<Q", len(name_b)) + name_b
            tag_b = tag.encode()
            blob += struct.pack("<Q", len(tag_b)) + tag_b
            blob += struct.pack("<Q", arr.ndim)
            for ext in arr.shape:
                blob += struct.pack("<Q", ext)
            blob += struct.pack("<Q", len(payload)) + payload
        Path(path).write_bytes(bytes(blob))

    def load_checkpoint_state(self, path: str | Path) -> str:
        """Restore tensors from a checkpoint; returns the stored config echo."""
        config_echo, tensors = read_checkpoint(path)
        state = self.state_dict()
        if set(state.keys()) != set(tensors.keys()):
            missing = sorted(set(state) ^ set(tensors))
            raise FormatError(f"checkpoint tensor names do not match model: {missing[:4]}",
                              str(path))
        with torch.no_grad():
            for name, t in state.items():
                src = tensors[name]
                if tuple(src.shape) != tuple(t.shape):
                    raise FormatError(f"shape mismatch for {name}: {src.shape} vs {tuple(t.shape)}",
                                      str(path))
                t.copy_(torch.from_numpy(src))
        return config_echo


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", str(path), off)
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", str(path), 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", str(path), 4)
    (cfg_len,) = struct.unpack("<Q", take(8, "config length"))
    config_echo = take(cfg_len, "config block").decode("utf-8")
    (count,) = struct.unpack("<Q", take(8, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (tag_len,) = struct.unpack("<Q", take(8, "dtype length"))
        tag = take(tag_len, "dtype").decode()
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag!r} for {name}", str(path), off)
        (ndim,) = struct.unpack("<Q", take(8, "rank"))
        shape = tuple(struct.unpack("<Q", take(8, "extent"))[0] for _ in range(ndim))
        (plen,) = struct.unpack("<Q", take(8, "payload length"))
        payload = take(plen, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=_DTYPES[tag][1])
        if arr.size != int(np.prod(shape)):  # np.prod(()) == 1 covers scalars
            raise FormatError(f"payload size mismatch for {name}", str(path), off)
        tensors[name] = arr.reshape(shape).copy()
    if off != len(raw):
        raise FormatError("trailing bytes after last tensor", str(path), off)
    return config_echo, tensors


def build_detector(led_cfg: LedConfig, backbone_cfg: BackboneConfig, efp_cfg: EfpConfig,
                   reasoner_cfg: ReasonerConfig, n_aus: int,
                   input_shape: tuple[int, int, int], seed_rng: Rng,
                   dtype: torch.dtype = torch.float32) -> AuDetector:
    """Fresh seeded detector with the AU count stamped into the reasoner."""
    rcfg = replace(reasoner_cfg, n_aus=n_aus)
    return AuDetector(led_cfg, backbone_cfg, efp_cfg, rcfg,
                      input_shape=input_shape, rng=seed_rng, dtype=dtype)
