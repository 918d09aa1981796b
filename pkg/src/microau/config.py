"""Flat key=value configuration: file parsing, flag overrides, and the
canonical echo text embedded in every report and checkpoint.

Files are UTF-8 with '#' comments; unknown keys are rejected. Resolution
order is defaults, then file values, then command-line overrides. The echo
is the fully resolved mapping rendered one ``key=value`` per line in sorted
key order, so a report plus its dataset reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigurationError
from .fusion import EfpConfig
from .led import LedConfig
from .objective import AslConfig
from .reasoner import ReasonerConfig


def _parse_bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"expected a boolean, got {v!r}")


# key -> (type tag, default-as-string)
KEY_SPECS: dict[str, tuple[str, str]] = {
    "learning_rate": ("float", "1e-3"),
    "weight_decay": ("float", "0.005"),
    "batch_size": ("int", "32"),
    "epochs": ("int", "30"),
    "seed": ("int", "7"),
    "threshold": ("float", "0.5"),
    "precision": ("choice:f32,f64", "f32"),
    "parallel_folds": ("int", "1"),
    "asl.gamma_pos": ("float", "0"),
    "asl.gamma_neg": ("float", "4"),
    "asl.margin": ("float", "0.05"),
    "asl.eps": ("float", "1e-8"),
    "led.alpha_init": ("float", "1.0"),
    "led.r1_init": ("float", "0.4"),
    "led.r2_init": ("float", "0.1"),
    "led.normalize": ("choice:l1,none", "l1"),
    "backbone.conv1_channels": ("int", "8"),
    "backbone.conv2_channels": ("int", "16"),
    "backbone.se_reduction": ("int", "4"),
    "backbone.dropout_p": ("float", "0.3"),
    "backbone.f_high_dim": ("int", "128"),
    "backbone.se_squeeze": ("choice:per_frame,global", "per_frame"),
    "efp.variant": ("choice:full_mlp,linear,mid_only,high_only", "full_mlp"),
    "efp.hidden_dim": ("int", "256"),
    "efp.output_activation": ("choice:tanh,sigmoid,none", "tanh"),
    "reasoner.d_model": ("int", "256"),
    "reasoner.layers": ("int", "2"),
    "reasoner.heads": ("int", "4"),
    "reasoner.ffn_mult": ("int", "4"),
    "reasoner.base_frozen": ("bool", "true"),
    "reasoner.prompt_mode": ("choice:visual_token,learnable_text", "visual_token"),
    "reasoner.prompt_len": ("int", "4"),
    "reasoner.lora_rank": ("int", "4"),
    "reasoner.lora_alpha": ("float", "8"),
    "gen.subjects": ("int", "12"),
    "gen.per_subject": ("int", "30"),
    "gen.noise_sigma": ("float", "0.02"),
    "gen.au_set": ("str", "1,2,4,7,12,14,15,17"),
    "gen.seed": ("int", "7"),
    "gen.weights": ("str", ""),
}


def _coerce(key: str, value: str):
    tag = KEY_SPECS[key][0]
    try:
        if tag == "int":
            return int(value)
        if tag == "float":
            return float(value)
        if tag == "bool":
            return _parse_bool(value)
        if tag.startswith("choice:"):
            choices = tag.split(":", 1)[1].split(",")
            if value not in choices:
                raise ConfigurationError(f"{key} must be one of {choices}, got {value!r}")
            return value
        return value
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r} ({exc})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in KEY_SPECS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_path: str | None = None,
            overrides: dict[str, str] | None = None) -> "ResolvedConfig":
    values = {k: default for k, (_, default) in KEY_SPECS.items()}
    if file_path is not None:
        values.update(parse_config_text(Path(file_path).read_text(), file_path))
    for key, val in (overrides or {}).items():
        if key not in KEY_SPECS:
            raise ConfigurationError(f"unknown config key {key!r}")
        values[key] = val
    typed = {k: _coerce(k, v) for k, v in values.items()}
    return ResolvedConfig(raw=values, typed=typed)


@dataclass
class ResolvedConfig:
    raw: dict[str, str]
    typed: dict[str, object]

    def echo(self) -> str:
        return "\n".join(f"{k}={self.raw[k]}" for k in sorted(self.raw)) + "\n"

    def __getitem__(self, key: str):
        return self.typed[key]

    def led_config(self) -> LedConfig:
        return LedConfig(alpha_init=self["led.alpha_init"], r1_init=self["led.r1_init"],
                         r2_init=self["led.r2_init"], normalize=self["led.normalize"])

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            conv1_channels=self["backbone.conv1_channels"],
            conv2_channels=self["backbone.conv2_channels"],
            se_reduction=self["backbone.se_reduction"],
            dropout_p=self["backbone.dropout_p"],
            f_high_dim=self["backbone.f_high_dim"],
            se_squeeze=self["backbone.se_squeeze"])

    def efp_config(self) -> EfpConfig:
        return EfpConfig(variant=self["efp.variant"], hidden_dim=self["efp.hidden_dim"],
                         output_activation=self["efp.output_activation"])

    def reasoner_config(self, n_aus: int = 0) -> ReasonerConfig:
        return ReasonerConfig(
            n_aus=max(n_aus, 1), d_model=self["reasoner.d_model"],
            layers=self["reasoner.layers"], heads=self["reasoner.heads"],
            ffn_mult=self["reasoner.ffn_mult"], base_frozen=self["reasoner.base_frozen"],
            prompt_mode=self["reasoner.prompt_mode"], prompt_len=self["reasoner.prompt_len"],
            lora_rank=self["reasoner.lora_rank"], lora_alpha=self["reasoner.lora_alpha"])

    def asl_config(self) -> AslConfig:
        return AslConfig(gamma_pos=self["asl.gamma_pos"], gamma_neg=self["asl.gamma_neg"],
                         margin=self["asl.margin"], eps=self["asl.eps"])

    def gen_au_set(self) -> tuple[int, ...]:
        text = str(self["gen.au_set"]).strip()
        try:
            return tuple(sorted({int(tok) for tok in text.split(",") if tok.strip()}))
        except ValueError:
            raise ConfigurationError(f"gen.au_set must be comma-separated ints, got {text!r}") from None

    def gen_weights(self) -> dict[int, float] | None:
        text = str(self["gen.weights"]).strip()
        if not text:
            return None
        out: dict[int, float] = {}
        try:
            for part in text.split(","):
                au, w = part.split(":")
                out[int(au)] = float(w)
        except ValueError:
            raise ConfigurationError(
                f"gen.weights must look like '4:3.0,12:1.5', got {text!r}") from None
        return out
