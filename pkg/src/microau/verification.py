"""Finite-difference verification suite over every differentiable component.

Each check builds a deliberately tiny float64 instance of one component,
wires a deterministic scalar objective over it, and compares reverse-mode
gradients against central differences. Run via the CLI ``gradcheck``
subcommand or the test suite.
"""

from __future__ import annotations

import torch

from .backbone import Backbone, BackboneConfig
from .fusion import EfpConfig, FusionProjector
from .led import LedConfig, LedFilter
from .objective import AslConfig, asl_loss
from .reasoner import Reasoner, ReasonerConfig
from .tensorcore import GradCheckReport, Rng, grad_check

F64 = torch.float64
DEFAULT_TOLERANCE = 1e-4
DEFAULT_EPSILON = 1e-4


def _weights_like(rng: Rng, t: torch.Tensor) -> torch.Tensor:
    return rng.uniform(t.shape, -1.0, 1.0, dtype=F64)


def check_led(seed: int, epsilon: float = DEFAULT_EPSILON) -> GradCheckReport:
    # Under row-L1 normalization the matrix is scale-invariant in the gain, so
    # its gradient is identically zero there; the gain is checked in the
    # unnormalized mode where it is live, the rates in the normalized default.
    rng = Rng(seed).derive(21)
    video = rng.uniform((1, 4, 6, 6), 0.0, 1.0, dtype=F64).requires_grad_(True)
    w = _weights_like(rng, video)

    led_l1 = LedFilter(LedConfig(normalize="l1"), dtype=F64)
    rep = grad_check(lambda: (led_l1(video) * w).sum(),
                     {"r1": led_l1.r1, "r2": led_l1.r2, "video": video}, epsilon,
                     skip_nonsmooth=True)
    led_raw = LedFilter(LedConfig(normalize="none"), dtype=F64)
    raw = grad_check(lambda: (led_raw(video) * w).sum(),
                     {"alpha": led_raw.alpha, "r1": led_raw.r1, "r2": led_raw.r2},
                     epsilon, skip_nonsmooth=True)
    for key, err in raw.per_input.items():
        rep.per_input[f"unnormalized.{key}"] = err
    return rep


def check_backbone(seed: int, epsilon: float = DEFAULT_EPSILON) -> GradCheckReport:
    rng = Rng(seed).derive(22)
    cfg = BackboneConfig(conv1_channels=2, conv2_channels=4, se_reduction=2,
                         dropout_p=0.0, f_high_dim=8)
    net = Backbone(cfg, input_shape=(3, 8, 8), rng=rng.derive(0), dtype=F64)
    x = rng.uniform((2, 3, 8, 8), 0.0, 1.0, dtype=F64).requires_grad_(True)
    wm = rng.uniform((2, net.mid_numel), -1.0, 1.0, dtype=F64)
    wh = rng.uniform((2, cfg.f_high_dim), -1.0, 1.0, dtype=F64)

    def fn():
        bundle = net(x, train=True)  # batch-stat normalization in the graph
        return (bundle.f_mid.flatten(1) * wm).sum() + (bundle.f_high * wh).sum()

    wrt = {name: p for name, p in net.named_parameters()}
    wrt["input"] = x
    return grad_check(fn, wrt, epsilon, skip_nonsmooth=True)


def check_fusion(seed: int, variant: str, epsilon: float = DEFAULT_EPSILON) -> GradCheckReport:
    rng = Rng(seed).derive(23)
    proj = FusionProjector(EfpConfig(variant=variant, hidden_dim=8),
                           mid_numel=20, high_dim=6, out_dim=5,
                           rng=rng.derive(0), dtype=F64)
    f_cat = rng.uniform((2, 26), -1.0, 1.0, dtype=F64).requires_grad_(True)
    w = rng.uniform((2, 5), -1.0, 1.0, dtype=F64)
    fn = lambda: (proj.fuse_flat(f_cat) * w).sum()
    wrt = {name: p for name, p in proj.named_parameters()}
    wrt["f_cat"] = f_cat
    return grad_check(fn, wrt, epsilon, skip_nonsmooth=True)


def check_reasoner(seed: int, epsilon: float = DEFAULT_EPSILON) -> GradCheckReport:
    rng = Rng(seed).derive(24)
    cfg = ReasonerConfig(n_aus=3, d_model=16, layers=1, heads=2, ffn_mult=2,
                         lora_rank=2, lora_alpha=4.0)
    net = Reasoner(cfg, rng=rng.derive(0), dtype=F64)
    # adapters start at the zero update; randomize b so its path carries signal
    with torch.no_grad():
        for blk in net.blocks:
            for ad in (blk.q_adapter, blk.v_adapter):
                ad.b.copy_(rng.uniform(ad.b.shape, -0.3, 0.3, dtype=F64))
    token = rng.uniform((2, 16), -1.0, 1.0, dtype=F64).requires_grad_(True)
    w = rng.uniform((2, 3), -1.0, 1.0, dtype=F64)
    fn = lambda: (net(token) * w).sum()
    wrt: dict[str, torch.Tensor] = {"visual_token": token}
    for i, blk in enumerate(net.blocks):
        wrt[f"layer{i}.q_adapter.a"] = blk.q_adapter.a
        wrt[f"layer{i}.q_adapter.b"] = blk.q_adapter.b
        wrt[f"layer{i}.v_adapter.a"] = blk.v_adapter.a
        wrt[f"layer{i}.v_adapter.b"] = blk.v_adapter.b
    wrt["classifier.weight"] = net.classifier.weight
    wrt["classifier.bias"] = net.classifier.bias
    return grad_check(fn, wrt, epsilon, skip_nonsmooth=True)


def check_asl(seed: int, epsilon: float = DEFAULT_EPSILON) -> GradCheckReport:
    rng = Rng(seed).derive(25)
    cfg = AslConfig()
    logits = rng.uniform((3, 4), -2.0, 2.0, dtype=F64)
    labels = torch.from_numpy((rng.uniform_np((3, 4)) < 0.4).astype("float64"))
    # keep probabilities at least 1e-2 away from the margin kink
    with torch.no_grad():
        p = torch.sigmoid(logits)
        near = (p - cfg.margin).abs() < 1e-2
        logits = torch.where(near, logits + 0.5, logits)
    logits.requires_grad_(True)
    fn = lambda: asl_loss(torch.sigmoid(logits), labels, cfg)
    return grad_check(fn, {"logits": logits}, epsilon, skip_nonsmooth=True)


def run_suite(seeds: int = 20, epsilon: float = DEFAULT_EPSILON) -> dict[str, GradCheckReport]:
    """All component checks over ``seeds`` seeds; worst report per component."""
    out: dict[str, GradCheckReport] = {}

    def merge(name: str, rep: GradCheckReport) -> None:
        prev = out.get(name)
        if prev is None:
            out[name] = rep
        else:
            for key, err in rep.per_input.items():
                prev.per_input[key] = max(prev.per_input.get(key, 0.0), err)
            for key in rep.checked:
                prev.checked[key] = prev.checked.get(key, 0) + rep.checked[key]
                prev.excluded[key] = prev.excluded.get(key, 0) + rep.excluded.get(key, 0)

    for seed in range(seeds):
        merge("led", check_led(seed, epsilon))
        merge("backbone", check_backbone(seed, epsilon))
        merge("efp_full_mlp", check_fusion(seed, "full_mlp", epsilon))
        merge("efp_linear", check_fusion(seed, "linear", epsilon))
        merge("reasoner_lora", check_reasoner(seed, epsilon))
        merge("asl_through_sigmoid", check_asl(seed, epsilon))
    return out


def format_suite(results: dict[str, GradCheckReport], tolerance: float = DEFAULT_TOLERANCE) -> str:
    lines = []
    for name, rep in results.items():
        status = "ok" if rep.ok(tolerance) else "FAIL"
        skipped = sum(rep.excluded.values())
        note = f", {skipped} kink probes excluded" if skipped else ""
        lines.append(f"{name}: max rel error {rep.max_rel_error:.3e} [{status}]{note}")
    worst = max(rep.max_rel_error for rep in results.values())
    lines.append(f"suite max rel error: {worst:.3e} (tolerance {tolerance:g})")
    return "\n".join(lines)
