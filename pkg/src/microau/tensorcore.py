"""Tensor substrate: seeded counter-based RNG, contract wrappers, gradient checking.

Dense tensor arithmetic and reverse-mode differentiation are provided by
torch (CPU only in this package). This module owns everything torch does
not guarantee by itself:

* ``Rng`` -- a Philox counter-based generator. Every random draw in the
  package (weight init, dropout masks, data synthesis, shuffling) flows
  through an ``Rng`` instance, never through torch's global RNG, so streams
  are reproducible across platforms and safely forkable per sample/fold.
* ``grad_check`` -- central finite differences as an independent oracle for
  reverse-mode gradients, with a determinism probe.
* zero-gradient and checksum helpers that make "grads are exactly zero" and
  "weights did not move" testable statements.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from .errors import DeterminismError, DimensionError, NumericDomainError

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Counter-based random stream keyed by (seed, stream).

    Identical (seed, stream) and call sequence produce identical output on
    every platform (numpy Philox is fully specified). ``derive`` builds
    statistically independent child streams from integer indices, which is
    how per-sample and per-fold generators stay reproducible under
    parallelism.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *indices: int) -> "Rng":
        """Independent child stream for the given index path."""
        h = _splitmix64(self.seed ^ 0xA5A5A5A5A5A5A5A5)
        h = _splitmix64(h ^ self.stream)
        for ix in indices:
            h = _splitmix64(h ^ (int(ix) & _MASK64))
        return Rng(h, 0)

    def uniform_np(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        arr = self._gen.random(size=tuple(shape), dtype=np.float64)
        return low + (high - low) * arr

    def normal_np(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        arr = self._gen.standard_normal(size=tuple(shape), dtype=np.float64)
        return mean + std * arr

    def uniform(self, shape, low: float = 0.0, high: float = 1.0,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        arr = self.uniform_np(shape, low, high)
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np_dtype))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0,
               dtype: torch.dtype = torch.float32) -> torch.Tensor:
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        arr = self.normal_np(shape, mean, std)
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np_dtype))

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=tuple(shape) if shape else None)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def xavier_uniform(rng: Rng, shape, fan_in: int, fan_out: int,
                   dtype: torch.dtype = torch.float32) -> torch.Tensor:
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(shape, -bound, bound, dtype=dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with an explicit shape contract."""
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def log_strict(x: torch.Tensor) -> torch.Tensor:
    """Natural log that rejects non-positive inputs instead of returning -inf/nan."""
    if bool((x <= 0).any()):
        raise NumericDomainError("log requires strictly positive input")
    return torch.log(x)


def dropout(x: torch.Tensor, p: float, rng: Rng, train: bool) -> torch.Tensor:
    """Inverted dropout driven by an explicit Rng; identity in eval mode."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise NumericDomainError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.uniform(x.shape, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep * (1.0 / (1.0 - p))


def zero_grads(params: Iterable[torch.nn.Parameter]) -> None:
    """Reset gradients to exact zeros (grad tensors stay allocated and shaped)."""
    for p in params:
        p.grad = torch.zeros_like(p.detach())


def checksum_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """Order-sensitive SHA-256 over names and raw little-endian payloads."""
    h = hashlib.sha256()
    for name, t in named:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class GradCheckReport:
    """Worst relative error between analytic and finite-difference gradients."""

    per_input: dict[str, float] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_input.values()) if self.per_input else 0.0

    @property
    def excluded_fraction(self) -> float:
        total = sum(self.checked.values())
        return sum(self.excluded.values()) / total if total else 0.0

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance

    def summary(self) -> str:
        lines = [f"  {name}: {err:.3e}" for name, err in sorted(self.per_input.items())]
        lines.append(f"  max: {self.max_rel_error:.3e}")
        if sum(self.excluded.values()):
            lines.append(f"  excluded non-smooth probes: {sum(self.excluded.values())}"
                         f"/{sum(self.checked.values())}")
        return "\n".join(lines)


def grad_check(fn: Callable[[], torch.Tensor],
               wrt: Mapping[str, torch.Tensor],
               epsilon: float = 1e-4,
               skip_nonsmooth: bool = False) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` must rebuild the scalar output from scratch on every call (any
    internal randomness re-seeded identically), at float64. ``wrt`` maps
    names to leaf tensors with ``requires_grad=True`` that ``fn`` closes
    over. Relative error per element is |a - n| / max(|a|, |n|, 1e-8).

    Central differences only estimate a derivative where the function is
    differentiable across the probe interval; a ReLU or pooling-argmax kink
    inside it makes the estimate a meaningless blend of one-sided slopes.
    With ``skip_nonsmooth``, suspicious probes are re-measured at epsilon/2:
    the two estimates agree to O(epsilon^2) on smooth stretches and differ by
    the slope jump at a kink, so kink-straddling coordinates are excluded
    (counted per input in the report).
    """
    out1 = fn()
    out2 = fn()
    if out1.numel() != 1:
        raise DimensionError(f"grad_check target must be scalar, got shape {tuple(out1.shape)}")
    if not torch.equal(out1, out2):
        raise DeterminismError(
            "subgraph is not deterministic: two identical forward passes differ "
            f"({out1.item()!r} vs {out2.item()!r})")

    for t in wrt.values():
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (t.grad.detach().clone() if t.grad is not None
                       else torch.zeros_like(t.detach()))
                for name, t in wrt.items()}

    f0 = float(loss.item())

    def probe(flat, i, orig, eps):
        flat[i] = orig + eps
        f_plus = float(fn().item())
        flat[i] = orig - eps
        f_minus = float(fn().item())
        flat[i] = orig
        return f_plus, f_minus

    report = GradCheckReport()
    for name, t in wrt.items():
        flat = t.data.view(-1)
        ana = analytic[name].view(-1)
        worst = 0.0
        excluded = 0
        for i in range(flat.numel()):
            orig = flat[i].item()
            f_plus, f_minus = probe(flat, i, orig, epsilon)
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(ana[i].item())
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > 1e-5 and skip_nonsmooth:
                hp, hm = probe(flat, i, orig, epsilon / 2.0)
                half = (hp - hm) / epsilon
                # a kink inside the interval makes the two scales disagree
                if abs(numeric - half) > 1e-3 * max(abs(numeric), abs(half), 1e-6):
                    excluded += 1
                    continue
                # a kink at the point itself blends both scales identically,
                # but the analytic side then matches a one-sided slope, which
                # cannot happen at a smooth point where central dominates
                fwd = (hp - f0) / (epsilon / 2.0)
                bwd = (f0 - hm) / (epsilon / 2.0)
                if min(abs(a - fwd), abs(a - bwd)) <= 1e-3 * max(abs(a), 1e-6):
                    excluded += 1
                    continue
            worst = max(worst, rel)
        report.per_input[name] = worst
        report.excluded[name] = excluded
        report.checked[name] = flat.numel()
    return report
