"""Asymmetric multi-label loss and the F1 evaluation metrics.

The loss applies separate focusing exponents to positive and negative terms
and shifts negative probabilities down by a margin before focusing/log,
which damps the flood of easy negatives that multi-label AU data produces.
Scores are per-AU F1 from pooled confusion counts, macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, ValidationError


@dataclass
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    eps: float = 1e-8

    def validate(self) -> None:
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ConfigurationError("focusing exponents must be >= 0")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigurationError(f"margin must be in [0, 1), got {self.margin}")
        if self.eps <= 0:
            raise ConfigurationError("probability clamp eps must be positive")


def _focus(base: torch.Tensor, gamma: float) -> torch.Tensor:
    # gamma == 0 must contribute factor 1 with zero gradient, so skip pow
    # (pow backward at base 0 with exponent 0 produces NaN).
    return base.pow(gamma) if gamma != 0.0 else torch.ones_like(base)


def asl_loss(probs: torch.Tensor, labels: torch.Tensor, cfg: AslConfig) -> torch.Tensor:
    """Mean-per-sample asymmetric loss over an (N, B) probability matrix."""
    cfg.validate()
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValidationError(
            f"probs and labels must share an (N, B) shape, got {tuple(probs.shape)} "
            f"and {tuple(labels.shape)}")
    lab = labels.detach()
    if not bool(((lab == 0) | (lab == 1)).all()):
        raise ValidationError("labels must be 0/1")
    y = labels.to(probs.dtype)
    n = probs.shape[0]
    p_m = torch.clamp(probs - cfg.margin, min=0.0)
    pos = y * _focus(1.0 - probs, cfg.gamma_pos) * torch.log(torch.clamp(probs, min=cfg.eps))
    neg = (1.0 - y) * _focus(p_m, cfg.gamma_neg) * torch.log(torch.clamp(1.0 - p_m, min=cfg.eps))
    return -(pos + neg).sum() / n


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion_counts(probs: np.ndarray, labels: np.ndarray,
                     threshold: float) -> list[ConfusionCounts]:
    """Per-AU confusion counts at a fixed decision threshold."""
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ValidationError("probs and labels must share an (N, B) shape")
    pred = probs >= threshold
    lab = labels.astype(bool)
    out = []
    for j in range(probs.shape[1]):
        p, l = pred[:, j], lab[:, j]
        out.append(ConfusionCounts(
            tp=int((p & l).sum()), fp=int((p & ~l).sum()),
            fn=int((~p & l).sum()), tn=int((~p & ~l).sum())))
    return out


def f1_per_au(counts: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; degenerate denominators -> 0."""
    if counts.tp + counts.fp == 0 or counts.tp + counts.fn == 0:
        return 0.0
    precision = counts.tp / (counts.tp + counts.fp)
    recall = counts.tp / (counts.tp + counts.fn)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(per_au: list[float]) -> float:
    if not per_au:
        raise ValidationError("macro F1 of an empty AU list is undefined")
    return float(sum(per_au)) / len(per_au)


@dataclass
class MetricsReport:
    """Per-AU confusion counts and F1 for one fold (or one pooled run)."""

    label: str
    au_ids: list[int]
    counts: list[ConfusionCounts] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, label: str, au_ids: list[int], probs: np.ndarray,
                         labels: np.ndarray, threshold: float) -> "MetricsReport":
        return cls(label=label, au_ids=list(au_ids),
                   counts=confusion_counts(probs, labels, threshold))

    @property
    def per_au_f1(self) -> list[float]:
        return [f1_per_au(c) for c in self.counts]

    @property
    def macro(self) -> float:
        return macro_f1(self.per_au_f1)

    @classmethod
    def merged(cls, label: str, reports: list["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValidationError("cannot merge zero reports")
        au_ids = reports[0].au_ids
        for r in reports:
            if r.au_ids != au_ids:
                raise ValidationError("cannot merge reports over different AU sets")
        counts = [ConfusionCounts() for _ in au_ids]
        for r in reports:
            counts = [a + b for a, b in zip(counts, r.counts)]
        return cls(label=label, au_ids=list(au_ids), counts=counts)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "au_ids": self.au_ids,
            "counts": [c.to_dict() for c in self.counts],
            "per_au_f1": [round(v, 6) for v in self.per_au_f1],
            "macro_f1": round(self.macro, 6),
        }


def render_table(reports: list[MetricsReport], aggregate: MetricsReport | None = None) -> str:
    """Aligned text table: one row per report, AU columns plus the average."""
    if not reports:
        raise ValidationError("nothing to tabulate")
    au_ids = reports[0].au_ids
    header = ["fold"] + [f"AU{a}" for a in au_ids] + ["Avg."]
    rows = []
    for rep in reports + ([aggregate] if aggregate is not None else []):
        rows.append([rep.label] + [f"{v:.4f}" for v in rep.per_au_f1] + [f"{rep.macro:.4f}"])
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    for r in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
    return "\n".join(lines) + "\n"
