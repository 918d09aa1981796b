"""Fold training, the subject-wise and cross-dataset protocols, and reports.

Every protocol trains a freshly seeded model with decoupled-weight-decay
Adam over all trainable parameters; evaluation never mutates model state
(checked by checksumming parameters and buffers around it). Reports are
fully determined by (config, seed, dataset bytes): fold workers and the
in-process path both run single-threaded torch kernels so the parallelism
degree cannot change any emitted number, and wall-clock stays out of the
canonical serialization.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ResolvedConfig, resolve
from .data import Dataset, FoldSplit, loso_split, map_label_space
from .errors import ProtocolError, ValidationError
from .model import AuDetector, build_detector
from .objective import MetricsReport, asl_loss, render_table
from .tensorcore import Rng

log = logging.getLogger("microau")

ABLATION_ARMS: dict[str, dict[str, str]] = {
    "all": {},
    "mid_only": {"efp.variant": "mid_only"},
    "high_only": {"efp.variant": "high_only"},
    "linear": {"efp.variant": "linear"},
    "learnable_text": {"reasoner.prompt_mode": "learnable_text"},
}


@dataclass
class FoldResult:
    report: MetricsReport
    loss_history: list[float]
    model: AuDetector | None = None


@dataclass
class RunReport:
    kind: str                       # "loso" | "cross"
    config_echo: str
    seed: int
    fold_reports: list[MetricsReport]
    aggregate: MetricsReport
    wall_seconds: float = 0.0       # informational; excluded from serialization
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "kind": self.kind,
            "seed": self.seed,
            "config": self.config_echo,
            "folds": [r.to_dict() for r in self.fold_reports],
            "aggregate": self.aggregate.to_dict(),
            "extras": self.extras,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        return render_table(self.fold_reports, self.aggregate)

    def save(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "report.json").write_bytes(self.to_json().encode())
        (outdir / "report.txt").write_bytes(self.to_text().encode())


def _dtype(cfg: ResolvedConfig) -> torch.dtype:
    return torch.float64 if cfg["precision"] == "f64" else torch.float32


def _stack(ds: Dataset, ids: list[str], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    by_id = {r.sample_id: r for r in ds.records}
    recs = [by_id[i] for i in ids]
    x = torch.from_numpy(np.stack([r.frames for r in recs])).to(dtype)
    y = torch.from_numpy(np.stack([r.labels for r in recs])).to(dtype)
    return x, y


def _build(cfg: ResolvedConfig, ds: Dataset, seed_rng: Rng) -> AuDetector:
    t, h, w = ds.records[0].frames.shape
    return build_detector(cfg.led_config(), cfg.backbone_config(), cfg.efp_config(),
                          cfg.reasoner_config(), n_aus=len(ds.au_ids),
                          input_shape=(t, h, w), seed_rng=seed_rng, dtype=_dtype(cfg))


# Adam takes near-constant per-coordinate steps, so a layer's pre-activation
# drift speed grows with its fan-in. Fan-ins here span 27 (first conv) to
# ~24.7k (the flattened mid-level features), and the widest layers feed
# bounded activations that saturate within a few steps at any usable global
# rate. Scaling each weight's rate by REFERENCE_FAN_IN / fan_in equalizes
# layer output velocities; the configured learning_rate multiplies them all.
REFERENCE_FAN_IN = 256


def _optimizer(model: AuDetector, lr: float, weight_decay: float) -> torch.optim.AdamW:
    buckets: dict[tuple[float, float], list] = {}
    for _, p in model.trainable_parameters():
        if p.ndim >= 2:
            fan_in = p.shape[1] * int(np.prod(p.shape[2:]))
            scale = min(1.0, REFERENCE_FAN_IN / max(fan_in, REFERENCE_FAN_IN))
            wd = weight_decay
        else:
            scale, wd = 1.0, 0.0  # biases, norm scales, filter scalars: no decay
        buckets.setdefault((scale, wd), []).append(p)
    groups = [{"params": ps, "lr": lr * scale, "weight_decay": wd}
              for (scale, wd), ps in sorted(buckets.items())]
    return torch.optim.AdamW(groups, lr=lr)


def _fit(model: AuDetector, x: torch.Tensor, y: torch.Tensor, cfg: ResolvedConfig,
         shuffle_rng: Rng, dropout_rng: Rng, context: str) -> list[float]:
    # Fixed single-thread kernels: results must not depend on worker layout.
    torch.set_num_threads(1)
    n = x.shape[0]
    batch = cfg["batch_size"]
    if batch > n:
        log.warning("%s: batch_size %d > training set size %d; clamping", context, batch, n)
        batch = n
    opt = _optimizer(model, cfg["learning_rate"], cfg["weight_decay"])
    asl_cfg = cfg.asl_config()
    losses: list[float] = []
    step = 0
    for _ in range(cfg["epochs"]):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch):
            idx = torch.from_numpy(order[start:start + batch].copy())
            logits = model(x[idx], train=True, rng=dropout_rng.derive(step))
            loss = asl_loss(torch.sigmoid(logits), y[idx], asl_cfg)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.project()
            losses.append(float(loss.item()))
            step += 1
    return losses


def evaluate(model: AuDetector, x: torch.Tensor, y: torch.Tensor,
             label: str, au_ids, threshold: float,
             batch_size: int = 64) -> tuple[MetricsReport, np.ndarray]:
    probs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            logits = model(x[i:i + batch_size], train=False)
            probs.append(torch.sigmoid(logits).double().numpy())
    probs = np.concatenate(probs, axis=0)
    report = MetricsReport.from_predictions(label, list(au_ids), probs,
                                            y.double().numpy(), threshold)
    return report, probs


def train_fold(ds: Dataset, fold: FoldSplit, cfg: ResolvedConfig,
               fold_index: int, keep_model: bool = False) -> FoldResult:
    if not fold.train_ids:
        raise ProtocolError(f"fold {fold.held_out_subject} has an empty training set")
    fold_rng = Rng(cfg["seed"]).derive(3, fold_index)
    model = _build(cfg, ds, fold_rng.derive(0))
    dtype = _dtype(cfg)
    x_train, y_train = _stack(ds, fold.train_ids, dtype)
    x_test, y_test = _stack(ds, fold.test_ids, dtype)
    losses = _fit(model, x_train, y_train, cfg, fold_rng.derive(1), fold_rng.derive(2),
                  context=f"fold {fold.held_out_subject}")
    before = model.state_checksum()
    report, _ = evaluate(model, x_test, y_test, fold.held_out_subject,
                         ds.au_ids, cfg["threshold"])
    if model.state_checksum() != before:
        raise ProtocolError("evaluation mutated model state")
    return FoldResult(report=report, loss_history=losses,
                      model=model if keep_model else None)


def train_full(ds: Dataset, cfg: ResolvedConfig) -> tuple[AuDetector, list[float]]:
    """Train one model on every sample (checkpoint/visualization path)."""
    rng = Rng(cfg["seed"]).derive(5, 0)
    model = _build(cfg, ds, rng.derive(0))
    ids = [r.sample_id for r in ds.records]
    x, y = _stack(ds, ids, _dtype(cfg))
    losses = _fit(model, x, y, cfg, rng.derive(1), rng.derive(2), context="full-train")
    return model, losses


def _fold_job(args) -> tuple[int, FoldResult]:
    ds, fold, cfg, fold_index = args
    return fold_index, train_fold(ds, fold, cfg, fold_index)


def run_loso(ds: Dataset, cfg: ResolvedConfig, parallel: int = 1) -> RunReport:
    t0 = time.perf_counter()
    folds = loso_split(ds.records)
    results: dict[int, FoldResult] = {}
    if parallel > 1 and len(folds) > 1:
        jobs = [(ds, fold, cfg, i) for i, fold in enumerate(folds)]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for fold_index, result in pool.map(_fold_job, jobs):
                results[fold_index] = result
                log.info("fold %s: macro F1 %.4f", folds[fold_index].held_out_subject,
                         result.report.macro)
    else:
        for i, fold in enumerate(folds):
            results[i] = train_fold(ds, fold, cfg, i)
            log.info("fold %s: macro F1 %.4f", fold.held_out_subject,
                     results[i].report.macro)
    fold_reports = [results[i].report for i in range(len(folds))]
    aggregate = MetricsReport.merged("ALL", fold_reports)
    histories = {folds[i].held_out_subject: [round(v, 6) for v in results[i].loss_history]
                 for i in range(len(folds))}
    return RunReport(kind="loso", config_echo=cfg.echo(), seed=cfg["seed"],
                     fold_reports=fold_reports, aggregate=aggregate,
                     wall_seconds=time.perf_counter() - t0,
                     extras={"fold_loss_history": histories})


def run_cross_domain(train_ds: Dataset, test_ds: Dataset, cfg: ResolvedConfig,
                     direction: str = "A->B") -> RunReport:
    t0 = time.perf_counter()
    shared = sorted(set(train_ds.au_ids) & set(test_ds.au_ids))
    if not shared:
        raise ProtocolError("cross-domain label spaces do not intersect")
    train_proj, train_zeroed = map_label_space(train_ds, shared)
    test_proj, test_zeroed = map_label_space(test_ds, shared)

    rng = Rng(cfg["seed"]).derive(4, 0)
    model = _build(cfg, train_proj, rng.derive(0))
    dtype = _dtype(cfg)
    x_train, y_train = _stack(train_proj, [r.sample_id for r in train_proj.records], dtype)
    x_test, y_test = _stack(test_proj, [r.sample_id for r in test_proj.records], dtype)
    _fit(model, x_train, y_train, cfg, rng.derive(1), rng.derive(2),
         context=f"cross {direction}")
    before = model.state_checksum()
    report, _ = evaluate(model, x_test, y_test, direction, shared, cfg["threshold"])
    if model.state_checksum() != before:
        raise ProtocolError("evaluation mutated model state")
    return RunReport(kind="cross", config_echo=cfg.echo(), seed=cfg["seed"],
                     fold_reports=[report], aggregate=report,
                     wall_seconds=time.perf_counter() - t0,
                     extras={"shared_au_ids": shared,
                             "train_samples_zeroed": train_zeroed,
                             "test_samples_zeroed": test_zeroed})


def subject_holdout(ds: Dataset, holdout_subjects: int) -> tuple[Dataset, Dataset]:
    """Deterministic subject-wise split: last N subjects become the test set."""
    subjects = ds.subjects()
    if not 0 < holdout_subjects < len(subjects):
        raise ValidationError(
            f"holdout_subjects must be in (0, {len(subjects)}), got {holdout_subjects}")
    test_subjects = set(subjects[-holdout_subjects:])
    train = [r for r in ds.records if r.subject_id not in test_subjects]
    test = [r for r in ds.records if r.subject_id in test_subjects]
    return Dataset(ds.au_ids, train), Dataset(ds.au_ids, test)


def run_ablation(ds: Dataset, cfg: ResolvedConfig, seeds: list[int],
                 holdout_subjects: int | None = None) -> dict:
    """Train every ablation arm per seed on a subject-held-out split.

    Returns {"arms": {arm: {"per_seed": {seed: macro}, "median": m}},
    "table": text}.
    """
    if not seeds:
        raise ValidationError("ablation needs at least one seed")
    n_subjects = len(ds.subjects())
    if holdout_subjects is None:
        holdout_subjects = max(1, n_subjects // 3)
    train_ds, test_ds = subject_holdout(ds, holdout_subjects)
    arms: dict[str, dict] = {}
    for arm, overrides in ABLATION_ARMS.items():
        per_seed: dict[int, float] = {}
        for seed in seeds:
            arm_cfg = resolve(overrides={**cfg.raw, **overrides, "seed": str(seed)})
            rep = run_cross_domain(train_ds, test_ds, arm_cfg, direction=arm)
            per_seed[seed] = rep.aggregate.macro
            log.info("ablation arm %s seed %d: macro F1 %.4f", arm, seed, per_seed[seed])
        arms[arm] = {"per_seed": per_seed,
                     "median": float(np.median(list(per_seed.values())))}
    header = ["arm"] + [f"seed{s}" for s in seeds] + ["median"]
    rows = [[arm] + [f"{arms[arm]['per_seed'][s]:.4f}" for s in seeds]
            + [f"{arms[arm]['median']:.4f}"] for arm in ABLATION_ARMS]
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r)) for r in rows]
    return {"arms": arms, "table": "\n".join(lines) + "\n",
            "holdout_subjects": holdout_subjects}
