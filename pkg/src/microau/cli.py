"""Command-line entry point.

Subcommands: gen, train, eval-loso, eval-cross, ablate, gradcheck, heatmap.
All accept ``--config FILE`` (flat key=value text) plus repeatable
``--set key=value`` overrides; dedicated flags are sugar for common keys.
Exit codes: 0 success, 1 validation/protocol/configuration errors,
2 I/O and format errors. Outputs carry no timestamps, so re-running a
command over identical inputs rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as configmod
from .backbone import heatmap as compute_heatmap
from .data import generate_synthetic, load_dataset, save_dataset
from .errors import ConfigurationError, FormatError, MicroAuError, ValidationError
from .model import build_detector, read_checkpoint
from .tensorcore import Rng
from .training import run_ablation, run_cross_domain, run_loso, train_full
from .verification import DEFAULT_TOLERANCE, format_suite, run_suite

log = logging.getLogger("microau")


def _overrides(args: argparse.Namespace, mapping: dict[str, str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = str(val)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _resolve(args: argparse.Namespace, mapping: dict[str, str]) -> configmod.ResolvedConfig:
    return configmod.resolve(args.config, _overrides(args, mapping))


def _generate_from_config(cfg: configmod.ResolvedConfig):
    return generate_synthetic(
        n_subjects=cfg["gen.subjects"], samples_per_subject=cfg["gen.per_subject"],
        au_set=cfg.gen_au_set(), noise_sigma=cfg["gen.noise_sigma"],
        imbalance_profile=cfg.gen_weights(), rng=Rng(cfg["gen.seed"]))


def _cmd_gen(args) -> int:
    cfg = _resolve(args, {"subjects": "gen.subjects", "per_subject": "gen.per_subject",
                          "seed": "gen.seed", "noise": "gen.noise_sigma", "aus": "gen.au_set",
                          "weights": "gen.weights"})
    ds = _generate_from_config(cfg)
    save_dataset(ds, args.out)
    (Path(args.out) / "config.echo").write_bytes(cfg.echo().encode())
    print(f"wrote {len(ds.records)} samples over {len(ds.subjects())} subjects to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve(args, {"seed": "seed"})
    ds = load_dataset(args.data)
    model, losses = train_full(ds, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out, cfg.echo())
    print(f"trained on {len(ds.records)} samples; final loss {losses[-1]:.5f}; "
          f"checkpoint {out}")
    return 0


def _cmd_eval_loso(args) -> int:
    cfg = _resolve(args, {"seed": "seed", "parallel": "parallel_folds"})
    ds = load_dataset(args.data)
    report = run_loso(ds, cfg, parallel=cfg["parallel_folds"])
    report.save(args.out)
    print(report.to_text(), end="")
    print(f"aggregate macro F1: {report.aggregate.macro:.4f} "
          f"({report.wall_seconds:.1f}s)")
    return 0


def _cmd_eval_cross(args) -> int:
    cfg = _resolve(args, {"seed": "seed"})
    ds_a = load_dataset(args.data_a)
    ds_b = load_dataset(args.data_b)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for direction, (train_ds, test_ds) in (("a_to_b", (ds_a, ds_b)),
                                           ("b_to_a", (ds_b, ds_a))):
        report = run_cross_domain(train_ds, test_ds, cfg, direction=direction)
        report.save(outdir / direction)
        print(report.to_text(), end="")
        print(f"{direction}: macro F1 {report.aggregate.macro:.4f} "
              f"(zeroed train/test: {report.extras['train_samples_zeroed']}/"
              f"{report.extras['test_samples_zeroed']})")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve(args, {"seed": "seed"})
    ds = load_dataset(args.data)
    seeds = [int(s) for s in str(args.seeds).split(",") if s.strip()]
    result = run_ablation(ds, cfg, seeds, holdout_subjects=args.holdout_subjects)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.echo(), "seeds": seeds,
               "holdout_subjects": result["holdout_subjects"],
               "arms": {arm: {"per_seed": {str(k): v for k, v in d["per_seed"].items()},
                              "median": d["median"]}
                        for arm, d in result["arms"].items()}}
    (outdir / "ablation.json").write_bytes(
        (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode())
    (outdir / "ablation.txt").write_bytes(result["table"].encode())
    print(result["table"], end="")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds)
    text = format_suite(results)
    print(text)
    worst = max(rep.max_rel_error for rep in results.values())
    if worst >= DEFAULT_TOLERANCE:
        raise ValidationError(f"gradient check failed: {worst:.3e} >= {DEFAULT_TOLERANCE}")
    return 0


def write_pgm(path: Path, image01: np.ndarray) -> None:
    """8-bit binary PGM (P5), maxval 255."""
    h, w = image01.shape
    data = np.clip(np.rint(image01 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _cmd_heatmap(args) -> int:
    config_echo, _ = read_checkpoint(args.checkpoint)
    file_values = configmod.parse_config_text(config_echo, str(args.checkpoint))
    cfg = configmod.resolve(None, file_values)
    ds = load_dataset(args.data)
    by_id = {r.sample_id: r for r in ds.records}
    if args.samples:
        wanted = [s.strip() for s in args.samples.split(",") if s.strip()]
        missing = [s for s in wanted if s not in by_id]
        if missing:
            raise ValidationError(f"samples not in dataset: {missing}")
    else:
        wanted = [r.sample_id for r in ds.records[:args.count]]

    t, h, w = ds.records[0].frames.shape
    model = build_detector(cfg.led_config(), cfg.backbone_config(), cfg.efp_config(),
                           cfg.reasoner_config(), n_aus=len(ds.au_ids),
                           input_shape=(t, h, w), seed_rng=Rng(0))
    model.load_checkpoint_state(args.checkpoint)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for sid in wanted:
        rec = by_id[sid]
        bundle = model.analyze(torch.from_numpy(rec.frames))
        hm = compute_heatmap(bundle.f_mid[0], target_size=(h, w))
        write_pgm(outdir / f"{sid}.pgm", hm)
        gates = bundle.se_gates[0].double().numpy()  # (C, T)
        lines = [",".join(f"{v:.6f}" for v in row) for row in gates]
        (outdir / f"{sid}.se.csv").write_bytes(("\n".join(lines) + "\n").encode())
    print(f"wrote {len(wanted)} heatmaps and gate traces to {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microau",
                                     description="Micro-expression action-unit detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen", help="write a synthetic AUSEQ dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--per-subject", dest="per_subject", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--aus", help="comma-separated AU ids")
    p.add_argument("--weights", help="imbalance profile, e.g. 4:3.0,12:1.5")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-loso", help="leave-one-subject-out protocol")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallel", type=int, help="fold parallelism degree")
    p.set_defaults(func=_cmd_eval_loso)

    p = sub.add_parser("eval-cross", help="bidirectional cross-dataset protocol")
    common(p)
    p.add_argument("--data-a", dest="data_a", required=True)
    p.add_argument("--data-b", dest="data_b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_eval_cross)

    p = sub.add_parser("ablate", help="run the fusion/prompting ablation arms")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="7,8,9")
    p.add_argument("--holdout-subjects", dest="holdout_subjects", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("heatmap", help="export activation heatmaps and SE gate traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", help="comma-separated sample ids")
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=_cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MicroAuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
