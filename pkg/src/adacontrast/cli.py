"""Command-line entry points: centers, gen-data, pretrain, finetune, eval,
gradcheck.

Every subcommand takes --config (JSON), --seed, and --out; seed and out
override the config. Outputs land in --out: checkpoints in the binary
container format, logs as CSV, reports as JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import centers as centers_mod
from . import pipeline
from .gradcheck import run_gradcheck


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _train_config(args, stage: str) -> pipeline.TrainConfig:
    doc = _load_json(args.config)
    doc["stage"] = stage
    config = pipeline.TrainConfig.from_dict(doc)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        config = dataclasses.replace(config, **overrides)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
    return config


def _cmd_centers(args) -> int:
    doc = _load_json(args.config)
    known = {"K", "d", "tau", "learning_rate", "max_iters", "grad_tol", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise pipeline.ConfigError(f"unknown centers config keys: {sorted(unknown)}")
    K = int(doc.get("K", 4))
    d = int(doc.get("d", 128))
    ucfg = centers_mod.UniformityConfig(
        tau=float(doc.get("tau", 1.0)),
        learning_rate=float(doc.get("learning_rate", 0.1)),
        max_iters=int(doc.get("max_iters", 20000)),
        grad_tol=float(doc.get("grad_tol", 1e-7)),
        seed=args.seed if args.seed is not None else int(doc.get("seed", 0)),
    )
    cc = centers_mod.precompute_centers(K, d, ucfg)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    pipeline.save_centers(os.path.join(out, "centers.ckpt"), cc)
    sidecar = {
        "K": cc.K,
        "d": cc.d,
        "tau": cc.tau_unif,
        "final_loss": cc.final_loss,
        "max_pairwise_inner_product": cc.max_pairwise_inner_product(),
        "iterations": cc.iterations,
    }
    with open(os.path.join(out, "centers.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    print(json.dumps(sidecar, indent=2, sort_keys=True))
    return 0


def _cmd_gen_data(args) -> int:
    config = _train_config(args, "pretrain")
    out = config.out_dir or "."
    manifest = pipeline.save_dataset_dir(out, config)
    print(
        f"wrote {manifest['dataset_size']} samples to {out} "
        f"(frequencies {manifest['measured_frequencies']})"
    )
    return 0


def _cmd_pretrain(args) -> int:
    config = _train_config(args, "pretrain")
    out = config.out_dir or "."
    log = pipeline.RunLog(os.path.join(out, "pretrain_log.csv"))
    resume = pipeline.load_checkpoint(args.resume) if args.resume else None
    ckpt = pipeline.run_pretrain(config, log=log, resume_from=resume, stop_at=args.stop_at)
    log.save()
    path = os.path.join(out, "pretrain_final.ckpt")
    pipeline.save_checkpoint(path, ckpt)
    print(f"pretrain finished at iteration {ckpt.iteration}; checkpoint {path}")
    return 0


def _cmd_finetune(args) -> int:
    config = _train_config(args, "finetune")
    centers_path = args.centers or config.centers_path
    init_path = args.init or config.init_checkpoint
    if centers_path is None or init_path is None:
        raise pipeline.ConfigError(
            "finetune needs --centers and --init (or the config equivalents)"
        )
    cc = pipeline.load_centers(centers_path)
    pretrained = pipeline.load_checkpoint(init_path)
    out = config.out_dir or "."
    log = pipeline.RunLog(os.path.join(out, "finetune_log.csv"))
    resume = pipeline.load_checkpoint(args.resume) if args.resume else None
    ckpt = pipeline.run_finetune(
        config, pretrained, cc, log=log, resume_from=resume, stop_at=args.stop_at
    )
    log.save()
    path = os.path.join(out, "finetune_final.ckpt")
    pipeline.save_checkpoint(path, ckpt)
    print(f"finetune finished at iteration {ckpt.iteration}; checkpoint {path}")
    return 0


def _report_rows(report) -> dict:
    row = {
        "iteration": report.iteration,
        "mean_dice": report.mean_dice,
        "mean_asd": report.mean_asd,
        "asd_missing": report.asd_missing,
        "alignment": report.alignment,
        "divergence": report.divergence,
        "nn_error": report.nn_error,
        "nn_error_pixel_weighted": report.nn_error_pixel_weighted,
    }
    for i, v in enumerate(report.per_class_dice, start=1):
        row[f"dice_class{i}"] = v
    for i, v in enumerate(report.per_class_asd, start=1):
        row[f"asd_class{i}"] = v
    return row


def _cmd_eval(args) -> int:
    import csv

    ckpt = pipeline.load_checkpoint(args.checkpoint)
    config = pipeline.TrainConfig.from_dict(ckpt.config)
    _, _, val = pipeline.load_or_generate_data(config)
    cc = pipeline.load_centers(args.centers) if args.centers else None
    report = pipeline.evaluate_checkpoint(ckpt, val, cc=cc)
    row = _report_rows(report)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(row, fh, indent=2, sort_keys=True)
    with open(
        os.path.join(out, "metrics.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    print(json.dumps(row, indent=2, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_gradcheck(seed=seed, trials=args.trials)
    failed = False
    for name, err in sorted(results.items()):
        ok = err < args.tolerance
        failed |= not ok
        print(f"{name:26s} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="adacontrast",
        description="Semi-supervised contrastive segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("centers", help="precompute uniform class centers")
    add_common(p)
    p.set_defaults(fn=_cmd_centers)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    add_common(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="instance-discrimination pretraining")
    add_common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, dest="stop_at",
                   help="pause after this many iterations (resumable)")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="center-contrast fine-tuning")
    add_common(p)
    p.add_argument("--centers", help="precomputed centers checkpoint")
    p.add_argument("--init", help="pretrained checkpoint to start from")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, dest="stop_at",
                   help="pause after this many iterations (resumable)")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--centers", help="centers checkpoint for the NN-error metric")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    add_common(p)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (
        pipeline.ConfigError,
        pipeline.DataError,
        pipeline.VersionMismatchError,
        pipeline.CorruptFileError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
