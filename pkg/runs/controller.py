"""
Run controller: command-line layer.
Parses and validates flags, echoes the resolved run configuration, and maps
library errors onto process exit codes.
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError

import settings
from brain.config import ModelConfig, Variant
from brain.model import DtNetModel
from data.repository import DatasetRepository
from data.synth import SynthConfig, synth_generate
from db.checkpoint import load_checkpoint, save_checkpoint
from errors import CheckpointError, DtNetError, UsageError, VerificationError
from evaluation.metrics import export_pr_curve
from evaluation.service import EvalConfig, evaluate, predict
from runs.service import (
    GRADIENT_BLOCKS,
    run_ablation,
    run_gradient_suite,
    split_holdout,
    train_variant,
    write_ablation_csv,
    write_detections,
)
from tensor import planted_fault
from training.service import TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.dtnt"
METRICS_FILE = "metrics.jsonl"
CONFIG_ECHO = "run_config.json"


class RunConfig(BaseModel):
    """Every resolved value of one command, echoed to run_config.json."""
    command: str
    seed: int
    data: Optional[str] = None
    eval_data: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    variant: Optional[str] = None
    size: Optional[str] = None
    options: Dict[str, Any] = Field(default_factory=dict)
    model: Optional[Dict[str, Any]] = None


# ==================== HELPERS ====================

def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, run: RunConfig) -> None:
    (out / CONFIG_ECHO).write_text(run.model_dump_json(indent=2) + "\n")


def _model_config(size: str, variant: str, image_size: int) -> ModelConfig:
    if size == "tiny":
        return ModelConfig.tiny(variant=variant, input_size=image_size)
    return ModelConfig.build(variant=variant, input_size=image_size)


def _load_dataset(path: str):
    samples = DatasetRepository(path).load()
    if not samples:
        raise UsageError(f"dataset {path} has no samples")
    return samples


def _load_model(path: str, variant: Optional[str]) -> DtNetModel:
    model = load_checkpoint(path)
    if variant is not None and model.config.variant.value != variant:
        raise CheckpointError(
            f"checkpoint holds the {model.config.variant.value} variant, {variant} was requested"
        )
    return model


# ==================== COMMANDS ====================

def cmd_synth(args: argparse.Namespace) -> int:
    samples = synth_generate(args.seed, args.count, SynthConfig(image_size=args.image_size))
    out = _out_dir(args.out)
    DatasetRepository(out).save(samples)
    _echo(out, RunConfig(command="synth", seed=args.seed, out=args.out,
                         options={"count": args.count, "image_size": args.image_size}))
    print(f"Generated {len(samples)} samples in {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    samples = _load_dataset(args.data)
    if args.eval_data:
        train_set, eval_set = samples, _load_dataset(args.eval_data)
    else:
        train_set, eval_set = split_holdout(samples, args.holdout, args.seed)
    cfg = _model_config(args.size, args.variant, samples[0].height)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, max_lr=args.lr)

    out = _out_dir(args.out)
    _echo(out, RunConfig(
        command="train", seed=args.seed, data=args.data, eval_data=args.eval_data, out=args.out,
        variant=args.variant, size=args.size, model=cfg.model_dump(mode="json"),
        options={**train_cfg.model_dump(mode="json"), "holdout": args.holdout,
                 "train_samples": len(train_set), "eval_samples": len(eval_set)},
    ))
    log_path = out / METRICS_FILE
    log_path.unlink(missing_ok=True)

    model = train_variant(cfg, cfg.variant, train_set, train_cfg, eval_set=eval_set or None, log_path=log_path)
    save_checkpoint(model, out / CHECKPOINT_FILE)
    print(f"Checkpoint written to {out / CHECKPOINT_FILE}")
    print(f"Metrics log written to {log_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = _load_model(args.ckpt, args.variant)
    samples = _load_dataset(args.data)
    eval_cfg = EvalConfig(conf_thresh=args.conf, nms_iou=args.nms)
    report = evaluate(model, samples, eval_cfg)

    out = _out_dir(args.out)
    _echo(out, RunConfig(command="eval", seed=args.seed, data=args.data, checkpoint=args.ckpt, out=args.out,
                         variant=model.config.variant.value, model=model.config.model_dump(mode="json"),
                         options=eval_cfg.model_dump(mode="json")))
    result = {**report.summary(), "conditions": report.conditions}
    (out / "report.json").write_text(json.dumps(result, indent=2) + "\n")
    export_pr_curve(report, out / "pr.csv")
    for key, value in report.summary().items():
        print(f"{key:>10}: {value:.4f}")
    print(f"Report written to {out / 'report.json'}")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    model = _load_model(args.ckpt, None)
    samples = _load_dataset(args.data)
    detections = predict(model, samples, args.conf, args.nms)

    out = _out_dir(args.out)
    _echo(out, RunConfig(command="detect", seed=args.seed, data=args.data, checkpoint=args.ckpt, out=args.out,
                         variant=model.config.variant.value, options={"conf": args.conf, "nms": args.nms}))
    write_detections(samples, detections, out / "detections.jsonl")
    print(f"{sum(len(d) for d in detections)} detections over {len(samples)} images")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.plant_fault:
        with planted_fault(args.plant_fault):
            rows = run_gradient_suite(args.seed)
    else:
        rows = run_gradient_suite(args.seed)

    print(f"{'block':<18} {'max rel err':>12} {'checked':>8}  result")
    for row in rows:
        print(f"{row.block:<18} {row.max_rel_err:>12.3e} {row.checked:>8}  {'PASS' if row.passed else 'FAIL'}")
    if args.out:
        out = _out_dir(args.out)
        _echo(out, RunConfig(command="gradcheck", seed=args.seed, size=args.size, out=args.out,
                             options={"blocks": list(GRADIENT_BLOCKS), "plant_fault": args.plant_fault}))

    failed = [row.block for row in rows if not row.passed]
    if failed:
        raise VerificationError(f"gradient check failed for: {', '.join(failed)}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    samples = _load_dataset(args.data)
    if args.eval_data:
        train_set, eval_set = samples, _load_dataset(args.eval_data)
    else:
        train_set, eval_set = split_holdout(samples, args.holdout, args.seed)
    if not eval_set:
        raise UsageError("ablation needs evaluation samples: pass --eval-data or a non-zero --holdout")
    base = _model_config(args.size, Variant.FULL.value, samples[0].height)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, max_lr=args.lr)

    out = _out_dir(args.out)
    _echo(out, RunConfig(command="ablate", seed=args.seed, data=args.data, eval_data=args.eval_data, out=args.out,
                         size=args.size, model=base.model_dump(mode="json"),
                         options={**train_cfg.model_dump(mode="json"), "holdout": args.holdout}))
    rows = run_ablation(base, train_set, eval_set, train_cfg)
    write_ablation_csv(rows, out / "ablation.csv")

    print(f"{'variant':<20} {'params':>10} {'map50':>8}")
    for row in rows:
        print(f"{row.variant:<20} {row.params:>10} {row.map50:>8.4f}")
    return 0


# ==================== PARSER ====================

def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--eval-data", help="Separate evaluation dataset (disables --holdout)")
    p.add_argument("--holdout", type=float, default=0.2, help="Fraction of --data held out for evaluation")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01, help="Peak one-cycle learning rate")
    p.add_argument("--size", choices=("tiny", "default"), default="default")
    p.add_argument("--out", default=settings.OUTPUT_DIR)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtnet", description="DTNet vehicle detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.DEFAULT_SEED, help="Source of all randomness")
    variants = [v.value for v in Variant]

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--image-size", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="Train one variant")
    _add_training_flags(p)
    p.add_argument("--variant", choices=variants, default=Variant.FULL.value)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.45)
    p.add_argument("--variant", choices=variants, help="Require the checkpoint to hold this variant")
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="Write detections for every image")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms", type=float, default=0.45)
    p.add_argument("--out", default=settings.OUTPUT_DIR)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every block")
    p.add_argument("--size", choices=("tiny",), default="tiny")
    p.add_argument("--out")
    p.add_argument("--plant-fault", help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="Train and evaluate all four variants")
    _add_training_flags(p)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        Process exit code: 0 success, 2 usage/validation, 3 divergence,
        4 checkpoint error, 5 verification failure
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except DtNetError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error("%s failed: invalid option: %s", args.command, e)
        print(f"error: {e}")
        return 2
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}")
        return 2
