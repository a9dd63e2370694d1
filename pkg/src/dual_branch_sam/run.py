import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from dual_branch_sam.config import ModelConfig, load_config
from dual_branch_sam.configs.template_config import log_datefmt, log_format
from dual_branch_sam.data import load_dataset, slice_volume_files, synth_dataset_generate, write_dataset
from dual_branch_sam.exceptions import DbSamError
from dual_branch_sam.grad_check import format_table, grad_check_suite
from dual_branch_sam.mlflow_utils import MLflowRun, RunTracker
from dual_branch_sam.model import DbSamModel
from dual_branch_sam.model.db_sam import config_path_for
from dual_branch_sam.training import ablate, evaluate_checkpoint, train
from dual_branch_sam.training.ablation import ABLATION_PRESETS

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO"):
    logging.basicConfig(
        stream=sys.stdout,
        format=log_format,
        datefmt=log_datefmt,
        level=getattr(logging, level.upper()),
        force=True,
    )


def _config(path) -> ModelConfig:
    return load_config(path) if path else ModelConfig().validate()


def _tracking(args, prefix: str, tags: dict):
    """An MLflow run when ``--track`` is given, otherwise a no-op context."""
    if args.track:
        return MLflowRun(run_prefix=f"{prefix} run", tags=tags), RunTracker(enabled=True)
    return nullcontext(), RunTracker()


def cmd_gen_data(args):
    synth_dataset_generate(args.n, args.size, args.seed, args.out)


def cmd_slice_volume(args):
    samples = slice_volume_files(args.inputs, args.min_fg, args.size, args.formula)
    write_dataset(args.out, samples)


def cmd_train(args):
    config = _config(args.config)
    samples = load_dataset(args.data)
    context, tracker = _tracking(args, "train", {"data": str(args.data)})
    with context:
        train(config, samples, args.out, pretrained=args.pretrained, tracker=tracker)


def cmd_eval(args):
    samples = load_dataset(args.data)
    context, tracker = _tracking(args, "eval", {"checkpoint": str(args.ckpt), "data": str(args.data)})
    with context:
        tolerance = args.tolerance
        if tolerance is None:
            sidecar = config_path_for(args.ckpt)
            tolerance = load_config(sidecar).tolerance if sidecar.exists() else ModelConfig.tolerance
        evaluate_checkpoint(args.ckpt, samples, tolerance, args.report, args.workers, tracker)


def cmd_grad_check(args):
    results = grad_check_suite(args.block, inject=args.inject, seed=args.seed)
    print(format_table(results))
    failed = [r.block for r in results if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for: {', '.join(failed)}")
        sys.exit(1)


def cmd_init_pretrained(args):
    config = _config(args.config)
    model = DbSamModel(config, np.random.default_rng(config.seed))
    model.save_pretrained(args.out)


def cmd_ablate(args):
    config = _config(args.config)
    samples = load_dataset(args.data)
    context, tracker = _tracking(args, "ablation", {"data": str(args.data)})
    with context:
        ablate(config, samples, args.out, args.presets or ABLATION_PRESETS, args.pretrained, tracker)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="db-sam",
        description="Dual-branch promptable segmentation: data, training, evaluation and checks.",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")
    parser.add_argument("--track", action="store_true", help="Log the run to MLflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Render a synthetic shape dataset")
    p.add_argument("--n", type=int, required=True, help="Number of samples")
    p.add_argument("--size", type=int, default=128, help="Image side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="Dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("slice-volume", help="Cut DBSM volumes into an axial-slice dataset")
    p.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True, help="Volume files")
    p.add_argument("--min-fg", type=int, default=1, help="Minimum foreground pixels per kept slice")
    p.add_argument("--size", type=int, default=128, help="Output slice side in pixels")
    p.add_argument("--formula", default=None, help="Intensity formula in x applied before rescaling")
    p.add_argument("--out", type=Path, required=True, help="Dataset directory")
    p.set_defaults(func=cmd_slice_volume)

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--config", type=Path, default=None, help="Config file (key = value or YAML)")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--out", type=Path, required=True, help="Output directory")
    p.add_argument("--pretrained", type=Path, default=None, help="Frozen-weight file from init-pretrained")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="Checkpoint file")
    p.add_argument("--data", type=Path, required=True, help="Dataset directory")
    p.add_argument("--tolerance", type=float, default=None, help="NSD tolerance in pixels")
    p.add_argument("--report", type=Path, required=True, help="Metrics CSV to write")
    p.add_argument("--workers", type=int, default=None, help="Evaluation threads")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="Finite-difference gradient suite")
    p.add_argument("--block", nargs="*", default=None, help="Blocks to check (default: all)")
    p.add_argument("--inject", default=None, help="Double the analytic gradient of this block")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("init-pretrained", help="Write frozen ViT and prompt-encoder weights")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="DBSM file to write")
    p.set_defaults(func=cmd_init_pretrained)

    p = sub.add_parser("ablate", help="Train and evaluate the component ablation presets")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--presets", type=Path, default=None, help="Preset YAML (default: the bundled one)")
    p.add_argument("--pretrained", type=Path, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    """
    Entry point of the ``db-sam`` command.

    You can run the script with:
        db-sam gen-data --n 8 --size 128 --out data
        db-sam train --config configs/overfit.cfg --data data --out runs/overfit
        db-sam eval --ckpt runs/overfit/model.dbsm --data data --report runs/overfit/metrics.csv
        db-sam grad-check

    Exits with status 1 and a one-line message on any expected failure.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        args.func(args)
    except KeyboardInterrupt:
        logger.info("Keyboard interrupt received. Exiting.")
        sys.exit(130)
    except (DbSamError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        sys.exit(1)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        raise e


if __name__ == "__main__":
    main()
