#!/usr/bin/env python3
"""
WarpSR command line: synth-data, pretrain-warp, train, infer, eval, compare, gradcheck

Results go to stdout, logs to stderr. Exit codes: 0 ok, 1 usage or config,
2 I/O, 3 numeric abort, 4 gradient-check failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import config
from constants import ExitCodes
from data_pipeline import MANIFEST_NAME, generate_dataset, load_dataset, load_sample, save_image
from evaluation import evaluate_baselines, evaluate_checkpoint, write_report
from exceptions import GradcheckFailure, UsageError
from experiments import OrderingExperiment, compare_variants, ordering_holds
from gradcheck import get_available_modules, run_gradchecks
from models import TrainConfig
from perceptual_loss import build_feature_network
from sr_networks import create_profile, forward, get_available_profiles
from tensor_autodiff import no_grad
from training import (
    build_model,
    check_frame_size,
    fit_sequence,
    load_checkpoint,
    pretrain_warp,
    save_checkpoint,
    save_warp_weights,
    train,
    warp_pairs,
    write_history,
)
from utils import cli_command, setup_logger

logger = logging.getLogger(__name__)

HISTORY_NAME = 'history.csv'
FINAL_CHECKPOINT_NAME = 'final.wsrc'


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting with status 2"""

    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def _train_config(config_path: Optional[str], **overrides) -> TrainConfig:
    """Run config from a YAML file (or defaults) with non-None flag overrides"""
    values = config.load_run_config(Path(config_path)) if config_path else {}
    values.update({key: value for key, value in overrides.items() if value is not None})
    return TrainConfig.from_mapping(values)


@cli_command
def cmd_synth_data(args: argparse.Namespace) -> int:
    if args.frames < 1 or args.frames % 2 == 0:
        raise UsageError(f"--frames must be odd, got {args.frames}")
    spec = create_profile(args.profile).degradation(apply_blur=not args.no_blur)
    generate_dataset(args.out, args.samples, args.frames, seed=args.seed, spec=spec, threads=args.threads)
    print(Path(args.out) / MANIFEST_NAME)
    return ExitCodes.OK


@cli_command
def cmd_pretrain_warp(args: argparse.Namespace) -> int:
    train_config = _train_config(args.config, profile=args.profile, seed=args.seed, threads=args.threads)
    params = build_model(train_config)
    dataset = load_dataset(args.data)
    check_frame_size(dataset, params.model_config)
    pairs = warp_pairs(dataset)
    pretrain_warp(params, pairs, train_config, epochs=args.epochs)
    save_warp_weights(args.out, params)
    print(args.out)
    return ExitCodes.OK


@cli_command
def cmd_train(args: argparse.Namespace) -> int:
    train_config = _train_config(args.config, threads=args.threads)
    dataset = load_dataset(args.data)
    out_dir = Path(args.out)

    state, start_epoch = None, 0
    if args.resume:
        checkpoint = load_checkpoint(args.resume, expected_config=train_config)
        params, state, start_epoch = checkpoint.params, checkpoint.state, checkpoint.epoch
        logger.info(f"Resuming from {args.resume} at epoch {start_epoch}")
    else:
        params = build_model(train_config)
    check_frame_size(dataset, params.model_config)

    result = train(params, dataset, train_config, checkpoint_dir=out_dir, state=state, start_epoch=start_epoch)

    write_history(result.history, out_dir / HISTORY_NAME)
    final = out_dir / FINAL_CHECKPOINT_NAME
    save_checkpoint(final, result.params, result.state, train_config, train_config.epochs)
    print(final)
    return ExitCodes.OK


@cli_command
def cmd_infer(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    variant = checkpoint.params.variant
    seq = fit_sequence(load_sample(args.data, args.seq_id), variant)
    with no_grad():
        reconstruction = forward(seq, checkpoint.params, variant)
    save_image(reconstruction, args.out)
    logger.info(f"Reconstructed {args.seq_id} with {variant.name}")
    print(args.out)
    return ExitCodes.OK


@cli_command
def cmd_eval(args: argparse.Namespace) -> int:
    if not args.ckpt and not args.baselines:
        raise UsageError("eval needs at least one --ckpt or --baselines")
    dataset = load_dataset(args.data)

    rows = [evaluate_checkpoint(path, dataset, threads=args.threads) for path in args.ckpt or []]
    if args.baselines:
        train_config = load_checkpoint(args.ckpt[0]).train_config if args.ckpt else None
        net = build_feature_network(train_config)
        hr_size = dataset[0].ground_truth.shape[-1] if dataset[0].ground_truth is not None else config.HR_SIZE
        rows.extend(evaluate_baselines(dataset, net, hr_size, threads=args.threads))

    write_report(rows, args.report)
    print(args.report)
    return ExitCodes.OK


@cli_command
def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradchecks(seed=args.seed, module=args.module)
    for result in results:
        status = 'ok' if result.passed else 'FAILED'
        print(f"{result.module}\t{result.op}\t{result.error:.3e}\t{status}")
    failed = [f"{result.module}.{result.op}" for result in results if not result.passed]
    if failed:
        raise GradcheckFailure(failed)
    return ExitCodes.OK


@cli_command
def cmd_compare(args: argparse.Namespace) -> int:
    train_config = _train_config(args.config, profile=args.profile, threads=args.threads)
    model_config = create_profile(train_config.profile, feature_channels=train_config.feature_channels)
    experiment = OrderingExperiment(train_samples=args.train_samples, heldout_samples=args.heldout_samples,
                                    frames=args.frames, epochs=args.epochs, pretrain_epochs=args.pretrain_epochs,
                                    seeds=tuple(args.seeds), margin=args.margin)
    results = compare_variants(model_config, train_config, experiment)
    holds = ordering_holds(results, experiment.frames, experiment.margin)
    logger.info(f"f{experiment.frames}warp ahead by {experiment.margin:.0%} on {int(holds.sum())} "
                f"of {len(holds)} seeds")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    results.to_csv(out, index=False)
    print(out)
    return ExitCodes.OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog='warpsr', description='Multi-frame face super-resolution with learned TPS warps')
    parser.add_argument('--log-level', default=None, help='Overrides WARPSR_LOG_LEVEL')
    parser.add_argument('--log-file', action='store_true', help=f'Also write DEBUG logs to {config.LOG_FILE}')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth-data', help='Write a synthetic face-sequence dataset')
    synth.add_argument('--out', required=True, help='Output directory')
    synth.add_argument('--samples', type=int, required=True)
    synth.add_argument('--frames', type=int, required=True, help='Odd sequence length (1, 5, 25)')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--no-blur', action='store_true', help='Downsample without the Gaussian blur')
    synth.add_argument('--profile', default=config.DEFAULT_PROFILE, choices=get_available_profiles(),
                       help='Model profile whose image sizes and blur are used')
    synth.add_argument('--threads', type=int, default=config.THREADS)
    synth.set_defaults(handler=cmd_synth_data)

    pretrain = commands.add_parser('pretrain-warp', help='Unsupervised warp-predictor pretraining')
    pretrain.add_argument('--data', required=True, help='Dataset directory')
    pretrain.add_argument('--out', required=True, help='Output warp-weights file')
    pretrain.add_argument('--config', help='YAML run config')
    pretrain.add_argument('--profile', choices=get_available_profiles())
    pretrain.add_argument('--epochs', type=int)
    pretrain.add_argument('--seed', type=int)
    pretrain.add_argument('--threads', type=int)
    pretrain.set_defaults(handler=cmd_pretrain_warp)

    trainer = commands.add_parser('train', help='End-to-end training')
    trainer.add_argument('--config', required=True, help='YAML run config')
    trainer.add_argument('--data', required=True, help='Dataset directory')
    trainer.add_argument('--out', required=True, help='Directory for checkpoints and history.csv')
    trainer.add_argument('--resume', help='Checkpoint to continue from')
    trainer.add_argument('--threads', type=int)
    trainer.set_defaults(handler=cmd_train)

    infer = commands.add_parser('infer', help='Reconstruct one sequence')
    infer.add_argument('--ckpt', required=True)
    infer.add_argument('--data', required=True, help='Dataset directory')
    infer.add_argument('--seq-id', required=True)
    infer.add_argument('--out', required=True, help='Output PNG')
    infer.set_defaults(handler=cmd_infer)

    evaluate = commands.add_parser('eval', help='Metric report over checkpoints and baselines')
    evaluate.add_argument('--ckpt', action='append', help='Checkpoint to evaluate (repeatable)')
    evaluate.add_argument('--data', required=True, help='Dataset directory')
    evaluate.add_argument('--report', required=True, help='Output CSV')
    evaluate.add_argument('--baselines', action='store_true', help='Add ground-truth and bicubic rows')
    evaluate.add_argument('--threads', type=int, default=config.THREADS)
    evaluate.set_defaults(handler=cmd_eval)

    compare = commands.add_parser('compare', help='Train f1, fK and fKwarp on synthetic data and compare held-out MSE')
    compare.add_argument('--out', required=True, help='Output CSV')
    compare.add_argument('--config', help='YAML run config (lr, loss, batch size)')
    compare.add_argument('--profile', choices=get_available_profiles())
    compare.add_argument('--train-samples', type=int, default=256)
    compare.add_argument('--heldout-samples', type=int, default=64)
    compare.add_argument('--frames', type=int, default=5)
    compare.add_argument('--epochs', type=int, default=200)
    compare.add_argument('--pretrain-epochs', type=int, default=20)
    compare.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2, 3, 4])
    compare.add_argument('--margin', type=float, default=0.05)
    compare.add_argument('--threads', type=int)
    compare.set_defaults(handler=cmd_compare)

    gradcheck = commands.add_parser('gradcheck', help='Finite-difference gradient checks in 64-bit mode')
    gradcheck.add_argument('--seed', type=int, default=0)
    gradcheck.add_argument('--module', help=f'One of {get_available_modules()}')
    gradcheck.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return ExitCodes.USAGE

    setup_logger(level=args.log_level, log_file=args.log_file)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
