"""
Command-line interface: ``python-pat <subcommand> --config FILE --out DIR``.
"""

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .bench import METHODS
from .config import load_config
from .exceptions import PatError
from .runner import ExperimentRunner

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('generate-data', 'train-dgd', 'train-unet', 'reconstruct', 'evaluate', 'bench', 'transfer')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="experiment configuration file (defaults if omitted)")
    common.add_argument('--out', default='.', help="experiment output directory (default: current directory)")
    common.add_argument('--seed', type=int, help="base seed overriding data, DGD and U-Net seeds")
    common.add_argument('--threads', type=int, help="maximum worker threads")
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help="-v for progress, -vv for debug output")

    parser = argparse.ArgumentParser(
        prog='python-pat',
        description="Learned and variational photoacoustic reconstruction experiments")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('generate-data', parents=[common], help="simulate training and test sets")
    sub.add_parser('train-dgd', parents=[common], help="greedy stage-wise DGD training")
    sub.add_parser('train-unet', parents=[common], help="train the U-Net post-processing baseline")
    recon = sub.add_parser('reconstruct', parents=[common], help="reconstruct one stored sample")
    recon.add_argument('--method', required=True, choices=METHODS)
    recon.add_argument('--input', required=True, help="sample directory (data/<split>/sample_NNNN)")
    sub.add_parser('evaluate', parents=[common], help="evaluate every method on the test set")
    sub.add_parser('bench', parents=[common], help="convergence, timing and robustness experiments")
    sub.add_parser('transfer', parents=[common], help="update both networks on a shifted domain")
    return parser


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise PatError(f"--threads must be at least 1, got {args.threads}")
        config = config.with_threads(args.threads)
    runner = ExperimentRunner(config, args.out)
    if args.command == 'generate-data':
        runner.generate_data()
    elif args.command == 'train-dgd':
        runner.train_dgd()
    elif args.command == 'train-unet':
        runner.train_unet()
    elif args.command == 'reconstruct':
        runner.reconstruct(args.method, args.input)
    elif args.command == 'evaluate':
        for report in runner.evaluate():
            print(f"{report.method:8s} err={report.mean_err:.4f} psnr={report.mean_psnr:.2f} "
                  f"ssim={report.mean_ssim:.4f}")
    elif args.command == 'bench':
        runner.bench()
    elif args.command == 'transfer':
        for key, value in runner.transfer().items():
            print(f"{key}: {value:.4f}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point; returns the process exit code.

    0 on success, 1 on any library error (message on standard error),
    2 on a usage error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.verbose)
    try:
        run(args)
    except PatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0
