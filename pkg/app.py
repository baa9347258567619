# Copyright 2024 D-Wave
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

import app_commands
from app_configs import APP_TITLE, DEFAULT_TEMPERATURE, RANDOM_SEED
from src.errors import AttnFlowError
from src.flow_enums import VerifySuite

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY_FAILED = 3

LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


class UsageError(Exception):
    """Raised by the argument parser instead of exiting with status 2."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="app.py", description=f"{APP_TITLE}: train and check invertible attention flows.")
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Repeat for more logging (-v INFO, -vv DEBUG).",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    train = commands.add_parser("train", help="Train a flow and write a run directory.")
    train.add_argument("--config", help="Run configuration file (defaults when omitted).")
    train.add_argument("--data", help="Toy dataset name or IDX image file.")
    train.add_argument("--out", required=True, help="Run directory.")
    train.add_argument("--seed", type=int, help="Override every seed of the run.")
    train.add_argument("--resume", help="Checkpoint to continue training from.")

    sample = commands.add_parser("sample", help="Write samples of a trained flow as a PGM grid.")
    sample.add_argument("--ckpt", required=True)
    sample.add_argument("--n", type=int, default=16)
    sample.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    sample.add_argument("--out", required=True, help="Output PGM file.")
    sample.add_argument("--seed", type=int, default=RANDOM_SEED)
    sample.add_argument("--data", help="Source of conditions for conditional models.")

    evaluate = commands.add_parser("eval", help="Print the bits/dim of a dataset.")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--data")

    reconstruct = commands.add_parser("reconstruct", help="Check forward/inverse reconstruction.")
    reconstruct.add_argument("--ckpt", required=True)
    reconstruct.add_argument("--data")
    reconstruct.add_argument("--out", required=True, help="Output directory.")

    check = commands.add_parser("verify", help="Run the numerical oracle suite.")
    check.add_argument("--suite", choices=[s.value for s in VerifySuite], default=VerifySuite.ALL.value)
    check.add_argument("--seed", type=int, default=RANDOM_SEED)
    check.add_argument("--out", help="CSV report file.")

    ablate = commands.add_parser("ablate", help="Train every attention position and head count.")
    ablate.add_argument("--config")
    ablate.add_argument("--data")
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--heads", type=int, nargs="+", help="iSDP head counts to sweep.")

    return parser


def dispatch(args: argparse.Namespace) -> int:
    """Run the selected command and print its user-facing result."""
    if args.command == "train":
        result = app_commands.cmd_train(args.config, args.data, args.out, args.seed, args.resume)
        print(f"trained {result.iterations} iterations, nll = {result.final_nll:.6f}")
        print(f"checkpoint: {result.checkpoint_path}")
    elif args.command == "sample":
        result = app_commands.cmd_sample(
            args.ckpt, args.n, args.temperature, args.out, args.seed, args.data
        )
        print(f"samples: {result.path}")
    elif args.command == "eval":
        result = app_commands.cmd_eval(args.ckpt, args.data)
        print(f"bits/dim = {result.bpd:.8f}")
    elif args.command == "reconstruct":
        result = app_commands.cmd_reconstruct(args.ckpt, args.data, args.out)
        print(f"max abs error = {result.max_abs_error:.3e} over {result.count} samples")
    elif args.command == "verify":
        result = app_commands.cmd_verify(args.suite, args.seed, args.out)
        failed = [r for r in result.reports if not r.passed]
        for report in failed:
            print(f"FAIL {report.subject} {report.check}: {report.error:.3e} > {report.tolerance:.1e}")
        print(f"{len(result.reports) - len(failed)}/{len(result.reports)} checks passed")
        if not result.passed:
            return EXIT_VERIFY_FAILED
    elif args.command == "ablate":
        heads = tuple(args.heads) if args.heads else app_commands.ABLATION_HEADS
        result = app_commands.cmd_ablate(args.config, args.data, args.out, heads)
        print(f"ablation: {result.csv_path}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv``, run the command and map failures to exit codes.

    Usage errors exit 1, data and format errors 2, numerical failures 3. Every
    failure prints a single diagnostic line to standard error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE

    level = LOG_LEVELS[min(args.verbose, len(LOG_LEVELS) - 1)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return dispatch(args)
    except AttnFlowError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
