# Copyright (c) 2024, The FSDet Authors
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

"""Command line entry point: run, ablate, analyze and eval."""

import argparse
import logging
import os
import sys

import yaml

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from .arguments import FSDetArgs
from .errors import ConfigurationError, TrainingAbort

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3


def get_parser():
    parser = argparse.ArgumentParser(
        prog="fsdet", description="Few-shot object detection experiments", allow_abbrev=False
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        group = p.add_argument_group(title="Configuration")
        group.add_argument(
            "--config",
            "-c",
            type=str,
            nargs="+",
            required=True,
            help="Configuration file path (yml, json or toml). Multiple files are merged.",
        )
        group.add_argument(
            "--conf_dir",
            "-d",
            type=str,
            default=None,
            help="Directory to prefix to all configuration file paths",
        )
        group.add_argument(
            "--set",
            dest="overrides",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            help="Override one argument, e.g. --set train.stage2.K=1. May be repeated.",
        )
        group.add_argument(
            "--seed",
            type=int,
            default=None,
            help="Seed of stage I and the only stage-II seed.",
        )
        group.add_argument("--out", type=str, default=None, help="Output directory.")

    p = subparsers.add_parser("run", help="stage I once, stage II and evaluation per (K, seed)")
    add_config_args(p)

    p = subparsers.add_parser("ablate", help="run every variant of one ablation axis")
    add_config_args(p)
    p.add_argument("--axis", type=str.upper, required=True, help="ablation axis")

    p = subparsers.add_parser("analyze", help="similarity, prototype distance or recall analysis")
    p.add_argument("run_dir", type=str, help="hashed run directory")
    p.add_argument(
        "--analysis", type=str.lower, required=True, choices=["similarity", "proto_dist", "recall"]
    )
    p.add_argument(
        "--compare", type=str, nargs="*", default=None, help="other run directories (recall only)"
    )

    p = subparsers.add_parser("eval", help="re-evaluate the stage-II checkpoints of a run")
    p.add_argument("run_dir", type=str, help="hashed run directory")
    return parser


def args_from_cli(parsed) -> FSDetArgs:
    conf_files = parsed.config
    if parsed.conf_dir:
        conf_files = [os.path.join(parsed.conf_dir, f) for f in conf_files]
    overwrite_values = FSDetArgs.parse_overrides(parsed.overrides)
    if parsed.seed is not None:
        overwrite_values.update(seed=parsed.seed, seeds=[parsed.seed])
    if parsed.out is not None:
        overwrite_values["out"] = parsed.out
    args = FSDetArgs.from_files(conf_files, overwrite_values=overwrite_values)
    args.print()
    args.initialize_tensorboard_writer()
    return args


def dispatch(parsed):
    from . import experiments

    if parsed.command == "run":
        experiments.cmd_run(args_from_cli(parsed))
    elif parsed.command == "ablate":
        if parsed.axis not in experiments.ABLATION_AXES:
            raise ConfigurationError(
                f"ablation axis '{parsed.axis}' not recognized, choose from {', '.join(experiments.ABLATION_AXES)}"
            )
        experiments.cmd_ablate(args_from_cli(parsed), parsed.axis)
    elif parsed.command == "analyze":
        experiments.cmd_analyze(parsed.run_dir, parsed.analysis, parsed.compare)
    elif parsed.command == "eval":
        experiments.cmd_eval(parsed.run_dir)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LOGLEVEL", "INFO"))
    parsed = get_parser().parse_args(argv)
    try:
        dispatch(parsed)
    except (ConfigurationError, yaml.YAMLError, tomllib.TOMLDecodeError) as e:
        logging.error(f"invalid configuration: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logging.error(f"missing file: {e}")
        return EXIT_CONFIG
    except TrainingAbort as e:
        logging.error(f"training aborted: {e} (snapshot: {e.snapshot})")
        return EXIT_ABORT
    except Exception as e:
        logging.exception(f"{parsed.command} failed: {e}")
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
