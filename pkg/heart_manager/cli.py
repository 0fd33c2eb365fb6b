#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

import argparse
import logging
from typing import List, Optional

from heart_manager.constants import ACTIVITY_LOGGER_NAME, EXIT_CONFIG_ERROR, EXIT_DATA_ERROR
from heart_manager.eval_cmd import create_eval_parser
from heart_manager.export_cmd import create_export_parser
from heart_manager.finetune_cmd import create_finetune_parser
from heart_manager.helpers import configure_logging
from heart_manager.phantom_cmd import create_phantom_parser
from heart_manager.pretrain_cmd import create_pretrain_parser
from heart_manager.robustness_cmd import create_robustness_parser
from heart_models.errors import HeartError

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heart-manager",
        description="Whole-heart multi-view masked autoencoder: phantom data, pretraining, fine-tuning, evaluation.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    create_phantom_parser(subparsers)
    create_pretrain_parser(subparsers)
    create_finetune_parser(subparsers)
    create_eval_parser(subparsers)
    create_robustness_parser(subparsers)
    create_export_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0, or 2/3/4 for config, data and numeric failures."""
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG_ERROR if e.code else 0
    configure_logging()
    logger.info(f"Running '{args.command}'.")
    try:
        return args.handler(args)
    except HeartError as e:
        logger.error(f"'{args.command}' failed ({type(e).__name__}): {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"'{args.command}' failed on file {e.filename}: {e}")
        return EXIT_DATA_ERROR
