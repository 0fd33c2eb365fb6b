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
from pathlib import Path

from heart_manager.constants import ACTIVITY_LOGGER_NAME, EXIT_OK, PHANTOM_SIZES
from heart_models.phantom.dataset import build_dataset, split_counts

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_phantom_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("phantom-gen", help="Generate a synthetic whole-heart cine dataset.")
    parser.add_argument("--n", type=int, required=True, help="Number of subjects.")
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--out", required=True, help="Dataset directory.")
    parser.add_argument("--size", type=int, choices=PHANTOM_SIZES, default=64, help="Plane extent in pixels.")
    parser.add_argument("--frames", type=int, default=50, help="Frames per cardiac cycle.")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes; output bytes do not depend on it.")
    parser.set_defaults(handler=run_phantom)
    return parser


def run_phantom(args: argparse.Namespace) -> int:
    out = build_dataset(
        n_subjects=args.n,
        seed=args.seed,
        out_dir=Path(args.out),
        size=args.size,
        workers=args.workers,
        n_frames=args.frames,
    )
    counts = split_counts(args.n)
    logger.info(f"Wrote {args.n} subjects to {out} (splits {counts}).")
    return EXIT_OK
