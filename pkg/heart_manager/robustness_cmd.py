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
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from heart_manager.constants import ACTIVITY_LOGGER_NAME, EXIT_OK, SEED_STREAM_PLANE_DROP, SPLIT_NAMES
from heart_manager.helpers import (
    DatasetIndex,
    derive_seed,
    encode_stack,
    require_data_dir,
    restore_model,
    restore_phenotype_head,
    run_config_of,
    write_json_report,
)
from heart_models.containers import load_checkpoint
from heart_models.errors import ConfigError
from heart_models.mae import pooled_representation
from heart_models.metrics import EvalReport, cosine_similarity, summarize
from heart_models.phantom import PHENOTYPE_TARGETS
from heart_models.tokenizer import drop_planes

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_robustness_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("robustness", help="Representation stability when planes are missing at inference.")
    parser.add_argument("--ckpt", required=True, help="Checkpoint file.")
    parser.add_argument("--split", choices=SPLIT_NAMES, required=True)
    parser.add_argument("--drop", type=int, required=True, help="Planes removed per trial; 0 <= drop < planes.")
    parser.add_argument("--trials", type=int, default=5, help="Random plane subsets per subject.")
    parser.add_argument("--data", default=None, help="Phantom dataset directory (defaults to $HEART_DATA_DIR).")
    parser.add_argument("--out", default=None, help="Report path (default: next to the checkpoint).")
    parser.set_defaults(handler=run_robustness)
    return parser


def run_robustness(args: argparse.Namespace) -> int:
    report = robustness(Path(args.ckpt), require_data_dir(args.data), args.split, args.drop, args.trials)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"robustness_drop{args.drop}_{args.split}.json"
    write_json_report(out, report.to_dict())
    return EXIT_OK


def robustness(
    ckpt_path: Path,
    data_dir: Path,
    split: str,
    n_drop: int,
    trials: int,
    show_progress: Optional[bool] = None,
) -> EvalReport:
    """Cosine similarity of pooled representations with and without ``n_drop`` random planes.

    Dropped planes are removed as tokens at inference; the model is not
    retrained. With a phenotype head in the checkpoint, per-target prediction
    deltas (dropped minus full) are reported too.
    """
    checkpoint = load_checkpoint(ckpt_path)
    run_config = run_config_of(checkpoint)
    model = restore_model(checkpoint)
    head, standardizer = restore_phenotype_head(checkpoint)
    dataset = DatasetIndex.open(data_dir)
    dataset.check_compatible(run_config.model)
    subjects = dataset.split(split)
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}.")

    report = EvalReport(
        kind="robustness",
        metadata={
            "checkpoint": str(ckpt_path),
            "config_hash": run_config.config_hash(),
            "split": split,
            "n_drop": n_drop,
            "trials": trials,
            "views": run_config.views,
        },
    )
    disable = None if show_progress is None else not show_progress
    for position, sid in enumerate(tqdm(subjects, desc="robustness", unit="subject", disable=disable)):
        stack = dataset.load_stack(sid, run_config.model, run_config.views)
        if not 0 <= n_drop < len(stack.plane_ids):
            raise ConfigError(f"Cannot drop {n_drop} of {len(stack.plane_ids)} planes; need 0 <= n_drop < planes.")
        full_latents = encode_stack(model, stack)
        full = pooled_representation(full_latents).data.reshape(-1)
        full_pred = head.predict_phenotypes(full_latents, standardizer).as_array() if head is not None else None

        for trial in range(trials):
            rng = np.random.default_rng(derive_seed(run_config.seed, SEED_STREAM_PLANE_DROP, position, trial))
            dropped = sorted(int(p) for p in rng.choice(stack.plane_ids, size=n_drop, replace=False))
            reduced_latents = encode_stack(model, drop_planes(stack, dropped))
            reduced = pooled_representation(reduced_latents).data.reshape(-1)
            entry: Dict = {
                "subject": sid,
                "trial": trial,
                "dropped": [stack.view_tags[stack.plane_ids.index(p)] for p in dropped],
                "cosine": cosine_similarity(full, reduced),
            }
            if full_pred is not None:
                delta = head.predict_phenotypes(reduced_latents, standardizer).as_array() - full_pred
                for j, name in enumerate(PHENOTYPE_TARGETS):
                    entry[f"delta_{name}"] = float(delta[j])
            report.add_subject(entry)

    cosines: List[float] = [entry["cosine"] for entry in report.per_subject]
    summary = report.aggregate_metric("cosine")
    report.aggregate["cosine"] = dict(summary.to_dict(), min=float(np.min(cosines)))
    if head is not None:
        for name in PHENOTYPE_TARGETS:
            deltas = [entry[f"delta_{name}"] for entry in report.per_subject]
            report.aggregate[f"delta_{name}"] = dict(
                summarize(deltas).to_dict(), mean_abs=float(np.mean(np.abs(deltas)))
            )
    logger.info(f"Robustness n_drop={n_drop}: cosine {report.aggregate['cosine']}")
    return report
