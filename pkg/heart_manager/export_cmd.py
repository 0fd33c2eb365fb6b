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
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from heart_manager.constants import (
    ACTIVITY_LOGGER_NAME,
    EMBEDDING_GROUP_TARGETS,
    EXIT_OK,
    N_EMBEDDING_GROUPS,
    SPLIT_NAMES,
)
from heart_manager.helpers import (
    DatasetIndex,
    encode_stack,
    require_data_dir,
    restore_model,
    run_config_of,
    write_json_report,
)
from heart_models.containers import load_checkpoint
from heart_models.mae import pooled_representation
from heart_models.metrics import quintile_groups, silhouette
from heart_models.phantom import PHENOTYPE_TARGETS

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_export_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("export-emb", help="Write pooled subject embeddings with phenotype groups as CSV.")
    parser.add_argument("--ckpt", required=True, help="Checkpoint file.")
    parser.add_argument("--split", choices=SPLIT_NAMES, required=True)
    parser.add_argument("--out", required=True, help="CSV path; a .silhouette.json sidecar is written next to it.")
    parser.add_argument("--data", default=None, help="Phantom dataset directory (defaults to $HEART_DATA_DIR).")
    parser.set_defaults(handler=run_export)
    return parser


def run_export(args: argparse.Namespace) -> int:
    export_embeddings(Path(args.ckpt), require_data_dir(args.data), args.split, Path(args.out))
    return EXIT_OK


def embedding_table(
    ckpt_path: Path, data_dir: Path, split: str, show_progress: Optional[bool] = None
) -> Tuple[pd.DataFrame, Dict]:
    """One row per subject: id, embedding components, phenotypes and their quintile groups."""
    checkpoint = load_checkpoint(ckpt_path)
    run_config = run_config_of(checkpoint)
    model = restore_model(checkpoint)
    dataset = DatasetIndex.open(data_dir)
    dataset.check_compatible(run_config.model)
    subjects = dataset.split(split)

    disable = None if show_progress is None else not show_progress
    embeddings = []
    for sid in tqdm(subjects, desc="export-emb", unit="subject", disable=disable):
        stack = dataset.load_stack(sid, run_config.model, run_config.views)
        embeddings.append(pooled_representation(encode_stack(model, stack)).data.reshape(-1))
    embeddings = np.stack(embeddings, axis=0).astype(np.float64)
    phenotypes = dataset.phenotype_matrix(subjects)

    width = len(str(embeddings.shape[1] - 1))
    table = pd.DataFrame({"subject": subjects})
    embedding_columns = pd.DataFrame(embeddings, columns=[f"z{i:0{width}d}" for i in range(embeddings.shape[1])])
    table = pd.concat([table, embedding_columns], axis=1)
    for j, name in enumerate(PHENOTYPE_TARGETS):
        table[name] = phenotypes[:, j]
    for j, name in enumerate(PHENOTYPE_TARGETS):
        table[f"group_{name}"] = quintile_groups(phenotypes[:, j], N_EMBEDDING_GROUPS)

    sidecar = {
        "checkpoint": str(ckpt_path),
        "config_hash": run_config.config_hash(),
        "split": split,
        "n_subjects": len(subjects),
        "silhouette": {
            name: silhouette(embeddings, table[f"group_{name}"].to_numpy()) for name in EMBEDDING_GROUP_TARGETS
        },
    }
    return table, sidecar


def export_embeddings(ckpt_path: Path, data_dir: Path, split: str, out_path: Path) -> Path:
    table, sidecar = embedding_table(ckpt_path, data_dir, split)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_path, index=False, float_format="%.9g")
    write_json_report(out_path.with_suffix(".silhouette.json"), sidecar)
    logger.info(f"Exported {len(table)} embeddings to {out_path}; silhouette {sidecar['silhouette']}")
    return out_path
