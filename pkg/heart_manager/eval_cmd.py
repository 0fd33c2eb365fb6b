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

from heart_manager.constants import (
    ACTIVITY_LOGGER_NAME,
    EVAL_TASKS,
    EXIT_OK,
    SEED_STREAM_EVAL_MASK,
    SPLIT_NAMES,
    VIEW_GROUPS,
    VIEW_SELECTIONS,
)
from heart_manager.helpers import (
    DatasetIndex,
    derive_seed,
    encode_stack,
    require_data_dir,
    restore_model,
    restore_phenotype_head,
    restore_seg_head,
    run_config_of,
    tokenize,
    write_json_report,
)
from heart_models.containers import load_checkpoint
from heart_models.errors import ConfigError
from heart_models.metrics import EvalReport, dice, mae_metric, mean_guess, psnr
from heart_models.phantom import CLASS_NAMES, PHENOTYPE_TARGETS
from heart_models.tokenizer import TokenBatch, sample_mask, unpatchify

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_eval_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on one split.")
    parser.add_argument("--task", choices=EVAL_TASKS, required=True)
    parser.add_argument("--ckpt", required=True, help="Checkpoint file.")
    parser.add_argument("--split", choices=SPLIT_NAMES, required=True)
    parser.add_argument("--data", default=None, help="Phantom dataset directory (defaults to $HEART_DATA_DIR).")
    parser.add_argument("--views", choices=VIEW_SELECTIONS, default=None, help="Defaults to the checkpoint's views.")
    parser.add_argument("--out", default=None, help="Report path (default: next to the checkpoint).")
    parser.set_defaults(handler=run_eval)
    return parser


def run_eval(args: argparse.Namespace) -> int:
    report = evaluate(Path(args.ckpt), require_data_dir(args.data), args.split, args.task, views=args.views)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.task}_{args.split}.json"
    write_json_report(out, report.to_dict())
    return EXIT_OK


def evaluate(
    ckpt_path: Path,
    data_dir: Path,
    split: str,
    task: str,
    views: Optional[str] = None,
    show_progress: Optional[bool] = None,
) -> EvalReport:
    if task not in EVAL_TASKS:
        raise ConfigError(f"Unknown evaluation task '{task}'; expected one of {EVAL_TASKS}.")
    checkpoint = load_checkpoint(ckpt_path)
    run_config = run_config_of(checkpoint)
    views = views or run_config.views
    dataset = DatasetIndex.open(data_dir)
    dataset.check_compatible(run_config.model)
    subjects = dataset.split(split)
    report = EvalReport(
        kind=task,
        metadata={
            "checkpoint": str(ckpt_path),
            "config_hash": run_config.config_hash(),
            "split": split,
            "views": views,
            "n_subjects": len(subjects),
        },
    )
    disable = None if show_progress is None else not show_progress
    progress = tqdm(subjects, desc=f"eval-{task}", unit="subject", disable=disable)

    if task == "recon":
        model = restore_model(checkpoint, require_decoder=True)
        for position, sid in enumerate(progress):
            stack = dataset.load_stack(sid, run_config.model, views)
            batch = tokenize(stack, run_config.model)
            plan = sample_mask(
                batch.n_tokens,
                run_config.model.mask_ratio,
                derive_seed(run_config.seed, SEED_STREAM_EVAL_MASK, position),
            )
            prediction = model.forward_pretrain(batch, plan).data.astype(np.float32)
            report.add_subject(reconstruction_entry(sid, batch, prediction))
        for group in VIEW_GROUPS:
            if any(entry.get(f"psnr_{group}") is not None for entry in report.per_subject):
                report.aggregate_metric(f"psnr_{group}")

    elif task == "phenotype":
        head, standardizer = restore_phenotype_head(checkpoint)
        if head is None:
            raise ConfigError(f"Checkpoint {ckpt_path} has no phenotype head; fine-tune with --task phenotype first.")
        model = restore_model(checkpoint)
        preds, truths = [], []
        for sid in progress:
            latents = encode_stack(model, dataset.load_stack(sid, run_config.model, views))
            pred = head.predict_phenotypes(latents, standardizer).as_array()
            truth = dataset.load_phenotypes(sid).as_array()
            preds.append(pred)
            truths.append(truth)
            entry = {"subject": sid}
            for j, name in enumerate(PHENOTYPE_TARGETS):
                entry[f"pred_{name}"] = float(pred[j])
                entry[f"true_{name}"] = float(truth[j])
                entry[f"abs_err_{name}"] = float(abs(pred[j] - truth[j]))
            report.add_subject(entry)
        train_truths = dataset.phenotype_matrix(dataset.split("finetune"))
        report.aggregate["mae"] = {k: v.to_dict() for k, v in mae_metric(np.array(preds), np.array(truths)).items()}
        report.aggregate["mean_guess"] = {k: v.to_dict() for k, v in mean_guess(train_truths, np.array(truths)).items()}

    else:
        head = restore_seg_head(checkpoint)
        if head is None:
            raise ConfigError(f"Checkpoint {ckpt_path} has no segmentation head; fine-tune with --task seg first.")
        model = restore_model(checkpoint)
        for sid in progress:
            stack = dataset.load_stack(sid, run_config.model, views)
            predicted = head.forward(encode_stack(model, stack)).predict_labels()
            labels = dataset.load_labels(sid, stack.view_tags)
            report.add_subject(segmentation_entry(sid, stack.view_tags, predicted, labels, head.config))
        keys = sorted({key for entry in report.per_subject for key in entry if key.startswith("dice_")})
        for key in keys:
            report.aggregate_metric(key)

    logger.info(f"Evaluated '{task}' on {len(subjects)} {split} subjects: {report.aggregate}")
    return report


def reconstruction_entry(sid: str, batch: TokenBatch, prediction: np.ndarray) -> Dict:
    """Per-plane PSNR of the full predicted planes, plus the SA and LA group means."""
    reference = unpatchify(batch)
    rebuilt = unpatchify(
        TokenBatch(
            tokens=prediction,
            index=batch.index,
            grid=batch.grid,
            patch_size=batch.patch_size,
            patch_frames=batch.patch_frames,
            view_tags=batch.view_tags,
            normalization=batch.normalization,
        )
    )
    per_plane = {
        tag: psnr(ref, test) for tag, ref, test in zip(reference.view_tags, reference.planes, rebuilt.planes)
    }
    entry: Dict = {"subject": sid, "planes": per_plane}
    for group in VIEW_GROUPS:
        values = [value for tag, value in per_plane.items() if tag.startswith(group)]
        entry[f"psnr_{group}"] = float(np.mean(values)) if values else None
    return entry


def segmentation_entry(
    sid: str, view_tags: List[str], predicted: np.ndarray, labels: np.ndarray, seg_config
) -> Dict:
    """Dice per class over all planes and per view group; classes a view does not label are skipped."""
    entry: Dict = {"subject": sid}
    groups = {"all": list(range(len(view_tags)))}
    for group in VIEW_GROUPS:
        members = [i for i, tag in enumerate(view_tags) if tag.startswith(group)]
        if members:
            groups[group] = members
    for group, members in groups.items():
        for class_id in range(1, len(CLASS_NAMES)):
            members_with_class = [i for i in members if class_id in seg_config.available_classes(view_tags[i])]
            if not members_with_class:
                continue
            score = dice(predicted[members_with_class], labels[members_with_class], class_id)
            entry[f"dice_{group}_{CLASS_NAMES[class_id]}"] = score
    return entry
