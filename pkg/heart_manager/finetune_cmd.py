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
from typing import Any, Dict, List, Optional, Tuple

from tqdm import tqdm

from heart_manager.constants import (
    ACTIVITY_LOGGER_NAME,
    CHECKPOINT_FILE_NAME,
    EXIT_OK,
    FINETUNE_TASKS,
    METRICS_FILE_NAME,
    PHASE_FINETUNE,
    RUN_CONFIG_FILE_NAME,
    RUN_CONFIG_HELPTEXT,
    SEED_STREAM_PHENOTYPE_HEAD,
    SEED_STREAM_SEG_HEAD,
    VIEW_SELECTIONS,
)
from heart_manager.helpers import (
    DatasetIndex,
    MetricsLog,
    RunConfig,
    apply_gradients,
    build_checkpoint,
    derive_seed,
    encode_stack,
    load_run_config,
    require_data_dir,
    restore_model,
    run_config_of,
    run_lock,
    schedule_lr,
    step_subjects,
    summarize_config,
    write_json_report,
)
from heart_models.containers import Checkpoint, load_checkpoint, save_checkpoint
from heart_models.errors import ConfigError
from heart_models.heads import PhenotypeHead, SegmentationHead, Standardizer, phenotype_loss, seg_loss
from heart_models.mae import MaskedAutoencoder
from heart_models.tensor_engine import Graph, OptimState, Tensor, add, scale

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)

RANDOM_INIT = "random"


def create_finetune_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("finetune", help="Phase II: attach a task head and fine-tune on the finetune split.")
    parser.add_argument("--task", choices=FINETUNE_TASKS, required=True)
    parser.add_argument("--init", required=True, help="Pretraining checkpoint, or 'random' for a random-init baseline.")
    parser.add_argument("--data", default=None, help="Phantom dataset directory (defaults to $HEART_DATA_DIR).")
    parser.add_argument("--out", required=True, help="Run directory for the fine-tuned checkpoint.")
    parser.add_argument("--config", default=None, help=f"Required with --init random. {RUN_CONFIG_HELPTEXT}")
    parser.add_argument("--views", choices=VIEW_SELECTIONS, default=None, help="Planes fed to the model.")
    parser.add_argument("--steps", type=int, default=None, help="Override the preset's finetune_steps.")
    parser.set_defaults(handler=run_finetune)
    return parser


def run_finetune(args: argparse.Namespace) -> int:
    finetune(
        task=args.task,
        init=args.init,
        data_dir=require_data_dir(args.data),
        out_dir=Path(args.out),
        config=args.config,
        views=args.views,
        steps=args.steps,
    )
    return EXIT_OK


def resolve_init(
    init: str, config: Optional[str], **overrides: Any
) -> Tuple[RunConfig, MaskedAutoencoder, Optional[str]]:
    """Run config and encoder for fine-tuning; the decoder of a checkpoint is never used."""
    if init == RANDOM_INIT:
        if config is None:
            raise ConfigError("--init random needs --config to define the model.")
        run_config = load_run_config(config, **overrides)
        return run_config, MaskedAutoencoder(run_config.model, seed=run_config.seed), None
    checkpoint = load_checkpoint(Path(init))
    run_config = run_config_of(checkpoint).with_overrides(**overrides)
    model = restore_model(checkpoint)
    logger.info(f"Initialized encoder from {init} (step {checkpoint.step}).")
    return run_config, model, checkpoint.extra.get("config_hash")


def finetune(
    task: str,
    init: str,
    data_dir: Path,
    out_dir: Path,
    config: Optional[str] = None,
    views: Optional[str] = None,
    steps: Optional[int] = None,
    show_progress: Optional[bool] = None,
) -> Checkpoint:
    if task not in FINETUNE_TASKS:
        raise ConfigError(f"Unknown fine-tuning task '{task}'; expected one of {FINETUNE_TASKS}.")
    run_config, model, source_hash = resolve_init(init, config, views=views, finetune_steps=steps)
    dataset = DatasetIndex.open(data_dir)
    dataset.check_compatible(run_config.model)
    subjects = dataset.split("finetune")
    logger.info(f"Fine-tuning '{task}' {summarize_config(run_config)} on {len(subjects)} subjects.")

    extra: Dict[str, Any] = {"phase": "finetune", "task": task, "init": init, "views": run_config.views}
    if source_hash is not None:
        extra["pretrain_config_hash"] = source_hash
    if task == "phenotype":
        standardizer = Standardizer.fit(dataset.phenotype_matrix(subjects))
        head = PhenotypeHead(
            run_config.phenotype_head, seed=derive_seed(run_config.seed, SEED_STREAM_PHENOTYPE_HEAD)
        )
        extra["standardizer"] = standardizer.to_dict()
        batch_size = run_config.phenotype_batch_size
    else:
        standardizer = None
        head = SegmentationHead(
            run_config.seg_head, run_config.model, seed=derive_seed(run_config.seed, SEED_STREAM_SEG_HEAD)
        )
        batch_size = run_config.seg_batch_size

    params = dict(model.encoder_params())
    params.update(head.params)
    state = OptimState(lr=run_config.finetune_lr, weight_decay=run_config.weight_decay)
    total = run_config.finetune_steps
    run_hash = run_config.config_hash()

    out_dir = Path(out_dir)
    with run_lock(out_dir):
        write_json_report(out_dir / RUN_CONFIG_FILE_NAME, run_config.to_dict())
        metrics = MetricsLog(out_dir / METRICS_FILE_NAME)
        disable = None if show_progress is None else not show_progress
        for step in tqdm(range(total), desc=f"finetune-{task}", unit="step", disable=disable):
            ids = step_subjects(subjects, batch_size, run_config.seed, PHASE_FINETUNE, step)
            graph = Graph()
            with graph:
                losses = [task_loss(task, dataset, sid, run_config, model, head, standardizer) for sid in ids]
                loss = losses[0]
                for extra_loss in losses[1:]:
                    loss = add(loss, extra_loss)
                loss = scale(loss, 1.0 / len(losses))

            lr = schedule_lr(step, total, run_config.finetune_lr, 0.0, run_config.warmup_frac)
            context = f"finetune-{task} step {step} (seed {run_config.seed}, subjects {ids})"
            params, state, value = apply_gradients(graph, loss, params, state, lr, context)
            _distribute(params, model, head)
            metrics.append({"step": step, "loss": value, "lr": lr, "subjects": ids, "config_hash": run_hash})
            if step == 0 or (step + 1) % max(total // 10, 1) == 0:
                logger.info(f"step {step + 1}/{total} loss={value:.6f} lr={lr:.3e}")

        final = build_checkpoint(run_config, total, params, extra=extra)
        save_checkpoint(out_dir / CHECKPOINT_FILE_NAME, final)
    return final


def _distribute(params: Dict[str, Tensor], model: MaskedAutoencoder, head) -> None:
    for name, tensor in params.items():
        if name in head.params:
            head.params[name] = tensor
        else:
            model.params[name] = tensor


def task_loss(
    task: str,
    dataset: DatasetIndex,
    sid: str,
    run_config: RunConfig,
    model: MaskedAutoencoder,
    head,
    standardizer: Optional[Standardizer],
) -> Tensor:
    """Loss of one subject with every selected plane forwarded unmasked."""
    stack = dataset.load_stack(sid, run_config.model, run_config.views)
    latents = encode_stack(model, stack)
    if task == "phenotype":
        truth = dataset.load_phenotypes(sid).as_array()
        return phenotype_loss(head.forward(latents), truth, standardizer)
    output = head.forward(latents)
    labels = dataset.load_labels(sid, stack.view_tags)
    availability = availability_for(head, stack.view_tags)
    return seg_loss(output, labels, availability, smooth=head.config.dice_smooth)


def availability_for(head: SegmentationHead, view_tags: List[str]) -> List[Tuple[int, ...]]:
    return [head.config.available_classes(tag) for tag in view_tags]
