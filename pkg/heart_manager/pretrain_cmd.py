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
from typing import Optional

from tqdm import tqdm

from heart_manager.constants import (
    ACTIVITY_LOGGER_NAME,
    CHECKPOINT_FILE_NAME,
    EXIT_OK,
    METRICS_FILE_NAME,
    PHASE_PRETRAIN,
    RUN_CONFIG_FILE_NAME,
    RUN_CONFIG_HELPTEXT,
    VIEW_SELECTIONS,
)
from heart_manager.helpers import (
    DatasetIndex,
    MetricsLog,
    RunConfig,
    apply_gradients,
    build_checkpoint,
    load_run_config,
    require_data_dir,
    run_lock,
    schedule_lr,
    step_subjects,
    summarize_config,
    tokenize,
    write_json_report,
)
from heart_models.containers import Checkpoint, save_checkpoint
from heart_models.mae import LOSS_SCOPES, MaskedAutoencoder, pretrain_loss
from heart_models.tensor_engine import Graph, OptimState, add, scale
from heart_models.tokenizer import mask_seed, sample_mask

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)


def create_pretrain_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("pretrain", help="Phase I masked-autoencoder pretraining on the pretrain split.")
    parser.add_argument("--data", default=None, help="Phantom dataset directory (defaults to $HEART_DATA_DIR).")
    parser.add_argument("--config", required=True, help=RUN_CONFIG_HELPTEXT)
    parser.add_argument("--out", required=True, help="Run directory; owned exclusively while training.")
    parser.add_argument("--views", choices=VIEW_SELECTIONS, default=None, help="Planes fed to the model.")
    parser.add_argument("--loss-scope", choices=LOSS_SCOPES, default=None, dest="loss_scope")
    parser.add_argument("--steps", type=int, default=None, help="Override the preset's total_steps.")
    parser.add_argument("--seed", type=int, default=None, help="Override the run seed.")
    parser.set_defaults(handler=run_pretrain)
    return parser


def run_pretrain(args: argparse.Namespace) -> int:
    run_config = load_run_config(
        args.config,
        views=args.views,
        loss_scope=args.loss_scope,
        total_steps=args.steps,
        seed=args.seed,
    )
    pretrain(run_config, require_data_dir(args.data), Path(args.out))
    return EXIT_OK


def pretrain(run_config: RunConfig, data_dir: Path, out_dir: Path, show_progress: Optional[bool] = None) -> Checkpoint:
    """Train the autoencoder and write ``<out>/checkpoint.cvc``.

    Each step draws ``batch_size`` subjects, masks each with a seed derived
    from (run seed, step, item) and averages their reconstruction losses.
    """
    dataset = DatasetIndex.open(data_dir)
    dataset.check_compatible(run_config.model)
    subjects = dataset.split("pretrain")
    model_config = run_config.model
    model = MaskedAutoencoder(model_config, seed=run_config.seed)
    state = OptimState(lr=run_config.lr_max, weight_decay=run_config.weight_decay)
    total = run_config.total_steps
    run_hash = run_config.config_hash()
    logger.info(f"Pretraining {summarize_config(run_config)} on {len(subjects)} subjects for {total} steps.")
    logger.info(f"Model has {model.parameter_count()} parameters.")

    out_dir = Path(out_dir)
    with run_lock(out_dir):
        write_json_report(out_dir / RUN_CONFIG_FILE_NAME, run_config.to_dict())
        metrics = MetricsLog(out_dir / METRICS_FILE_NAME)
        disable = None if show_progress is None else not show_progress
        for step in tqdm(range(total), desc="pretrain", unit="step", disable=disable):
            ids = step_subjects(subjects, run_config.batch_size, run_config.seed, PHASE_PRETRAIN, step)
            graph = Graph()
            with graph:
                total_loss = None
                for item, sid in enumerate(ids):
                    stack = dataset.load_stack(sid, model_config, run_config.views)
                    batch = tokenize(stack, model_config)
                    plan = sample_mask(batch.n_tokens, model_config.mask_ratio, mask_seed(run_config.seed, step, item))
                    prediction = model.forward_pretrain(batch, plan)
                    loss = pretrain_loss(batch.tokens, prediction, plan, run_config.loss_scope)
                    total_loss = loss if total_loss is None else add(total_loss, loss)
                loss = scale(total_loss, 1.0 / len(ids))

            lr = schedule_lr(step, total, run_config.lr_max, run_config.lr_min, run_config.warmup_frac)
            context = f"pretrain step {step} (seed {run_config.seed}, subjects {ids})"
            model.params, state, value = apply_gradients(graph, loss, model.params, state, lr, context)
            metrics.append({"step": step, "loss": value, "lr": lr, "subjects": ids, "config_hash": run_hash})
            if step == 0 or (step + 1) % max(total // 10, 1) == 0:
                logger.info(f"step {step + 1}/{total} loss={value:.6f} lr={lr:.3e}")

            if run_config.checkpoint_every and (step + 1) % run_config.checkpoint_every == 0 and step + 1 < total:
                periodic = build_checkpoint(
                    run_config, step + 1, model.params, optim_state=state, extra={"phase": "pretrain"}
                )
                save_checkpoint(out_dir / f"checkpoint_step{step + 1:06d}.cvc", periodic)

        final = build_checkpoint(
            run_config,
            total,
            model.params,
            extra={"phase": "pretrain", "parameter_count": model.parameter_count(), "views": run_config.views},
        )
        save_checkpoint(out_dir / CHECKPOINT_FILE_NAME, final)
    return final
