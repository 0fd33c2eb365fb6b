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

import copy
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from heart_manager.constants import (
    ACTIVITY_LOG_FILE_NAME,
    ACTIVITY_LOGGER_NAME,
    DEFAULT_LOG_DIR,
    LOCK_FILE_NAME,
    MODEL_PREFIXES,
    OPTIM_FIRST_MOMENT_PREFIX,
    OPTIM_SECOND_MOMENT_PREFIX,
    SEED_STREAM_SUBJECTS,
    SPLIT_NAMES,
    VIEW_SELECTIONS,
)
from heart_models.containers import Checkpoint, read_container
from heart_models.errors import ConfigError, ContainerFormatError, DataError, NumericError
from heart_models.heads import PhenotypeHead, PhenotypeHeadConfig, SegHeadConfig, SegmentationHead, Standardizer
from heart_models.mae import LOSS_SCOPES, LatentTokens, MaskedAutoencoder, ModelConfig, config_hash
from heart_models.phantom import PhenotypeVector
from heart_models.tensor_engine import (
    Graph,
    OptimState,
    Tensor,
    adamw_step,
    backward,
    cosine_lr,
    default_warmup,
    parameter,
)
from heart_models.tokenizer import PlaneStack, TokenBatch, patchify, select_views

logger = logging.getLogger(ACTIVITY_LOGGER_NAME)

MANIFEST_NAME = "manifest.json"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(module)s - %(funcName)s - %(message)s"


# --- Logging ---


def configure_logging(log_dir: Optional[str] = None, level: int = logging.INFO) -> logging.Logger:
    """Attach the rotating activity-log file handler and a stderr handler once per process."""
    if logger.handlers:
        return logger
    log_dir = log_dir or os.getenv("HEART_LOG_DIR", DEFAULT_LOG_DIR)
    os.makedirs(log_dir, exist_ok=True)
    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    file_handler = TimedRotatingFileHandler(
        os.path.join(log_dir, ACTIVITY_LOG_FILE_NAME),
        when="midnight",
        interval=1,
        backupCount=7,
        encoding="utf-8",
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)
    logger.propagate = False
    return logger


# --- Run configuration ---


@dataclass(frozen=True)
class RunConfig:
    """Model, heads and training settings of one run; hashed into every output."""

    model: ModelConfig = field(default_factory=ModelConfig)
    phenotype_head: PhenotypeHeadConfig = field(default_factory=PhenotypeHeadConfig)
    seg_head: SegHeadConfig = field(default_factory=SegHeadConfig)
    preset: str = "custom"
    seed: int = 0
    total_steps: int = 2000
    batch_size: int = 1
    lr_max: float = 1e-4
    lr_min: float = 0.0
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    loss_scope: str = "all"
    views: str = "all"
    finetune_steps: int = 1000
    finetune_lr: float = 1e-5
    phenotype_batch_size: int = 4
    seg_batch_size: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.phenotype_head.validate()
        self.seg_head.validate(self.model)
        if self.phenotype_head.embed_dim != self.model.embed_dim:
            raise ConfigError(
                f"Phenotype head input {self.phenotype_head.embed_dim} does not match embed_dim {self.model.embed_dim}."
            )
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"Unknown loss scope '{self.loss_scope}'; expected one of {LOSS_SCOPES}.")
        if self.views not in VIEW_SELECTIONS:
            raise ConfigError(f"Unknown view selection '{self.views}'; expected one of {VIEW_SELECTIONS}.")
        if self.total_steps < 0 or self.finetune_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("Step counts must be non-negative.")
        if min(self.batch_size, self.phenotype_batch_size, self.seg_batch_size) < 1:
            raise ConfigError("Batch sizes must be at least 1.")
        if self.lr_max <= 0 or self.finetune_lr <= 0 or not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"Need 0 <= lr_min <= lr_max with lr_max > 0 (got {self.lr_min}, {self.lr_max}).")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must lie in [0, 1), got {self.warmup_frac}.")

    def training_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in _SECTIONS and f.name != "preset"}

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "preset": self.preset,
            "model": self.model.to_dict(),
            "phenotype_head": self.phenotype_head.to_dict(),
            "seg_head": self.seg_head.to_dict(),
            "training": self.training_dict(),
        }
        # tuples become lists so the dict matches what a JSON round trip gives back
        return json.loads(json.dumps(data, sort_keys=True))

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        allowed = set(_SECTIONS) | {"preset", "training", "description"}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"Unknown run config keys: {sorted(unknown)}.")
        kwargs: Dict[str, Any] = {name: _build_section(section_cls, data.get(name, {}), name) for name, section_cls in _SECTIONS.items()}
        training = dict(data.get("training", {}))
        training_fields = {f.name for f in fields(cls)} - set(_SECTIONS) - {"preset"}
        unknown = set(training) - training_fields
        if unknown:
            raise ConfigError(f"Unknown training keys: {sorted(unknown)}.")
        kwargs.update(training)
        kwargs["preset"] = str(data.get("preset", "custom"))
        config = cls(**kwargs)
        config.validate()
        return config

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with training fields replaced; ``None`` values are ignored."""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        allowed = {f.name for f in fields(self)} - set(_SECTIONS)
        unknown = set(overrides) - allowed
        if unknown:
            raise ConfigError(f"Unknown run config overrides: {sorted(unknown)}.")
        config = replace(self, **overrides)
        config.validate()
        return config


_SECTIONS = {"model": ModelConfig, "phenotype_head": PhenotypeHeadConfig, "seg_head": SegHeadConfig}


def _build_section(section_cls, data: Dict[str, Any], name: str):
    known = {f.name for f in fields(section_cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"Unknown {name} keys: {sorted(unknown)}.")
    values = {key: tuple(value) if isinstance(value, list) else value for key, value in data.items()}
    try:
        return section_cls(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid {name} section: {e}") from e


def load_run_config(name_or_path: str, **overrides: Any) -> RunConfig:
    """Resolve a preset name from RUN_CONFIGS or a JSON file, then apply overrides."""
    from run_utils.run_configs import RUN_CONFIGS

    if name_or_path in RUN_CONFIGS:
        data = copy.deepcopy(RUN_CONFIGS[name_or_path])
        data.setdefault("preset", name_or_path)
    else:
        path = Path(name_or_path)
        if not path.is_file():
            raise ConfigError(
                f"'{name_or_path}' is neither a preset ({', '.join(sorted(RUN_CONFIGS))}) nor a config file."
            )
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Run config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Run config {path} must hold a JSON object.")
    config = RunConfig.from_dict(data).with_overrides(**overrides)
    logger.info(f"Loaded run config '{name_or_path}' (hash {config.config_hash()}).")
    return config


def derive_seed(run_seed: int, stream: int, *keys: int) -> int:
    """Independent, reproducible seed for one (stream, keys) use of the run seed."""
    sequence = np.random.SeedSequence([int(run_seed), int(stream), *[int(k) for k in keys]])
    return int(sequence.generate_state(1)[0])


def step_subjects(subject_ids: Sequence[str], batch_size: int, run_seed: int, phase: int, step: int) -> List[str]:
    """Subjects of one optimizer step, drawn without replacement when the split is large enough."""
    rng = np.random.default_rng(derive_seed(run_seed, SEED_STREAM_SUBJECTS, phase, step))
    replace_draws = batch_size > len(subject_ids)
    picks = rng.choice(len(subject_ids), size=batch_size, replace=replace_draws)
    return [subject_ids[int(i)] for i in picks]


# --- Dataset access ---


@dataclass
class DatasetIndex:
    """A phantom dataset directory: manifest, splits and per-subject files."""

    root: Path
    size: int
    n_frames: int
    view_tags: List[str]
    splits: Dict[str, List[str]]

    @classmethod
    def open(cls, root: str) -> "DatasetIndex":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise DataError(f"No dataset manifest at {manifest_path}.")
        try:
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            index = cls(
                root=root,
                size=int(manifest["size"]),
                n_frames=int(manifest["n_frames"]),
                view_tags=list(manifest["view_tags"]),
                splits={name: list(manifest["splits"].get(name, [])) for name in SPLIT_NAMES},
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed dataset manifest {manifest_path}: {e}") from e
        index.check_split_hygiene()
        return index

    def check_split_hygiene(self) -> None:
        seen: Dict[str, str] = {}
        for name in SPLIT_NAMES:
            for sid in self.splits[name]:
                if sid in seen:
                    raise DataError(f"Subject {sid} appears in both the '{seen[sid]}' and '{name}' splits.")
                seen[sid] = name

    def split(self, name: str) -> List[str]:
        if name not in self.splits:
            raise ConfigError(f"Unknown split '{name}'; expected one of {SPLIT_NAMES}.")
        ids = self.splits[name]
        if not ids:
            raise DataError(f"Split '{name}' of {self.root} is empty.")
        return ids

    def check_compatible(self, model_config: ModelConfig) -> None:
        if self.size != model_config.image_size or self.n_frames != model_config.n_frames:
            raise ConfigError(
                f"Dataset planes are {self.size}x{self.size}x{self.n_frames}; the model expects "
                f"{model_config.image_size}x{model_config.image_size}x{model_config.n_frames}."
            )
        self.plane_selection(model_config)

    def plane_selection(self, model_config: ModelConfig) -> Tuple[List[int], List[str]]:
        """Plane ids and tags of the first n_sa SA and first n_la LA planes."""
        sa = [(i, tag) for i, tag in enumerate(self.view_tags) if tag.startswith("SA")][: model_config.n_sa]
        la = [(i, tag) for i, tag in enumerate(self.view_tags) if tag.startswith("LA")][: model_config.n_la]
        if len(sa) < model_config.n_sa or len(la) < model_config.n_la:
            raise ConfigError(
                f"Model needs {model_config.n_sa} SA + {model_config.n_la} LA planes; dataset has tags {self.view_tags}."
            )
        selected = sa + la
        return [i for i, _ in selected], [tag for _, tag in selected]

    def _subject_dir(self, sid: str) -> Path:
        path = self.root / sid
        if not path.is_dir():
            raise DataError(f"Subject directory {path} is missing.")
        return path

    def load_stack(self, sid: str, model_config: ModelConfig, views: str = "all") -> PlaneStack:
        plane_ids, tags = self.plane_selection(model_config)
        subject_dir = self._subject_dir(sid)
        planes, normalization = [], {}
        for tag in tags:
            array, header = read_container(subject_dir / f"image_{tag}.cvt")
            planes.append(array.astype(np.float32))
            normalization = header.get("normalization") or normalization
        stack = PlaneStack(planes=planes, view_tags=tags, plane_ids=plane_ids, normalization=normalization)
        return select_views(stack, views)

    def load_labels(self, sid: str, view_tags: Sequence[str]) -> np.ndarray:
        """Label planes (P, H, W, T) for the given tags; missing files are a DataError."""
        subject_dir = self._subject_dir(sid)
        labels = []
        for tag in view_tags:
            path = subject_dir / f"label_{tag}.cvt"
            if not path.is_file():
                raise DataError(f"Subject {sid} has no segmentation labels for plane {tag} ({path}).")
            labels.append(read_container(path)[0])
        return np.stack(labels, axis=0)

    def load_phenotypes(self, sid: str) -> PhenotypeVector:
        path = self._subject_dir(sid) / "phenotypes.json"
        if not path.is_file():
            raise DataError(f"Subject {sid} has no phenotype labels ({path}).")
        try:
            return PhenotypeVector.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"Malformed phenotype file {path}: {e}") from e

    def phenotype_matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.load_phenotypes(sid).as_array() for sid in ids], axis=0)


def require_data_dir(data_dir: Optional[str]) -> Path:
    data_dir = data_dir or os.getenv("HEART_DATA_DIR")
    if not data_dir:
        raise ConfigError("No dataset given: pass --data or set HEART_DATA_DIR.")
    return Path(data_dir)


def tokenize(stack: PlaneStack, model_config: ModelConfig) -> TokenBatch:
    return patchify(stack, model_config.patch_size, model_config.patch_frames)


# --- Run directory ---


@contextmanager
def run_lock(out_dir: Path) -> Iterator[Path]:
    """Exclusive ownership of a run directory for one training process."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / LOCK_FILE_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise DataError(f"Run directory {out_dir} is locked by another process ({lock_path}).") from e
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield out_dir
    finally:
        lock_path.unlink(missing_ok=True)


class MetricsLog:
    """Line-delimited JSON records, one per training step."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def append(self, record: Dict[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> List[Dict[str, Any]]:
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line]


def write_json_report(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote report {path}")
    return path


# --- Checkpoint <-> model ---


def _as_arrays(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: np.array(p.data, dtype=np.float32) for name, p in params.items()}


def build_checkpoint(
    run_config: RunConfig,
    step: int,
    params: Dict[str, Tensor],
    optim_state: Optional[OptimState] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Named parameters plus optional optimizer moments, with the config hash in ``extra``."""
    tensors = _as_arrays(params)
    meta = dict(extra or {})
    meta["config_hash"] = run_config.config_hash()
    if optim_state is not None:
        for name, moment in optim_state.first_moment.items():
            tensors[OPTIM_FIRST_MOMENT_PREFIX + name] = np.asarray(moment, dtype=np.float32)
        for name, moment in optim_state.second_moment.items():
            tensors[OPTIM_SECOND_MOMENT_PREFIX + name] = np.asarray(moment, dtype=np.float32)
        meta["optimizer"] = dict(optim_state.hyperparameters(), step=optim_state.step)
    return Checkpoint(config=run_config.to_dict(), step=step, tensors=tensors, extra=meta)


def run_config_of(checkpoint: Checkpoint) -> RunConfig:
    if not checkpoint.config:
        raise ContainerFormatError("Checkpoint carries no run configuration.")
    return RunConfig.from_dict(checkpoint.config)


def _params_from(checkpoint: Checkpoint, prefixes: Sequence[str]) -> Dict[str, Tensor]:
    return {
        name: parameter(array, name=name)
        for name, array in checkpoint.tensors.items()
        if name.startswith(tuple(prefixes))
    }


def restore_model(checkpoint: Checkpoint, require_decoder: bool = False) -> MaskedAutoencoder:
    """Rebuild the autoencoder; encoder weights must all be present.

    A checkpoint without the reconstruction decoder (fine-tuned runs) gets a
    freshly initialized one unless ``require_decoder`` is set.
    """
    run_config = run_config_of(checkpoint)
    expected = MaskedAutoencoder.init_params(run_config.model, run_config.seed)
    stored = _params_from(checkpoint, MODEL_PREFIXES)
    missing = [name for name in expected if name not in stored]
    missing_encoder = [name for name in missing if name.startswith("encoder.")]
    if missing_encoder:
        raise ContainerFormatError(f"Checkpoint is missing encoder tensors: {missing_encoder[:5]}.")
    if missing and require_decoder:
        raise ConfigError("Checkpoint has no reconstruction decoder (it was fine-tuned); use a pretraining checkpoint.")
    for name, tensor in stored.items():
        if name not in expected:
            raise ContainerFormatError(f"Checkpoint tensor '{name}' is not a parameter of this model.")
        if tensor.shape != expected[name].shape:
            raise ContainerFormatError(f"Checkpoint tensor '{name}' has shape {tensor.shape}, expected {expected[name].shape}.")
    params = {name: stored.get(name, expected[name]) for name in expected}
    return MaskedAutoencoder(run_config.model, seed=run_config.seed, params=params)


def restore_optim_state(checkpoint: Checkpoint, names: Sequence[str]) -> Optional[OptimState]:
    record = checkpoint.extra.get("optimizer")
    if record is None:
        return None
    first = {n: checkpoint.tensors[OPTIM_FIRST_MOMENT_PREFIX + n] for n in names if OPTIM_FIRST_MOMENT_PREFIX + n in checkpoint.tensors}
    second = {n: checkpoint.tensors[OPTIM_SECOND_MOMENT_PREFIX + n] for n in names if OPTIM_SECOND_MOMENT_PREFIX + n in checkpoint.tensors}
    return OptimState(
        lr=record["lr"],
        beta1=record["beta1"],
        beta2=record["beta2"],
        eps=record["eps"],
        weight_decay=record["weight_decay"],
        step=int(record["step"]),
        first_moment=first,
        second_moment=second,
    )


def restore_phenotype_head(checkpoint: Checkpoint) -> Tuple[Optional[PhenotypeHead], Optional[Standardizer]]:
    params = _params_from(checkpoint, ["phenotype."])
    if not params:
        return None, None
    run_config = run_config_of(checkpoint)
    record = checkpoint.extra.get("standardizer")
    standardizer = Standardizer.from_dict(record) if record else None
    return PhenotypeHead(run_config.phenotype_head, params=params), standardizer


def restore_seg_head(checkpoint: Checkpoint) -> Optional[SegmentationHead]:
    params = _params_from(checkpoint, ["seg."])
    if not params:
        return None
    run_config = run_config_of(checkpoint)
    return SegmentationHead(run_config.seg_head, run_config.model, params=params)


def summarize_config(run_config: RunConfig) -> str:
    model = run_config.model
    return (
        f"preset={run_config.preset} hash={run_config.config_hash()} "
        f"image={model.image_size}x{model.image_size}x{model.n_frames} "
        f"planes={model.n_sa}SA+{model.n_la}LA dim={model.embed_dim} depth={model.depth}"
    )


# --- Training steps ---


def schedule_lr(step: int, total_steps: int, lr_max: float, lr_min: float, warmup_frac: float) -> float:
    """Learning rate of update ``step`` (0-based).

    The cosine schedule is evaluated one position ahead over ``total_steps + 1``
    positions, so the first update already has a positive rate and the last
    one stays above ``lr_min``.
    """
    warmup = default_warmup(total_steps, warmup_frac)
    return cosine_lr(step + 1, total_steps + 1, lr_max, lr_min, warmup)


def apply_gradients(
    graph: Graph,
    loss: Tensor,
    params: Dict[str, Tensor],
    state: OptimState,
    lr: float,
    context: str,
) -> Tuple[Dict[str, Tensor], OptimState, float]:
    """Backward pass plus one AdamW update; a non-finite loss aborts with ``context``."""
    value = float(loss.item())
    if not np.isfinite(value):
        raise NumericError(f"Non-finite loss {value} at {context}.")
    grads = backward(graph, loss, wrt=list(params.values()), allow_unused=True)
    named = {name: grads[tensor] for name, tensor in params.items()}
    new_params, new_state = adamw_step(params, named, state, lr=lr)
    return new_params, new_state, value


def encode_stack(model: MaskedAutoencoder, stack: PlaneStack) -> LatentTokens:
    """No-mask encoder pass over every plane of ``stack``."""
    return model.forward_full(tokenize(stack, model.config))
