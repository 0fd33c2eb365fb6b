#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.


import json
import os

import numpy as np
import pytest

from heart_manager.constants import LOCK_FILE_NAME, SEED_STREAM_EVAL_MASK, SEED_STREAM_SUBJECTS
from heart_manager.helpers import (
    DatasetIndex,
    MetricsLog,
    RunConfig,
    apply_gradients,
    build_checkpoint,
    derive_seed,
    load_run_config,
    require_data_dir,
    restore_model,
    restore_optim_state,
    run_lock,
    schedule_lr,
    step_subjects,
)
from heart_models.containers import decode_checkpoint, encode_checkpoint
from heart_models.errors import ConfigError, ContainerFormatError, DataError, NumericError
from heart_models.mae import MaskedAutoencoder
from heart_models.tensor_engine import Graph, OptimState, adamw_step, constant, debug_checks, mul, parameter, reduce_sum


def test_run_config_dict_roundtrip(tiny_config):
    data = tiny_config.to_dict()
    assert RunConfig.from_dict(data) == tiny_config
    assert json.loads(json.dumps(data)) == data
    assert tiny_config.preset == "tiny"


def test_unknown_keys_are_config_errors(tiny_config):
    data = tiny_config.to_dict()
    with pytest.raises(ConfigError, match="Unknown run config keys"):
        RunConfig.from_dict(dict(data, optimiser={}))
    with pytest.raises(ConfigError, match="training"):
        RunConfig.from_dict(dict(data, training={"epochs": 3}))
    with pytest.raises(ConfigError, match="model"):
        RunConfig.from_dict(dict(data, model={"width": 3}))


def test_overrides_ignore_none_and_validate(tiny_config):
    assert tiny_config.with_overrides(seed=None, views=None) == tiny_config
    changed = tiny_config.with_overrides(seed=9, views="sa")
    assert (changed.seed, changed.views) == (9, "sa")
    assert changed.config_hash() != tiny_config.config_hash()
    with pytest.raises(ConfigError):
        tiny_config.with_overrides(views="rv")
    with pytest.raises(ConfigError):
        tiny_config.with_overrides(model={})


def test_config_hash_is_stable(tiny_config):
    assert load_run_config("tiny").config_hash() == tiny_config.config_hash()
    assert len(tiny_config.config_hash()) == 16


def test_load_run_config_from_json_file(tmp_path, tiny_config):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config.to_dict()), encoding="utf-8")
    assert load_run_config(str(path), total_steps=7).total_steps == 7
    with pytest.raises(ConfigError, match="neither a preset"):
        load_run_config(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(str(bad))


def test_every_preset_validates():
    from run_utils.run_configs import RUN_CONFIGS

    for name in RUN_CONFIGS:
        assert load_run_config(name).preset == name


def test_head_width_must_match_encoder(tiny_config):
    data = tiny_config.to_dict()
    data["phenotype_head"]["embed_dim"] = 16
    with pytest.raises(ConfigError, match="Phenotype head input"):
        RunConfig.from_dict(data)


def test_derived_seeds_separate_streams():
    assert derive_seed(0, SEED_STREAM_SUBJECTS, 0, 3) == derive_seed(0, SEED_STREAM_SUBJECTS, 0, 3)
    assert derive_seed(0, SEED_STREAM_SUBJECTS, 0, 3) != derive_seed(0, SEED_STREAM_EVAL_MASK, 0, 3)
    assert derive_seed(0, SEED_STREAM_SUBJECTS) != derive_seed(1, SEED_STREAM_SUBJECTS)


def test_step_subjects_draw_without_replacement_when_possible():
    ids = [f"subj{i:04d}" for i in range(5)]
    picks = step_subjects(ids, 4, run_seed=0, phase=0, step=3)
    assert len(set(picks)) == 4
    assert picks == step_subjects(ids, 4, run_seed=0, phase=0, step=3)
    assert len(step_subjects(ids[:2], 4, run_seed=0, phase=0, step=0)) == 4


def test_schedule_keeps_every_update_positive():
    total = 20
    rates = [schedule_lr(step, total, 1e-3, 0.0, 0.05) for step in range(total)]
    assert min(rates) > 0.0
    assert max(rates) == pytest.approx(1e-3)
    assert rates[-1] < rates[total // 2]


def test_run_lock_is_exclusive(tmp_path):
    with run_lock(tmp_path / "run") as out:
        assert (out / LOCK_FILE_NAME).exists()
        with pytest.raises(DataError, match="locked"):
            with run_lock(tmp_path / "run"):
                pass
    assert not (tmp_path / "run" / LOCK_FILE_NAME).exists()


def test_metrics_log_starts_empty_and_appends(tmp_path):
    log = MetricsLog(tmp_path / "metrics.jsonl")
    log.append({"step": 0, "loss": 1.5})
    log.append({"step": 1, "loss": 1.25})
    assert [record["step"] for record in log.read()] == [0, 1]
    assert MetricsLog(tmp_path / "metrics.jsonl").read() == []


def test_require_data_dir_falls_back_to_environment(mocker, tmp_path):
    mocker.patch.dict(os.environ, {"HEART_DATA_DIR": str(tmp_path)})
    assert require_data_dir(None) == tmp_path
    assert require_data_dir("elsewhere").name == "elsewhere"
    mocker.patch.dict(os.environ, clear=True)
    with pytest.raises(ConfigError):
        require_data_dir(None)


def write_manifest(root, splits):
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"n_subjects": 3, "seed": 0, "size": 64, "n_frames": 4, "view_tags": ["SA1", "LA1"], "splits": splits}
    (root / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    return root


def test_overlapping_splits_are_data_errors(tmp_path):
    root = write_manifest(tmp_path / "ds", {"pretrain": ["subj0000", "subj0001"], "finetune": ["subj0001"], "test": []})
    with pytest.raises(DataError, match="subj0001"):
        DatasetIndex.open(root)


def test_missing_or_malformed_manifest(tmp_path):
    with pytest.raises(DataError, match="No dataset manifest"):
        DatasetIndex.open(tmp_path)
    (tmp_path / "manifest.json").write_text("{}", encoding="utf-8")
    with pytest.raises(DataError, match="Malformed"):
        DatasetIndex.open(tmp_path)


def test_split_lookup_and_compatibility(tmp_path, tiny_config):
    index = DatasetIndex.open(write_manifest(tmp_path / "ds", {"pretrain": ["subj0000"], "finetune": [], "test": []}))
    assert index.split("pretrain") == ["subj0000"]
    with pytest.raises(DataError, match="empty"):
        index.split("test")
    with pytest.raises(ConfigError):
        index.split("validation")
    with pytest.raises(ConfigError, match="expects"):
        index.check_compatible(tiny_config.model)
    with pytest.raises(DataError, match="missing"):
        index.load_phenotypes("subj0000")


def test_plane_selection_takes_leading_tags(smoke_dataset):
    index = DatasetIndex.open(smoke_dataset)
    config = load_run_config("smoke")
    narrow = RunConfig.from_dict(
        dict(config.to_dict(), model=dict(config.to_dict()["model"], n_sa=2, n_la=1))
    )
    ids, tags = index.plane_selection(narrow.model)
    assert tags == ["SA1", "SA2", "LA1"]
    assert ids == [0, 1, 6]
    stack = index.load_stack(index.split("test")[0], narrow.model, "la")
    assert stack.view_tags == ["LA1"] and stack.plane_ids == [6]


def test_optimizer_state_survives_a_checkpoint(tiny_config):
    model = MaskedAutoencoder(tiny_config.model, seed=0)
    grads = {name: np.ones_like(p.data) for name, p in model.params.items()}
    params, state = adamw_step(model.params, grads, OptimState(lr=1e-3))
    checkpoint = decode_checkpoint(encode_checkpoint(build_checkpoint(tiny_config, 1, params, optim_state=state)))
    restored = restore_optim_state(checkpoint, list(params))
    assert restored.step == 1
    assert restored.lr == pytest.approx(1e-3)
    for name in params:
        np.testing.assert_allclose(restored.first_moment[name], state.first_moment[name])
        np.testing.assert_allclose(restored.second_moment[name], state.second_moment[name])
    assert checkpoint.extra["config_hash"] == tiny_config.config_hash()


def test_model_without_decoder_is_restored_from_init(tiny_config):
    model = MaskedAutoencoder(tiny_config.model, seed=tiny_config.seed)
    checkpoint = build_checkpoint(tiny_config, 0, model.encoder_params())
    restored = restore_model(checkpoint)
    np.testing.assert_array_equal(restored.params["decoder.pred.weight"].data, model.params["decoder.pred.weight"].data)
    with pytest.raises(ConfigError, match="decoder"):
        restore_model(checkpoint, require_decoder=True)
    del checkpoint.tensors["encoder.norm.gamma"]
    with pytest.raises(ContainerFormatError, match="encoder"):
        restore_model(checkpoint)


def test_non_finite_loss_aborts_with_context():
    w = parameter(np.ones(2), name="w")
    with debug_checks(False):
        graph = Graph()
        with graph:
            loss = reduce_sum(mul(w, constant(np.array([np.nan, 1.0]))))
        with pytest.raises(NumericError, match="step 3"):
            apply_gradients(graph, loss, {"w": w}, OptimState(), 1e-3, "pretrain step 3")
