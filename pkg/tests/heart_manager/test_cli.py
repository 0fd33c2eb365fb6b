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

import numpy as np
import pandas as pd
import pytest

from heart_manager.cli import main
from heart_manager.constants import CHECKPOINT_FILE_NAME, LOCK_FILE_NAME, METRICS_FILE_NAME, RUN_CONFIG_FILE_NAME
from heart_manager.helpers import load_run_config
from heart_models.containers import load_checkpoint
from heart_models.mae import MaskedAutoencoder
from heart_models.phantom import PHENOTYPE_TARGETS


@pytest.fixture(scope="module")
def pretrained(smoke_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain_run")
    assert main(["pretrain", "--data", str(smoke_dataset), "--config", "smoke", "--out", str(out)]) == 0
    return out / CHECKPOINT_FILE_NAME


@pytest.fixture(scope="module")
def phenotype_run(smoke_dataset, pretrained, tmp_path_factory):
    out = tmp_path_factory.mktemp("finetune_phenotype")
    argv = ["finetune", "--task", "phenotype", "--init", str(pretrained), "--data", str(smoke_dataset), "--out", str(out)]
    assert main(argv) == 0
    return out / CHECKPOINT_FILE_NAME


def read_report(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_help_and_usage_exit_codes(capsys):
    assert main(["--help"]) == 0
    assert main([]) == 2
    assert main(["pretrain", "--config", "smoke"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_preset_is_config_error(smoke_dataset, tmp_path):
    assert main(["pretrain", "--data", str(smoke_dataset), "--config", "huge", "--out", str(tmp_path / "run")]) == 2


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["pretrain", "--data", str(tmp_path / "nowhere"), "--config", "smoke", "--out", str(tmp_path / "run")]) == 3


def test_incompatible_dataset_is_config_error(smoke_dataset, tmp_path):
    argv = ["pretrain", "--data", str(smoke_dataset), "--config", "desk", "--out", str(tmp_path / "run"), "--steps", "0"]
    assert main(argv) == 2


def test_locked_run_directory_is_data_error(smoke_dataset, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / LOCK_FILE_NAME).write_text("1\n", encoding="utf-8")
    assert main(["pretrain", "--data", str(smoke_dataset), "--config", "smoke", "--out", str(out)]) == 3


def test_phantom_gen_writes_a_dataset(tmp_path):
    out = tmp_path / "phantom"
    assert main(["phantom-gen", "--n", "3", "--seed", "1", "--out", str(out), "--frames", "2"]) == 0
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["n_frames"] == 2
    assert sum(len(ids) for ids in manifest["splits"].values()) == 3


def test_zero_step_pretraining_saves_the_initialization(smoke_dataset, tmp_path):
    out = tmp_path / "run"
    argv = ["pretrain", "--data", str(smoke_dataset), "--config", "smoke", "--out", str(out), "--steps", "0", "--seed", "5"]
    assert main(argv) == 0
    checkpoint = load_checkpoint(out / CHECKPOINT_FILE_NAME)
    expected = MaskedAutoencoder.init_params(load_run_config("smoke").model, 5)
    assert checkpoint.step == 0
    assert set(checkpoint.tensors) == set(expected)
    for name, tensor in expected.items():
        np.testing.assert_array_equal(checkpoint.tensors[name], tensor.data)


def test_pretraining_outputs(pretrained):
    run_dir = pretrained.parent
    checkpoint = load_checkpoint(pretrained)
    assert checkpoint.step == 2
    assert checkpoint.extra["phase"] == "pretrain"
    assert not any(name.startswith("optim.") for name in checkpoint.tensors)
    records = [json.loads(line) for line in (run_dir / METRICS_FILE_NAME).read_text(encoding="utf-8").splitlines()]
    assert [record["step"] for record in records] == [0, 1]
    assert all(np.isfinite(record["loss"]) and record["lr"] > 0 for record in records)
    assert all(record["config_hash"] == checkpoint.extra["config_hash"] for record in records)
    assert read_report(run_dir / RUN_CONFIG_FILE_NAME)["preset"] == "smoke"
    periodic = load_checkpoint(run_dir / "checkpoint_step000001.cvc")
    assert periodic.extra["optimizer"]["step"] == 1
    assert any(name.startswith("optim.m.") for name in periodic.tensors)
    assert not (run_dir / LOCK_FILE_NAME).exists()


def test_pretraining_is_byte_reproducible(smoke_dataset, pretrained, tmp_path):
    out = tmp_path / "again"
    assert main(["pretrain", "--data", str(smoke_dataset), "--config", "smoke", "--out", str(out)]) == 0
    assert (out / CHECKPOINT_FILE_NAME).read_bytes() == pretrained.read_bytes()
    assert (out / METRICS_FILE_NAME).read_bytes() == (pretrained.parent / METRICS_FILE_NAME).read_bytes()


def test_reconstruction_report(smoke_dataset, pretrained, tmp_path):
    out = tmp_path / "recon.json"
    argv = ["eval", "--task", "recon", "--ckpt", str(pretrained), "--split", "test", "--data", str(smoke_dataset), "--out", str(out)]
    assert main(argv) == 0
    report = read_report(out)
    assert report["kind"] == "recon"
    assert report["aggregate"]["psnr_SA"]["n"] == 1
    entry = report["per_subject"][0]
    assert set(entry["planes"]) == {"SA1", "SA2", "SA3", "SA4", "SA5", "SA6", "LA1", "LA2", "LA3"}
    assert entry["psnr_LA"] == pytest.approx(np.mean([entry["planes"][t] for t in ("LA1", "LA2", "LA3")]))


def test_single_group_reconstruction_skips_the_other_group(smoke_dataset, pretrained, tmp_path):
    out = tmp_path / "recon_sa.json"
    argv = ["eval", "--task", "recon", "--ckpt", str(pretrained), "--split", "test", "--data", str(smoke_dataset), "--views", "sa", "--out", str(out)]
    assert main(argv) == 0
    report = read_report(out)
    assert "psnr_LA" not in report["aggregate"]
    assert report["per_subject"][0]["psnr_LA"] is None


def test_phenotype_finetune_and_eval(smoke_dataset, phenotype_run, tmp_path):
    checkpoint = load_checkpoint(phenotype_run)
    assert any(name.startswith("phenotype.") for name in checkpoint.tensors)
    assert not any(name.startswith("decoder.") for name in checkpoint.tensors)
    assert checkpoint.extra["task"] == "phenotype"
    assert len(checkpoint.extra["standardizer"]["mean"]) == len(PHENOTYPE_TARGETS)
    assert "pretrain_config_hash" in checkpoint.extra

    out = tmp_path / "phenotype.json"
    argv = ["eval", "--task", "phenotype", "--ckpt", str(phenotype_run), "--split", "test", "--data", str(smoke_dataset), "--out", str(out)]
    assert main(argv) == 0
    report = read_report(out)
    assert set(report["aggregate"]["mae"]) == set(PHENOTYPE_TARGETS)
    assert set(report["aggregate"]["mean_guess"]) == set(PHENOTYPE_TARGETS)
    entry = report["per_subject"][0]
    assert entry["abs_err_lvm"] == pytest.approx(abs(entry["pred_lvm"] - entry["true_lvm"]))


def test_reconstruction_needs_a_decoder(smoke_dataset, phenotype_run):
    argv = ["eval", "--task", "recon", "--ckpt", str(phenotype_run), "--split", "test", "--data", str(smoke_dataset)]
    assert main(argv) == 2


def test_eval_without_matching_head_is_config_error(smoke_dataset, pretrained):
    argv = ["eval", "--task", "seg", "--ckpt", str(pretrained), "--split", "test", "--data", str(smoke_dataset)]
    assert main(argv) == 2


def test_random_init_needs_a_config(smoke_dataset, tmp_path):
    argv = ["finetune", "--task", "seg", "--init", "random", "--data", str(smoke_dataset), "--out", str(tmp_path / "run")]
    assert main(argv) == 2


def test_segmentation_finetune_from_random_init(smoke_dataset, tmp_path):
    run_dir = tmp_path / "seg"
    argv = [
        "finetune", "--task", "seg", "--init", "random", "--config", "smoke",
        "--data", str(smoke_dataset), "--out", str(run_dir), "--steps", "1",
    ]
    assert main(argv) == 0
    checkpoint = load_checkpoint(run_dir / CHECKPOINT_FILE_NAME)
    assert any(name.startswith("seg.") for name in checkpoint.tensors)
    assert "pretrain_config_hash" not in checkpoint.extra

    argv = ["eval", "--task", "seg", "--ckpt", str(run_dir / CHECKPOINT_FILE_NAME), "--split", "test", "--data", str(smoke_dataset)]
    assert main(argv) == 0
    report = read_report(run_dir / "eval_seg_test.json")
    for key in ("dice_all_lvbp", "dice_SA_lvmyo", "dice_LA_labp"):
        assert 0.0 <= report["aggregate"][key]["mean"] <= 1.0


def test_robustness_without_dropped_planes_is_exact(smoke_dataset, phenotype_run, tmp_path):
    out = tmp_path / "robust0.json"
    argv = ["robustness", "--ckpt", str(phenotype_run), "--split", "test", "--drop", "0", "--trials", "2", "--data", str(smoke_dataset), "--out", str(out)]
    assert main(argv) == 0
    report = read_report(out)
    assert [entry["cosine"] for entry in report["per_subject"]] == [1.0, 1.0]
    assert report["aggregate"]["delta_rvef"]["mean_abs"] == pytest.approx(0.0, abs=1e-9)


def test_robustness_with_dropped_planes(smoke_dataset, pretrained):
    argv = ["robustness", "--ckpt", str(pretrained), "--split", "test", "--drop", "2", "--trials", "3", "--data", str(smoke_dataset)]
    assert main(argv) == 0
    report = read_report(pretrained.parent / "robustness_drop2_test.json")
    assert len(report["per_subject"]) == 3
    assert all(len(entry["dropped"]) == 2 for entry in report["per_subject"])
    assert -1.0 <= report["aggregate"]["cosine"]["min"] <= 1.0
    assert not any(key.startswith("delta_") for key in report["aggregate"])
    argv[argv.index("2")] = "9"
    assert main(argv) == 2


def test_embedding_export(smoke_dataset, pretrained, tmp_path):
    out = tmp_path / "emb.csv"
    argv = ["export-emb", "--ckpt", str(pretrained), "--split", "pretrain", "--out", str(out), "--data", str(smoke_dataset)]
    assert main(argv) == 0
    table = pd.read_csv(out)
    embed_dim = load_run_config("smoke").model.embed_dim
    assert len(table) == 4
    assert list(table.columns[: 1 + embed_dim]) == ["subject"] + [f"z{i:02d}" for i in range(embed_dim)]
    for name in PHENOTYPE_TARGETS:
        assert f"group_{name}" in table.columns
    sidecar = json.loads(out.with_suffix(".silhouette.json").read_text(encoding="utf-8"))
    assert set(sidecar["silhouette"]) == {"rvef", "lvm"}
    assert sidecar["n_subjects"] == 4
