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

import os

import numpy as np
import pytest

from heart_manager.helpers import RunConfig, load_run_config
from heart_models.phantom.dataset import build_dataset
from heart_models.tensor_engine import debug_checks

SMOKE_SUBJECTS = 7


def pytest_collection_modifyitems(config, items):
    if os.getenv("HEART_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="long acceptance run; set HEART_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session", autouse=True)
def activity_log_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("logs")
    os.environ["HEART_LOG_DIR"] = str(path)
    return path


@pytest.fixture(autouse=True)
def non_finite_checks():
    with debug_checks(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return load_run_config("tiny")


@pytest.fixture(scope="session")
def smoke_dataset(tmp_path_factory):
    """Seven 64x64x4 phantom subjects: 4 pretrain, 2 finetune, 1 test."""
    out = tmp_path_factory.mktemp("phantom_smoke")
    return build_dataset(n_subjects=SMOKE_SUBJECTS, seed=7, out_dir=out, size=64, n_frames=4)
