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

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from heart_models.errors import ConfigError
from heart_models.mae import LatentTokens, pooled_representation
from heart_models.mae.layers import Params, init_linear, linear
from heart_models.phantom import PHENOTYPE_TARGETS, PhenotypeVector
from heart_models.tensor_engine import Tensor, constant, gelu, mse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Standardizer:
    """Per-target mean and std, estimated on the finetune split only."""

    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(PHENOTYPE_TARGETS) or len(self.std) != len(PHENOTYPE_TARGETS):
            raise ConfigError(f"Standardizer needs {len(PHENOTYPE_TARGETS)} means and stds.")
        if min(self.std) <= 0:
            raise ConfigError("Standardizer std must be positive for every target.")

    @classmethod
    def fit(cls, truths: np.ndarray) -> "Standardizer":
        truths = np.asarray(truths, dtype=np.float64)
        if truths.ndim != 2 or truths.shape[0] < 2:
            raise ConfigError("Standardizer needs at least two subjects with all targets.")
        std = truths.std(axis=0)
        return cls(tuple(float(m) for m in truths.mean(axis=0)), tuple(float(s) for s in std))

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def destandardize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> Dict:
        return {"mean": list(self.mean), "std": list(self.std), "targets": list(PHENOTYPE_TARGETS)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Standardizer":
        return cls(tuple(float(v) for v in data["mean"]), tuple(float(v) for v in data["std"]))


@dataclass(frozen=True)
class PhenotypeHeadConfig:
    embed_dim: int = 128
    hidden_dim: int = 256
    targets: Tuple[str, ...] = PHENOTYPE_TARGETS

    def validate(self) -> None:
        if tuple(self.targets) != PHENOTYPE_TARGETS:
            raise ConfigError(f"Phenotype targets must be {PHENOTYPE_TARGETS} in this order.")
        if self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise ConfigError("Phenotype head widths must be positive.")

    def to_dict(self) -> Dict:
        return asdict(self)


class PhenotypeHead:
    """pooled → linear(dim→hidden) → GELU → linear(hidden→5), in standardized units."""

    def __init__(self, config: PhenotypeHeadConfig, seed: int = 0, params: Optional[Params] = None):
        config.validate()
        self.config = config
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            init_linear(params, rng, "phenotype.fc1", config.embed_dim, config.hidden_dim)
            init_linear(params, rng, "phenotype.fc2", config.hidden_dim, len(config.targets))
        self.params: Params = params

    def forward(self, latents: LatentTokens) -> Tensor:
        pooled = pooled_representation(latents)
        hidden = gelu(linear(pooled, self.params, "phenotype.fc1"))
        return linear(hidden, self.params, "phenotype.fc2")

    def predict_phenotypes(self, latents: LatentTokens, standardizer: Optional[Standardizer]) -> PhenotypeVector:
        if standardizer is None:
            raise ConfigError("Phenotype prediction needs the standardization record of the finetune split.")
        standardized = self.forward(latents).data.reshape(-1)
        return PhenotypeVector.from_array(standardizer.destandardize(standardized))


def predict_phenotypes(
    latents: LatentTokens, head: PhenotypeHead, standardizer: Optional[Standardizer]
) -> PhenotypeVector:
    return head.predict_phenotypes(latents, standardizer)


def phenotype_loss(prediction: Tensor, truth: Sequence[float], standardizer: Standardizer) -> Tensor:
    """MSE in standardized units averaged over the five targets.

    ``prediction`` is the head output (standardized); ``truth`` is in native units.
    """
    target = standardizer.standardize(np.asarray(truth, dtype=np.float64).reshape(1, -1))
    return mse(prediction, constant(target))
