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

from heart_models.mae.model import (
    LOSS_SCOPES,
    LatentTokens,
    MaskedAutoencoder,
    ModelConfig,
    config_hash,
    pooled_representation,
    pretrain_loss,
)

__all__ = [
    "LOSS_SCOPES",
    "LatentTokens",
    "MaskedAutoencoder",
    "ModelConfig",
    "config_hash",
    "pooled_representation",
    "pretrain_loss",
]
