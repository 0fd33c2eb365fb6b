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

from heart_models.heads.phenotype import (
    PhenotypeHead,
    PhenotypeHeadConfig,
    Standardizer,
    phenotype_loss,
    predict_phenotypes,
)
from heart_models.heads.segmentation import (
    SegHeadConfig,
    SegmentationHead,
    SegmentationLogits,
    cross_entropy,
    seg_loss,
    segment_planes,
    soft_dice,
)

__all__ = [
    "PhenotypeHead",
    "PhenotypeHeadConfig",
    "SegHeadConfig",
    "SegmentationHead",
    "SegmentationLogits",
    "Standardizer",
    "cross_entropy",
    "phenotype_loss",
    "predict_phenotypes",
    "seg_loss",
    "segment_planes",
    "soft_dice",
]
