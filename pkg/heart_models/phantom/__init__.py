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

from heart_models.phantom.phenotypes import PHENOTYPE_TARGETS, PHENOTYPE_UNITS, PhenotypeVector
from heart_models.phantom.planes import (
    VIEW_TAGS,
    PlaneGeometry,
    area_length_volume,
    default_plane_geometries,
    slice_plane,
)
from heart_models.phantom.scene import (
    BACKGROUND,
    BLOOD_CLASSES,
    CLASS_NAMES,
    LABP,
    LVBP,
    LVMYO,
    RABP,
    RVBP,
    ChamberLayout,
    DenseScene,
    SceneConfig,
    chamber_volumes,
    closed_form_ejection_fractions,
    compute_phenotypes,
    contraction,
    generate_scene,
)

__all__ = [
    "BACKGROUND",
    "BLOOD_CLASSES",
    "CLASS_NAMES",
    "ChamberLayout",
    "DenseScene",
    "LABP",
    "LVBP",
    "LVMYO",
    "PHENOTYPE_TARGETS",
    "PHENOTYPE_UNITS",
    "PhenotypeVector",
    "PlaneGeometry",
    "RABP",
    "RVBP",
    "SceneConfig",
    "VIEW_TAGS",
    "area_length_volume",
    "chamber_volumes",
    "closed_form_ejection_fractions",
    "compute_phenotypes",
    "contraction",
    "default_plane_geometries",
    "generate_scene",
    "slice_plane",
]
