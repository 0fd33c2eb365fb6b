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

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from heart_models.errors import DataError

PHENOTYPE_TARGETS = ("lvm", "rvef", "raef", "rvedv", "lasv")
PHENOTYPE_UNITS = {"lvm": "g", "rvef": "%", "raef": "%", "rvedv": "mL", "lasv": "mL"}


@dataclass
class PhenotypeVector:
    """LVM (g), RVEF (%), RAEF (%), RVEDV (mL), LASV (mL); LV volumes are diagnostics."""

    lvm: float
    rvef: float
    raef: float
    rvedv: float
    lasv: float
    lvedv: Optional[float] = None
    lvesv: Optional[float] = None

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PHENOTYPE_TARGETS], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "PhenotypeVector":
        values = [float(v) for v in values]
        if len(values) != len(PHENOTYPE_TARGETS):
            raise DataError(f"Expected {len(PHENOTYPE_TARGETS)} phenotype values, got {len(values)}.")
        return cls(**dict(zip(PHENOTYPE_TARGETS, values)))

    def to_dict(self) -> Dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "PhenotypeVector":
        missing = [name for name in PHENOTYPE_TARGETS if name not in data]
        if missing:
            raise DataError(f"Phenotype record is missing {missing}.")
        return cls(**{k: float(v) for k, v in data.items() if k in cls.__dataclass_fields__})
