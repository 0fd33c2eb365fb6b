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
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from heart_models.errors import ConfigError
from heart_models.phantom.scene import DenseScene

logger = logging.getLogger(__name__)

N_SA_PLANES = 6
LA_AZIMUTHS_DEG = (0.0, 60.0, 120.0)
VIEW_TAGS = tuple(f"SA{k}" for k in range(1, N_SA_PLANES + 1)) + tuple(
    f"LA{n}" for n in range(1, len(LA_AZIMUTHS_DEG) + 1)
)


@dataclass(frozen=True)
class PlaneGeometry:
    """Plane through ``origin`` (mm); pixel (i, j) sits at origin + s_j·u + s_i·v."""

    origin: Tuple[float, float, float]
    u: Tuple[float, float, float]
    v: Tuple[float, float, float]
    view_tag: str
    extent: int = 128
    pixel_mm: float = 1.125

    def validate(self) -> None:
        u, v = np.asarray(self.u, dtype=np.float64), np.asarray(self.v, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1) > 1e-6 or abs(np.linalg.norm(v) - 1) > 1e-6 or abs(u @ v) > 1e-6:
            raise ConfigError(f"Plane {self.view_tag}: in-plane vectors must be orthonormal.")
        if self.extent <= 0 or self.pixel_mm <= 0:
            raise ConfigError(f"Plane {self.view_tag}: extent and pixel spacing must be positive.")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(np.asarray(self.u, dtype=np.float64), np.asarray(self.v, dtype=np.float64))

    def to_dict(self) -> Dict:
        return {
            "origin": [float(c) for c in self.origin],
            "u": [float(c) for c in self.u],
            "v": [float(c) for c in self.v],
            "view_tag": self.view_tag,
            "extent": int(self.extent),
            "pixel_mm": float(self.pixel_mm),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PlaneGeometry":
        return cls(
            origin=tuple(data["origin"]),
            u=tuple(data["u"]),
            v=tuple(data["v"]),
            view_tag=data["view_tag"],
            extent=int(data["extent"]),
            pixel_mm=float(data["pixel_mm"]),
        )


def _voxel_coordinates(scene: DenseScene, geom: PlaneGeometry) -> np.ndarray:
    offsets = (np.arange(geom.extent) - (geom.extent - 1) / 2.0) * geom.pixel_mm
    origin = np.asarray(geom.origin, dtype=np.float64)
    u, v = np.asarray(geom.u, dtype=np.float64), np.asarray(geom.v, dtype=np.float64)
    points = origin[None, None, :] + offsets[None, :, None] * u + offsets[:, None, None] * v
    config = scene.config
    coords = points / config.voxel_mm + (config.grid_size - 1) / 2.0
    # Snap round-off so grid-aligned planes sample voxels exactly.
    nearest = np.round(coords)
    coords = np.where(np.abs(coords - nearest) < 1e-9, nearest, coords)
    return coords.reshape(-1, 3).T


def slice_plane(scene: DenseScene, geom: PlaneGeometry) -> Tuple[np.ndarray, np.ndarray]:
    """Sample intensity (trilinear) and labels (nearest) on ``geom`` for every frame.

    Returns two ``extent×extent×T`` arrays. Samples outside the grid read as
    background.
    """
    geom.validate()
    coords = _voxel_coordinates(scene, geom)
    shape = (geom.extent, geom.extent)
    n_frames = scene.n_frames
    intensity = np.zeros(shape + (n_frames,), dtype=np.float32)
    labels = np.zeros(shape + (n_frames,), dtype=np.uint8)
    background = float(scene.config.background_level)
    for t in range(n_frames):
        intensity[..., t] = ndimage.map_coordinates(
            scene.intensity[..., t], coords, order=1, mode="constant", cval=background
        ).reshape(shape)
        labels[..., t] = ndimage.map_coordinates(
            scene.labels[..., t], coords, order=0, mode="constant", cval=0
        ).reshape(shape)
    return intensity, labels


def default_plane_geometries(scene: DenseScene, extent: int) -> List[PlaneGeometry]:
    """Six SA planes equidistant between base and apex, three LA planes at 0°/60°/120°."""
    config = scene.config
    pixel_mm = config.grid_size * config.voxel_mm / extent
    layout = scene.layout
    geometries = []
    for k in range(1, N_SA_PLANES + 1):
        z = layout.z_base - k * (layout.z_base - layout.z_apex) / (N_SA_PLANES + 1)
        geometries.append(
            PlaneGeometry(
                origin=(0.0, 0.0, float(z)),
                u=(1.0, 0.0, 0.0),
                v=(0.0, 1.0, 0.0),
                view_tag=f"SA{k}",
                extent=extent,
                pixel_mm=pixel_mm,
            )
        )
    x_lv, y_lv, _ = layout.lv_center
    for n, azimuth in enumerate(LA_AZIMUTHS_DEG, start=1):
        phi = np.deg2rad(azimuth)
        geometries.append(
            PlaneGeometry(
                origin=(float(x_lv), float(y_lv), 0.0),
                u=(float(np.cos(phi)), float(np.sin(phi)), 0.0),
                v=(0.0, 0.0, -1.0),
                view_tag=f"LA{n}",
                extent=extent,
                pixel_mm=pixel_mm,
            )
        )
    return geometries


def area_length_volume(label_plane: np.ndarray, class_id: int, pixel_mm: float) -> float:
    """Single-plane area-length volume 8A²/(3πL) in mL; L is the class extent along image rows."""
    mask = np.asarray(label_plane) == class_id
    if not mask.any():
        return 0.0
    area = mask.sum() * pixel_mm**2
    rows = np.flatnonzero(mask.any(axis=1))
    length = (rows[-1] - rows[0] + 1) * pixel_mm
    return float(8.0 * area**2 / (3.0 * np.pi * length) / 1000.0)
