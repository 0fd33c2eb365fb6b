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

"""Analytic beating-heart phantom.

Coordinates are millimetres with the origin at the grid centre and z along the
LV long axis (base up). Voxel centres sit at ``(i - (G-1)/2)·voxel_mm``.

Chambers:
  * LV: half-ellipsoid (z <= base plane) with a myocardial shell whose
    semi-axes are the endocardial ones plus the wall thickness, closed at the
    base by a myocardial plate one wall thickness deep.
  * RV: half-ellipsoid E minus a copy of E shifted towards the LV, giving a
    crescent on the far side of the LV. Both copies scale about the RV centre,
    so its volume scales exactly with r³.
  * LA / RA: full ellipsoids above the base plane, contracting in counter-phase.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from heart_models.errors import DataError, GenerationError
from heart_models.phantom.phenotypes import PhenotypeVector

logger = logging.getLogger(__name__)

BACKGROUND, LVBP, LVMYO, RVBP, LABP, RABP = range(6)
CLASS_NAMES = ("background", "lvbp", "lvmyo", "rvbp", "labp", "rabp")
BLOOD_CLASSES = (LVBP, RVBP, LABP, RABP)
MYOCARDIAL_DENSITY_G_PER_ML = 1.05

# Gap between chambers and to the grid border, in voxels.
_GAP_VOXELS = 2.0

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 96
    n_frames: int = 50
    voxel_mm: float = 1.5
    lv_axes: Vec3 = (24.0, 24.0, 38.0)
    wall_mm: float = 6.5
    rv_axes: Vec3 = (21.0, 30.0, 36.0)
    rv_offset_mm: float = 15.0
    la_axes: Vec3 = (16.0, 16.0, 13.5)
    ra_axes: Vec3 = (15.0, 15.0, 12.5)
    lv_amplitude: float = 0.22
    rv_amplitude: float = 0.2
    la_amplitude: float = 0.2
    ra_amplitude: float = 0.2
    phase_offset: float = 0.0
    blood_level: float = 0.85
    myo_level: float = 0.5
    background_level: float = 0.1
    noise_sigma: float = 0.02
    bias_strength: float = 0.08
    bias_coefficients: Tuple[float, float, float, float] = (0.4, -0.3, 0.2, 0.1)
    seed: int = 0

    @classmethod
    def random(cls, seed: int, grid_size: int = 96, voxel_mm: float = 1.5, n_frames: int = 50) -> "SceneConfig":
        """Per-subject randomized anatomy, contraction, contrast and artefacts."""
        rng = np.random.default_rng(seed)
        a_lv = rng.uniform(20.0, 27.0)
        a_la = rng.uniform(14.0, 18.0)
        a_ra = rng.uniform(13.0, 17.0)
        coefficients = rng.uniform(-1.0, 1.0, size=4)
        coefficients = coefficients / max(1.0, np.abs(coefficients).sum())
        return cls(
            grid_size=grid_size,
            n_frames=n_frames,
            voxel_mm=voxel_mm,
            lv_axes=(a_lv, a_lv * rng.uniform(0.92, 1.08), rng.uniform(32.0, 42.0)),
            wall_mm=rng.uniform(5.0, 8.0),
            rv_axes=(rng.uniform(18.0, 24.0), rng.uniform(26.0, 32.0), rng.uniform(30.0, 40.0)),
            rv_offset_mm=rng.uniform(12.0, 18.0),
            la_axes=(a_la, a_la, a_la * rng.uniform(0.75, 0.95)),
            ra_axes=(a_ra, a_ra, a_ra * rng.uniform(0.75, 0.95)),
            lv_amplitude=rng.uniform(0.15, 0.30),
            rv_amplitude=rng.uniform(0.12, 0.30),
            la_amplitude=rng.uniform(0.10, 0.30),
            ra_amplitude=rng.uniform(0.10, 0.30),
            phase_offset=rng.uniform(0.0, 1.0),
            blood_level=rng.uniform(0.80, 0.90),
            myo_level=rng.uniform(0.45, 0.55),
            background_level=rng.uniform(0.05, 0.15),
            noise_sigma=rng.uniform(0.01, 0.04),
            bias_strength=rng.uniform(0.0, 0.15),
            bias_coefficients=tuple(float(c) for c in coefficients),
            seed=int(seed),
        )

    def with_amplitudes(self, amplitude: float) -> "SceneConfig":
        return replace(
            self,
            lv_amplitude=amplitude,
            rv_amplitude=amplitude,
            la_amplitude=amplitude,
            ra_amplitude=amplitude,
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    def validate(self) -> None:
        if self.n_frames < 2:
            raise GenerationError(f"n_frames must be at least 2, got {self.n_frames}.")
        if self.grid_size < 8 or self.voxel_mm <= 0:
            raise GenerationError("grid_size must be >= 8 and voxel_mm positive.")
        if self.wall_mm <= 0:
            raise GenerationError(f"wall thickness must be positive, got {self.wall_mm} mm.")
        for name in ("lv_axes", "rv_axes", "la_axes", "ra_axes"):
            if min(getattr(self, name)) <= 0:
                raise GenerationError(f"{name} must be positive, got {getattr(self, name)}.")
        for name in ("lv_amplitude", "rv_amplitude", "la_amplitude", "ra_amplitude"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise GenerationError(f"{name}={value} would collapse the endocardial radii; need 0 <= a < 1.")
        if self.wall_mm >= min(self.lv_axes[:2]):
            raise GenerationError("wall self-intersection: wall thickness must be below the LV short-axis radii.")
        if not 0.0 < self.rv_offset_mm < 2.0 * self.rv_axes[0]:
            raise GenerationError("RV crescent offset must lie in (0, 2·rv_axes[0]).")
        if not self.myo_level < self.blood_level:
            raise GenerationError("blood pool must be brighter than myocardium.")


@dataclass(frozen=True)
class ChamberLayout:
    """Chamber reference points in mm; ventricle centres lie on the base plane."""

    lv_center: Tuple[float, float, float]
    rv_center: Tuple[float, float, float]
    la_center: Tuple[float, float, float]
    ra_center: Tuple[float, float, float]
    z_base: float
    z_apex: float


@dataclass
class DenseScene:
    intensity: np.ndarray
    labels: np.ndarray
    config: SceneConfig
    layout: ChamberLayout
    long_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    @property
    def base_point(self) -> np.ndarray:
        return np.array(self.layout.lv_center, dtype=np.float64)

    @property
    def apex_point(self) -> np.ndarray:
        x, y, _ = self.layout.lv_center
        return np.array([x, y, self.layout.z_apex], dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return int(self.labels.shape[-1])


def contraction(amplitude: float, frame: int, n_frames: int, phase_offset: float = 0.0, counter_phase: bool = False) -> float:
    """Radius scale r(t) = 1 - a·(1 ∓ cos 2π(t/T + φ))/2."""
    c = np.cos(2.0 * np.pi * (frame / n_frames + phase_offset))
    return float(1.0 - amplitude * ((1.0 + c) if counter_phase else (1.0 - c)) / 2.0)


def _wall_at(config: SceneConfig, r_lv: float) -> float:
    # Systolic thickening: up to +50% of the contraction fraction.
    return config.wall_mm * (1.0 + 0.5 * (1.0 - r_lv))


def plan_layout(config: SceneConfig) -> ChamberLayout:
    """Place the chambers, centre the heart in the grid and check it fits."""
    config.validate()
    vox = config.voxel_mm
    gap = _GAP_VOXELS * vox
    a_lv, _, c_lv = config.lv_axes
    wall_max = config.wall_mm * (1.0 + 0.5 * config.lv_amplitude)
    delta = config.rv_offset_mm

    x_lv = 0.0
    x_rv = x_lv + a_lv + wall_max + gap + delta / 2.0
    x_la = x_lv
    x_ra = max(x_rv, x_la + config.la_axes[0] + config.ra_axes[0] + gap)
    # Atria sit above the basal plate.
    z_la = wall_max + gap + config.la_axes[2]
    z_ra = wall_max + gap + config.ra_axes[2]

    x_min = x_lv - a_lv - wall_max
    x_max = max(x_rv + config.rv_axes[0], x_ra + config.ra_axes[0])
    y_ext = max(config.lv_axes[1] + wall_max, config.rv_axes[1], config.la_axes[1], config.ra_axes[1])
    z_min = -(c_lv + wall_max)
    z_max = max(z_la + config.la_axes[2], z_ra + config.ra_axes[2])

    half_fov = (config.grid_size - 1) / 2.0 * vox - gap
    if (x_max - x_min) / 2.0 > half_fov or y_ext > half_fov or (z_max - z_min) / 2.0 > half_fov:
        raise GenerationError(
            f"heart extent ({x_max - x_min:.1f} x {2 * y_ext:.1f} x {z_max - z_min:.1f} mm) exceeds the grid "
            f"field of view ({2 * half_fov:.1f} mm)."
        )

    dx = -(x_min + x_max) / 2.0
    z_base = -(z_min + z_max) / 2.0
    # Put the base plane on a voxel boundary so half-ellipsoids are not biased by a split layer.
    boundary_offset = 0.0 if config.grid_size % 2 == 0 else 0.5
    z_base = (np.round(z_base / vox - boundary_offset) + boundary_offset) * vox

    return ChamberLayout(
        lv_center=(x_lv + dx, 0.0, z_base),
        rv_center=(x_rv + dx, 0.0, z_base),
        la_center=(x_la + dx, 0.0, z_base + z_la),
        ra_center=(x_ra + dx, 0.0, z_base + z_ra),
        z_base=float(z_base),
        z_apex=float(z_base - c_lv),
    )


def grid_coordinates(config: SceneConfig) -> np.ndarray:
    return ((np.arange(config.grid_size) - (config.grid_size - 1) / 2.0) * config.voxel_mm).astype(np.float64)


def _inside(coords, center, axes) -> np.ndarray:
    x, y, z = coords
    return (
        ((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2 + ((z - center[2]) / axes[2]) ** 2
    ) <= 1.0


def label_frame(config: SceneConfig, layout: ChamberLayout, frame: int) -> np.ndarray:
    """Label volume (X×Y×Z, uint8) of one frame."""
    axis = grid_coordinates(config)
    coords = (axis[:, None, None], axis[None, :, None], axis[None, None, :])
    below = np.broadcast_to(coords[2] <= layout.z_base, (config.grid_size,) * 3)

    t, n = frame, config.n_frames
    r_lv = contraction(config.lv_amplitude, t, n, config.phase_offset)
    r_rv = contraction(config.rv_amplitude, t, n, config.phase_offset)
    r_la = contraction(config.la_amplitude, t, n, config.phase_offset, counter_phase=True)
    r_ra = contraction(config.ra_amplitude, t, n, config.phase_offset, counter_phase=True)

    wall = _wall_at(config, r_lv)
    endo = np.asarray(config.lv_axes) * r_lv
    epi = endo + wall
    lv = layout.lv_center
    footprint = ((coords[0] - lv[0]) / epi[0]) ** 2 + ((coords[1] - lv[1]) / epi[1]) ** 2 <= 1.0
    base_plate = footprint & (coords[2] > layout.z_base) & (coords[2] <= layout.z_base + wall)
    rv_axes = np.asarray(config.rv_axes) * r_rv
    rv_inner_center = np.asarray(layout.rv_center) - np.array([r_rv * config.rv_offset_mm, 0.0, 0.0])

    labels = np.zeros((config.grid_size,) * 3, dtype=np.uint8)
    labels[_inside(coords, layout.la_center, np.asarray(config.la_axes) * r_la)] = LABP
    labels[_inside(coords, layout.ra_center, np.asarray(config.ra_axes) * r_ra)] = RABP
    rv = _inside(coords, layout.rv_center, rv_axes) & ~_inside(coords, rv_inner_center, rv_axes) & below
    labels[rv] = RVBP
    labels[(_inside(coords, lv, epi) & below) | base_plate] = LVMYO
    labels[_inside(coords, lv, endo) & below] = LVBP
    return labels


def _bias_field(config: SceneConfig) -> np.ndarray:
    axis = grid_coordinates(config) / (config.grid_size * config.voxel_mm / 2.0)
    x, y, z = axis[:, None, None], axis[None, :, None], axis[None, None, :]
    c = config.bias_coefficients
    field = 1.0 + config.bias_strength * (c[0] * x + c[1] * y + c[2] * z + c[3] * (x * x - z * z))
    return np.broadcast_to(field, (config.grid_size,) * 3)


def generate_scene(config: SceneConfig) -> DenseScene:
    """Render labels and intensities for every frame; deterministic per ``config.seed``."""
    layout = plan_layout(config)
    g, n = config.grid_size, config.n_frames
    levels = np.full(len(CLASS_NAMES), config.blood_level, dtype=np.float64)
    levels[BACKGROUND] = config.background_level
    levels[LVMYO] = config.myo_level
    bias = _bias_field(config)
    rng = np.random.default_rng(config.seed)

    labels = np.zeros((g, g, g, n), dtype=np.uint8)
    intensity = np.zeros((g, g, g, n), dtype=np.float32)
    for t in range(n):
        frame = label_frame(config, layout, t)
        labels[..., t] = frame
        clean = levels[frame] * bias
        noisy = clean + rng.normal(0.0, config.noise_sigma, size=clean.shape)
        intensity[..., t] = np.clip(noisy, 0.0, 1.0)
    logger.debug(f"Generated phantom seed={config.seed} grid={g}^3 frames={n}")
    return DenseScene(intensity=intensity, labels=labels, config=config, layout=layout)


def chamber_volumes(scene: DenseScene) -> np.ndarray:
    """Per-frame volumes in mL, shape (T, n_classes)."""
    voxel_ml = scene.config.voxel_mm**3 / 1000.0
    counts = np.stack(
        [np.bincount(scene.labels[..., t].ravel(), minlength=len(CLASS_NAMES)) for t in range(scene.n_frames)]
    )
    return counts.astype(np.float64) * voxel_ml


def _ejection_fraction(volumes: np.ndarray) -> float:
    edv, esv = float(volumes.max()), float(volumes.min())
    return 100.0 * (edv - esv) / edv


def compute_phenotypes(scene: DenseScene) -> PhenotypeVector:
    volumes = chamber_volumes(scene)
    empty = [CLASS_NAMES[c] for c in range(1, len(CLASS_NAMES)) if not volumes[:, c].any()]
    if empty:
        raise DataError(f"Malformed scene: label classes {empty} are empty on every frame.")
    ed_frame = int(np.argmax(volumes[:, LVBP]))
    return PhenotypeVector(
        lvm=float(volumes[ed_frame, LVMYO] * MYOCARDIAL_DENSITY_G_PER_ML),
        rvef=_ejection_fraction(volumes[:, RVBP]),
        raef=_ejection_fraction(volumes[:, RABP]),
        rvedv=float(volumes[:, RVBP].max()),
        lasv=float(volumes[:, LABP].max() - volumes[:, LABP].min()),
        lvedv=float(volumes[:, LVBP].max()),
        lvesv=float(volumes[:, LVBP].min()),
    )


def closed_form_ejection_fractions(config: SceneConfig) -> Dict[str, float]:
    """EFs from the sampled radius scales alone: 100·(1 - (r_min/r_max)³)."""
    result = {}
    for name, amplitude, counter in (
        ("lvef", config.lv_amplitude, False),
        ("rvef", config.rv_amplitude, False),
        ("laef", config.la_amplitude, True),
        ("raef", config.ra_amplitude, True),
    ):
        radii = [contraction(amplitude, t, config.n_frames, config.phase_offset, counter) for t in range(config.n_frames)]
        result[name] = 100.0 * (1.0 - (min(radii) / max(radii)) ** 3)
    return result
