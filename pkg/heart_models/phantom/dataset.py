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

"""Phantom dataset writer.

Layout::

    <out>/manifest.json
    <out>/<subject>/image_<TAG>.cvt   float32, H×W×T, normalized to [0, 1]
    <out>/<subject>/label_<TAG>.cvt   uint8,   H×W×T
    <out>/<subject>/phenotypes.json
    <out>/<subject>/geometry.json
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from tqdm import tqdm

from heart_models.containers import write_container
from heart_models.errors import ConfigError, DataError
from heart_models.phantom.planes import VIEW_TAGS, default_plane_geometries, slice_plane
from heart_models.phantom.scene import SceneConfig, compute_phenotypes, generate_scene
from heart_models.tokenizer.tokenizer import normalize_stack

logger = logging.getLogger(__name__)

# plane extent -> (grid voxels per axis, voxel mm); both cover the same 144 mm field of view.
SIZE_PRESETS: Dict[int, Tuple[int, float]] = {128: (96, 1.5), 64: (48, 3.0)}
SPLITS = ("pretrain", "finetune", "test")
MANIFEST_NAME = "manifest.json"
PLANE_AXES = ["y", "x", "t"]


def subject_id(position: int) -> str:
    return f"subj{position:04d}"


def subject_seeds(seed: int, n_subjects: int) -> List[int]:
    children = np.random.SeedSequence(int(seed)).spawn(n_subjects)
    return [int(child.generate_state(1)[0]) for child in children]


def split_counts(n_subjects: int) -> Dict[str, int]:
    """Pretrain / finetune / test in a 4:2:1 ratio, each non-empty once there are enough subjects."""
    n_test = max(1, n_subjects // 7) if n_subjects >= 3 else 0
    n_finetune = max(1, 2 * n_subjects // 7) if n_subjects >= 2 else 0
    return {"pretrain": n_subjects - n_test - n_finetune, "finetune": n_finetune, "test": n_test}


def _dump_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_subject(out_dir: Path, position: int, seed: int, size: int, n_frames: int) -> str:
    """Generate, slice and write one subject; returns its id."""
    grid_size, voxel_mm = SIZE_PRESETS[size]
    config = SceneConfig.random(seed, grid_size=grid_size, voxel_mm=voxel_mm, n_frames=n_frames)
    scene = generate_scene(config)
    phenotypes = compute_phenotypes(scene)
    geometries = default_plane_geometries(scene, extent=size)
    sliced = [slice_plane(scene, geom) for geom in geometries]
    images, normalization = normalize_stack([image for image, _ in sliced])

    sid = subject_id(position)
    subject_dir = out_dir / sid
    subject_dir.mkdir(parents=True, exist_ok=True)
    for plane_id, (geom, image, (_, labels)) in enumerate(zip(geometries, images, sliced)):
        meta = {"subject": sid, "view_tag": geom.view_tag, "plane_id": plane_id, "pixel_mm": geom.pixel_mm}
        write_container(subject_dir / f"image_{geom.view_tag}.cvt", image, axes=PLANE_AXES, meta=meta, normalization=normalization)
        write_container(subject_dir / f"label_{geom.view_tag}.cvt", labels, axes=PLANE_AXES, meta=meta)
    _dump_json(subject_dir / "phenotypes.json", phenotypes.to_dict())
    _dump_json(
        subject_dir / "geometry.json",
        {
            "planes": [geom.to_dict() for geom in geometries],
            "scene": config.to_dict(),
            "base_point": scene.base_point.tolist(),
            "apex_point": scene.apex_point.tolist(),
            "long_axis": scene.long_axis.tolist(),
        },
    )
    return sid


def _write_subject_job(args) -> str:
    return write_subject(*args)


def build_dataset(
    n_subjects: int,
    seed: int,
    out_dir: Path,
    size: int = 64,
    workers: int = 1,
    n_frames: int = 50,
) -> Path:
    """Write ``n_subjects`` phantom subjects and the split manifest under ``out_dir``.

    Output bytes depend only on (n_subjects, seed, size, n_frames); ``workers``
    only changes wall time.
    """
    if n_subjects < 1:
        raise ConfigError(f"n_subjects must be >= 1, got {n_subjects}.")
    if size not in SIZE_PRESETS:
        raise ConfigError(f"Unsupported plane size {size}; choose one of {sorted(SIZE_PRESETS)}.")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create dataset directory {out_dir}: {e}") from e

    seeds = subject_seeds(seed, n_subjects)
    jobs = [(out_dir, i, s, size, n_frames) for i, s in enumerate(seeds)]
    logger.info(f"Generating {n_subjects} phantom subjects (seed={seed}, size={size}, workers={workers}) in {out_dir}")
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                ids = list(tqdm(pool.map(_write_subject_job, jobs), total=len(jobs), desc="phantom", unit="subject"))
        else:
            ids = [_write_subject_job(job) for job in tqdm(jobs, desc="phantom", unit="subject")]
    except OSError as e:
        raise DataError(f"Failed writing phantom subjects under {out_dir}: {e}") from e

    counts = split_counts(n_subjects)
    splits, start = {}, 0
    for name in SPLITS:
        splits[name] = ids[start : start + counts[name]]
        start += counts[name]
    _dump_json(
        out_dir / MANIFEST_NAME,
        {
            "n_subjects": n_subjects,
            "seed": int(seed),
            "size": size,
            "n_frames": n_frames,
            "view_tags": list(VIEW_TAGS),
            "splits": splits,
        },
    )
    return out_dir
