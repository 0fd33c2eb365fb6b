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

"""Plane stacks <-> token sequences, 4D positional embeddings and masking.

Token order: planes in input order, then temporal patch index, then row-major
(y, x) within the plane. Inside a token, values run t-major, then y, then x.
Index rows are ``(plane, x, y, t)`` in patch-grid units; ``plane`` is the
plane's original position, so it survives plane removal.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from heart_models.errors import ConfigError, IncompleteTokensError, PlanMismatchError, ShapeError

logger = logging.getLogger(__name__)

INDEX_COLUMNS = ("plane", "x", "y", "t")


@dataclass
class PlaneStack:
    """One subject's planes, each ``H×W×T`` float32 in [0, 1]."""

    planes: List[np.ndarray]
    view_tags: List[str]
    plane_ids: Optional[List[int]] = None
    normalization: Dict[str, float] = field(default_factory=lambda: {"min": 0.0, "max": 1.0})

    def __post_init__(self):
        if self.plane_ids is None:
            self.plane_ids = list(range(len(self.planes)))
        if not (len(self.planes) == len(self.view_tags) == len(self.plane_ids)):
            raise ShapeError("PlaneStack needs one view tag and one plane id per plane.")
        if not self.planes:
            raise ShapeError("PlaneStack has no planes.")
        shape = self.planes[0].shape
        for tag, plane in zip(self.view_tags, self.planes):
            if plane.ndim != 3 or plane.shape != shape:
                raise ShapeError(f"Plane {tag} has shape {plane.shape}; expected {shape} (H×W×T).")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.planes[0].shape)

    @property
    def n_sa(self) -> int:
        return sum(tag.startswith("SA") for tag in self.view_tags)

    @property
    def n_la(self) -> int:
        return sum(tag.startswith("LA") for tag in self.view_tags)


@dataclass
class TokenBatch:
    tokens: np.ndarray
    index: np.ndarray
    grid: Tuple[int, int, int]
    patch_size: int
    patch_frames: int
    view_tags: Dict[int, str]
    normalization: Dict[str, float] = field(default_factory=lambda: {"min": 0.0, "max": 1.0})

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def patch_dim(self) -> int:
        return int(self.tokens.shape[1])

    def rows_for_planes(self, plane_ids: Sequence[int]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.index[:, 0], list(plane_ids)))

    def view_group_rows(self, prefix: str) -> np.ndarray:
        ids = [pid for pid, tag in self.view_tags.items() if tag.startswith(prefix)]
        return self.rows_for_planes(ids)


@dataclass(frozen=True)
class MaskPlan:
    kept: np.ndarray
    masked: np.ndarray
    seed: int
    ratio: float

    @property
    def n_tokens(self) -> int:
        return int(self.kept.size + self.masked.size)


@dataclass
class KeptTokens:
    """Kept-token sub-batch with the positions and indices it came from."""

    tokens: np.ndarray
    index: np.ndarray
    positions: np.ndarray


# --- Normalization and plane selection ---


def normalize_stack(planes: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], Dict[str, float]]:
    """Joint per-subject min-max scaling of all planes to [0, 1]."""
    low = float(min(p.min() for p in planes))
    high = float(max(p.max() for p in planes))
    span = high - low if high > low else 1.0
    normalized = [((p.astype(np.float64) - low) / span).astype(np.float32) for p in planes]
    return normalized, {"min": low, "max": high}


def drop_planes(stack: PlaneStack, plane_ids: Sequence[int]) -> PlaneStack:
    """Stack without the given plane ids; remaining planes keep their ids."""
    drop = set(int(p) for p in plane_ids)
    unknown = drop - set(stack.plane_ids)
    if unknown:
        raise ConfigError(f"Cannot drop unknown plane ids {sorted(unknown)}.")
    keep = [i for i, pid in enumerate(stack.plane_ids) if pid not in drop]
    if not keep:
        raise ConfigError("Dropping every plane leaves no tokens.")
    return PlaneStack(
        planes=[stack.planes[i] for i in keep],
        view_tags=[stack.view_tags[i] for i in keep],
        plane_ids=[stack.plane_ids[i] for i in keep],
        normalization=dict(stack.normalization),
    )


def select_views(stack: PlaneStack, views: str) -> PlaneStack:
    """Keep ``all`` planes, only ``sa`` planes or only ``la`` planes."""
    if views == "all":
        return stack
    if views not in ("sa", "la"):
        raise ConfigError(f"Unknown view selection '{views}'; expected all, sa or la.")
    prefix = views.upper()
    drop = [pid for pid, tag in zip(stack.plane_ids, stack.view_tags) if not tag.startswith(prefix)]
    return drop_planes(stack, drop)


# --- Patchify / unpatchify ---


def _grid_shape(shape: Tuple[int, int, int], patch_size: int, patch_frames: int, tag: str) -> Tuple[int, int, int]:
    h, w, t = shape
    for axis, extent, size in (("H", h, patch_size), ("W", w, patch_size), ("T", t, patch_frames)):
        if size <= 0 or extent % size:
            raise ShapeError(f"Plane {tag}: axis {axis} extent {extent} is not divisible by patch size {size}.")
    return h // patch_size, w // patch_size, t // patch_frames


def patchify(stack: PlaneStack, patch_size: int, patch_frames: int) -> TokenBatch:
    gh, gw, gt = _grid_shape(stack.shape, patch_size, patch_frames, stack.view_tags[0])
    ps, pt = patch_size, patch_frames
    per_plane = gh * gw * gt

    token_blocks = []
    for tag, plane in zip(stack.view_tags, stack.planes):
        _grid_shape(plane.shape, ps, pt, tag)
        blocks = plane.reshape(gh, ps, gw, ps, gt, pt).transpose(4, 0, 2, 5, 1, 3)
        token_blocks.append(blocks.reshape(per_plane, pt * ps * ps))
    tokens = np.ascontiguousarray(np.concatenate(token_blocks, axis=0), dtype=np.float32)

    t_idx, y_idx, x_idx = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    local = np.stack([x_idx.ravel(), y_idx.ravel(), t_idx.ravel()], axis=1)
    index = np.concatenate(
        [np.column_stack([np.full(per_plane, pid), local]) for pid in stack.plane_ids], axis=0
    ).astype(np.int64)

    return TokenBatch(
        tokens=tokens,
        index=index,
        grid=(gh, gw, gt),
        patch_size=ps,
        patch_frames=pt,
        view_tags=dict(zip(stack.plane_ids, stack.view_tags)),
        normalization=dict(stack.normalization),
    )


def unpatchify(batch: TokenBatch) -> PlaneStack:
    """Exact inverse of ``patchify``; tokens are placed by their index rows."""
    gh, gw, gt = batch.grid
    ps, pt = batch.patch_size, batch.patch_frames
    plane_ids = list(batch.view_tags.keys())
    slot = {pid: i for i, pid in enumerate(plane_ids)}

    present = np.zeros((len(plane_ids), gt, gh, gw), dtype=bool)
    blocks = np.zeros((len(plane_ids), gt, gh, gw, pt, ps, ps), dtype=batch.tokens.dtype)
    for row, (pid, x, y, t) in enumerate(batch.index):
        p = slot.get(int(pid))
        if p is None:
            raise PlanMismatchError(f"Token {row} references unknown plane {pid}.")
        present[p, t, y, x] = True
        blocks[p, t, y, x] = batch.tokens[row].reshape(pt, ps, ps)

    if not present.all():
        gaps = [
            (plane_ids[p], int(x), int(y), int(t)) for p, t, y, x in zip(*np.nonzero(~present))
        ]
        raise IncompleteTokensError(f"{len(gaps)} token indices are missing; first gaps: {gaps[:5]}", gaps)

    planes = [
        blocks[p].transpose(1, 4, 2, 5, 0, 3).reshape(gh * ps, gw * ps, gt * pt) for p in range(len(plane_ids))
    ]
    return PlaneStack(
        planes=planes,
        view_tags=[batch.view_tags[pid] for pid in plane_ids],
        plane_ids=plane_ids,
        normalization=dict(batch.normalization),
    )


# --- Positional embedding ---


def positional_embeddings(index: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal embeddings for ``(n, 4)`` index rows, ``dim/4`` per column."""
    if dim <= 0 or dim % 8:
        raise ConfigError(f"Positional embedding dim must be a positive multiple of 8, got {dim}.")
    index = np.atleast_2d(np.asarray(index, dtype=np.float64))
    if index.shape[1] != len(INDEX_COLUMNS):
        raise ConfigError(f"Index rows need {len(INDEX_COLUMNS)} columns {INDEX_COLUMNS}.")
    n_freq = dim // 8
    omega = 10000.0 ** (-np.arange(n_freq, dtype=np.float64) / n_freq)
    groups = []
    for column in range(len(INDEX_COLUMNS)):
        angles = index[:, column : column + 1] * omega[None, :]
        groups.append(np.concatenate([np.sin(angles), np.cos(angles)], axis=1))
    return np.concatenate(groups, axis=1).astype(np.float32)


def positional_embedding(index: Tuple[int, int, int, int], dim: int) -> np.ndarray:
    return positional_embeddings(np.asarray([index]), dim)[0]


# --- Masking ---


def mask_seed(run_seed: int, step: int, item: int = 0) -> int:
    """Mask seed for one sample of one optimizer step."""
    return int(np.random.SeedSequence([int(run_seed), int(step), int(item)]).generate_state(1)[0])


def sample_mask(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"Mask ratio must lie in [0, 1), got {ratio}.")
    n_keep = int(np.floor((1.0 - ratio) * n_tokens + 1e-9))
    order = np.random.default_rng(seed).permutation(n_tokens)
    return MaskPlan(
        kept=np.sort(order[:n_keep]).astype(np.int64),
        masked=np.sort(order[n_keep:]).astype(np.int64),
        seed=int(seed),
        ratio=float(ratio),
    )


def full_plan(n_tokens: int) -> MaskPlan:
    return MaskPlan(np.arange(n_tokens, dtype=np.int64), np.zeros(0, dtype=np.int64), seed=0, ratio=0.0)


def apply_mask(batch: TokenBatch, plan: MaskPlan) -> KeptTokens:
    if plan.n_tokens != batch.n_tokens:
        raise PlanMismatchError(f"Mask plan covers {plan.n_tokens} tokens; batch has {batch.n_tokens}.")
    kept = plan.kept
    if kept.size and (kept.min() < 0 or kept.max() >= batch.n_tokens):
        raise PlanMismatchError("Mask plan has kept indices outside the token batch.")
    return KeptTokens(tokens=batch.tokens[kept], index=batch.index[kept], positions=kept.copy())
