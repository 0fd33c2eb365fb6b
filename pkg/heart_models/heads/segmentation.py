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

"""All-plane segmentation decoder with encoder skips.

Latent rows are regrouped into one (H/p)×(W/p) map per (plane, temporal
patch). Three stages each upsample 2× (nearest, as a row gather), fuse the
upsampled skip of matching depth by concatenation + projection and refine with
a 3×3 convolution (zero-row padding + gather + reshape + matmul). A per-pixel
linear expansion restores the p_t frames, and a 1×1 projection gives class
logits.

Logit rows are ordered (plane, temporal patch, y, x, frame-in-patch), so each
plane owns one contiguous block of H·W·T rows.
"""

import logging
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from heart_models.errors import ConfigError, ShapeError
from heart_models.mae import LatentTokens, ModelConfig
from heart_models.mae.layers import Params, init_linear, linear
from heart_models.phantom import CLASS_NAMES
from heart_models.tensor_engine import (
    Tensor,
    add,
    concat,
    constant,
    div,
    gather_rows,
    gelu,
    log_softmax,
    mul,
    reduce_sum,
    reshape,
    scale,
    slice_axis,
    softmax,
)

logger = logging.getLogger(__name__)

N_STAGES = 3
ALL_CLASSES = tuple(range(len(CLASS_NAMES)))


@dataclass(frozen=True)
class SegHeadConfig:
    seg_dim: int = 64
    skip_depths: Tuple[int, int] = (2, 4)
    n_classes: int = len(CLASS_NAMES)
    min_channels: int = 4
    temporal_channels: int = 4
    dice_smooth: float = 1.0
    sa_classes: Tuple[int, ...] = ALL_CLASSES
    la_classes: Tuple[int, ...] = ALL_CLASSES

    def stage_channels(self) -> List[int]:
        return [max(self.seg_dim >> k, self.min_channels) for k in range(N_STAGES + 1)]

    def validate(self, model_config: ModelConfig) -> None:
        if self.n_classes != len(CLASS_NAMES):
            raise ConfigError(f"Segmentation head needs {len(CLASS_NAMES)} classes to match the label space.")
        if len(self.skip_depths) != N_STAGES - 1 or not all(1 <= d <= model_config.depth for d in self.skip_depths):
            raise ConfigError(
                f"skip_depths {self.skip_depths} must name {N_STAGES - 1} encoder depths within 1..{model_config.depth}."
            )
        if model_config.patch_size != 2**N_STAGES:
            raise ConfigError(
                f"{N_STAGES} upsampling stages restore a patch size of {2**N_STAGES}, got {model_config.patch_size}."
            )
        if self.seg_dim <= 0 or self.min_channels <= 0 or self.temporal_channels <= 0:
            raise ConfigError("Segmentation widths must be positive.")
        for classes in (self.sa_classes, self.la_classes):
            if any(not 0 <= c < self.n_classes for c in classes):
                raise ConfigError(f"Class availability {classes} outside 0..{self.n_classes - 1}.")

    def available_classes(self, view_tag: str) -> Tuple[int, ...]:
        return tuple(self.sa_classes if view_tag.startswith("SA") else self.la_classes)

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SegmentationLogits:
    logits: Tensor
    plane_ids: List[int]
    image_shape: Tuple[int, int, int]
    patch_frames: int

    @property
    def rows_per_plane(self) -> int:
        h, w, t = self.image_shape
        return h * w * t

    def per_plane(self) -> np.ndarray:
        """Logits as (planes, H, W, T, classes)."""
        h, w, t = self.image_shape
        pt = self.patch_frames
        n_classes = self.logits.shape[1]
        blocks = self.logits.data.reshape(len(self.plane_ids), t // pt, h, w, pt, n_classes)
        return blocks.transpose(0, 2, 3, 1, 4, 5).reshape(len(self.plane_ids), h, w, t, n_classes)

    def predict_labels(self) -> np.ndarray:
        """Argmax labels (planes, H, W, T); ties resolve to the lowest class id."""
        return np.argmax(self.per_plane(), axis=-1).astype(np.uint8)

    def labels_to_rows(self, labels: np.ndarray) -> np.ndarray:
        """Reorder (planes, H, W, T) labels to match logit rows."""
        h, w, t = self.image_shape
        pt = self.patch_frames
        expected = (len(self.plane_ids), h, w, t)
        if labels.shape != expected:
            raise ShapeError(f"Labels of shape {labels.shape} do not match logits for {expected}.")
        return labels.reshape(expected[0], h, w, t // pt, pt).transpose(0, 3, 1, 2, 4).reshape(-1)


@lru_cache(maxsize=32)
def _upsample_index(n_maps: int, h: int, w: int, factor: int) -> np.ndarray:
    """Source row (at h×w) of every row of the (h·f)×(w·f) nearest-upsampled maps."""
    y = np.arange(h * factor) // factor
    x = np.arange(w * factor) // factor
    rows = np.arange(n_maps)[:, None, None] * (h * w) + y[None, :, None] * w + x[None, None, :]
    return rows.reshape(-1)


@lru_cache(maxsize=32)
def _conv_index(n_maps: int, h: int, w: int) -> np.ndarray:
    """3×3 neighbourhood rows per pixel; out-of-map neighbours point at the zero row ``n_maps·h·w``."""
    pad_row = n_maps * h * w
    b, y, x = np.meshgrid(np.arange(n_maps), np.arange(h), np.arange(w), indexing="ij")
    columns = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy, xx = y + dy, x + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            columns.append(np.where(valid, b * h * w + np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1), pad_row))
    return np.stack([c.reshape(-1) for c in columns], axis=1).reshape(-1)


class SegmentationHead:
    def __init__(
        self,
        config: SegHeadConfig,
        model_config: ModelConfig,
        seed: int = 0,
        params: Optional[Params] = None,
    ):
        config.validate(model_config)
        self.config = config
        self.model_config = model_config
        if params is None:
            params = self.init_params(config, model_config, seed)
        self.params: Params = params

    @staticmethod
    def init_params(config: SegHeadConfig, model_config: ModelConfig, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        channels = config.stage_channels()
        dim = model_config.embed_dim
        params: Params = {}
        init_linear(params, rng, "seg.entry", dim, channels[0])
        for k in range(1, N_STAGES + 1):
            init_linear(params, rng, f"seg.stage{k}.skip", dim, channels[k])
            init_linear(params, rng, f"seg.stage{k}.fuse", channels[k - 1] + channels[k], channels[k])
            init_linear(params, rng, f"seg.stage{k}.conv", 9 * channels[k], channels[k])
        init_linear(params, rng, "seg.temporal", channels[N_STAGES], model_config.patch_frames * config.temporal_channels)
        init_linear(params, rng, "seg.classifier", config.temporal_channels, config.n_classes)
        return params

    def _canonical_order(self, latents: LatentTokens) -> Tuple[np.ndarray, List[int]]:
        index = latents.index
        plane_ids = [int(p) for p in np.unique(index[:, 0])]
        gh, gw, gt = self.model_config.grid
        if index.shape[0] != len(plane_ids) * gh * gw * gt:
            raise ConfigError(
                f"Segmentation needs every token of each plane ({gh * gw * gt} per plane); got {index.shape[0]} rows "
                f"for {len(plane_ids)} planes."
            )
        plane_rank = np.searchsorted(plane_ids, index[:, 0])
        order = np.lexsort((index[:, 1], index[:, 2], index[:, 3], plane_rank))
        return order, plane_ids

    def _skip_source(self, latents: LatentTokens, stage: int) -> Tensor:
        if stage == 1:
            return latents.tokens
        depth = self.config.skip_depths[N_STAGES - stage]
        if depth not in latents.skips:
            raise ConfigError(f"Encoder skip at depth {depth} was not retained by the forward pass.")
        return latents.skips[depth]

    def _conv3x3(self, x: Tensor, n_maps: int, h: int, w: int, name: str) -> Tensor:
        channels = x.shape[1]
        padded = concat([x, constant(np.zeros((1, channels)))], axis=0)
        patches = gather_rows(padded, _conv_index(n_maps, h, w))
        return linear(reshape(patches, (n_maps * h * w, 9 * channels)), self.params, name)

    def forward(self, latents: LatentTokens) -> SegmentationLogits:
        """Class logits for every pixel and frame of every plane in one pass."""
        order, plane_ids = self._canonical_order(latents)
        gh, gw, gt = self.model_config.grid
        n_maps = len(plane_ids) * gt

        x = gelu(linear(gather_rows(latents.tokens, order), self.params, "seg.entry"))
        h, w = gh, gw
        for k in range(1, N_STAGES + 1):
            upsampled = gather_rows(x, _upsample_index(n_maps, h, w, 2))
            skip = linear(self._skip_source(latents, k), self.params, f"seg.stage{k}.skip")
            skip = gather_rows(skip, order[_upsample_index(n_maps, gh, gw, 2**k)])
            h, w = 2 * h, 2 * w
            fused = gelu(linear(concat([upsampled, skip], axis=1), self.params, f"seg.stage{k}.fuse"))
            x = gelu(self._conv3x3(fused, n_maps, h, w, f"seg.stage{k}.conv"))

        pt = self.model_config.patch_frames
        frames = gelu(linear(x, self.params, "seg.temporal"))
        frames = reshape(frames, (n_maps * h * w * pt, self.config.temporal_channels))
        logits = linear(frames, self.params, "seg.classifier")
        image_shape = (h, w, gt * pt)
        return SegmentationLogits(logits=logits, plane_ids=plane_ids, image_shape=image_shape, patch_frames=pt)


def segment_planes(latents: LatentTokens, head: SegmentationHead) -> SegmentationLogits:
    return head.forward(latents)


# --- Loss ---


def soft_dice(probs: Tensor, onehot: np.ndarray, smooth: float) -> Tensor:
    """Per-class soft Dice (2·Σpy + s)/(Σp + Σy + s), shape (classes,)."""
    intersection = reduce_sum(mul(probs, constant(onehot)), axis=0)
    denominator = add(reduce_sum(probs, axis=0), constant(onehot.sum(axis=0) + smooth))
    return div(add(scale(intersection, 2.0), constant(np.full(onehot.shape[1], smooth))), denominator)


def cross_entropy(logits: Tensor, labels: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy over rows where ``valid`` is set."""
    n_classes = logits.shape[1]
    weights = np.eye(n_classes)[labels] * valid[:, None] / max(int(valid.sum()), 1)
    return scale(reduce_sum(mul(log_softmax(logits, axis=-1), constant(weights))), -1.0)


def seg_loss(
    output: SegmentationLogits,
    labels: np.ndarray,
    availability: Sequence[Sequence[int]],
    smooth: float = 1.0,
) -> Tensor:
    """Mean over planes of 0.5·(CE + 1 − mean soft Dice over available classes).

    Pixels whose label is an unavailable class are left out of the
    cross-entropy; unavailable classes are left out of the Dice mean. A plane
    with no available class contributes 0.
    """
    rows = output.labels_to_rows(np.asarray(labels))
    if len(availability) != len(output.plane_ids):
        raise ConfigError(f"{len(availability)} availability entries for {len(output.plane_ids)} planes.")
    n_classes = output.logits.shape[1]
    per_plane = output.rows_per_plane
    total = None
    for p, classes in enumerate(availability):
        classes = sorted(set(int(c) for c in classes))
        if not classes:
            logger.warning(f"Plane {output.plane_ids[p]} has no available classes; it contributes 0 to the loss.")
            continue
        plane_labels = rows[p * per_plane : (p + 1) * per_plane]
        plane_logits = slice_axis(output.logits, p * per_plane, (p + 1) * per_plane, axis=0)
        valid = np.isin(plane_labels, classes)
        ce = cross_entropy(plane_logits, plane_labels, valid)
        onehot = np.eye(n_classes)[plane_labels] * valid[:, None]
        class_weights = np.zeros(n_classes)
        class_weights[classes] = 1.0 / len(classes)
        dice = soft_dice(softmax(plane_logits, axis=-1), onehot, smooth)
        mean_dice = reduce_sum(mul(dice, constant(class_weights)))
        plane_loss = scale(add(ce, add(constant(1.0), scale(mean_dice, -1.0))), 0.5)
        total = plane_loss if total is None else add(total, plane_loss)
    if total is None:
        return constant(0.0)
    return scale(total, 1.0 / len(availability))
