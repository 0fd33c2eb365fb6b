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

"""Masked autoencoder over multi-view 2D+T patch tokens.

Encoder: linear patch projection + fixed 4D positional embedding, pre-norm
transformer blocks over the kept tokens, final LayerNorm. No class token.
Decoder: linear to the decoder width, one shared mask token scattered into
every masked position, positional embeddings re-added, blocks, LayerNorm and
a linear head back to patch values.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from heart_models.errors import ConfigError, NumericError, PlanMismatchError, UsageError
from heart_models.mae.layers import (
    Params,
    init_block,
    init_layer_norm,
    init_linear,
    linear,
    norm,
    transformer_block,
)
from heart_models.tensor_engine import (
    Tensor,
    add,
    constant,
    gather_rows,
    mean_rows,
    mse,
    parameter,
    scatter_rows,
)
from heart_models.tokenizer import KeptTokens, MaskPlan, TokenBatch, apply_mask, full_plan, positional_embeddings

logger = logging.getLogger(__name__)

LOSS_SCOPES = ("all", "masked")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    n_frames: int = 50
    patch_size: int = 8
    patch_frames: int = 25
    n_sa: int = 6
    n_la: int = 3
    embed_dim: int = 128
    depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.7
    init_std: float = 0.02

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.patch_frames

    @property
    def grid(self) -> Tuple[int, int, int]:
        side = self.image_size // self.patch_size
        return side, side, self.n_frames // self.patch_frames

    @property
    def tokens_per_plane(self) -> int:
        gh, gw, gt = self.grid
        return gh * gw * gt

    @property
    def n_planes(self) -> int:
        return self.n_sa + self.n_la

    def validate(self) -> None:
        checks = [
            (self.embed_dim % self.num_heads == 0, "embed_dim must be divisible by num_heads"),
            (self.decoder_dim % self.decoder_heads == 0, "decoder_dim must be divisible by decoder_heads"),
            (self.embed_dim % 8 == 0 and self.decoder_dim % 8 == 0, "embedding widths must be multiples of 8"),
            (self.image_size % self.patch_size == 0, "image_size must be divisible by patch_size"),
            (self.n_frames % self.patch_frames == 0, "n_frames must be divisible by patch_frames"),
            (0.0 <= self.mask_ratio < 1.0, "mask_ratio must lie in [0, 1)"),
            (self.depth >= 1 and self.decoder_depth >= 1, "encoder and decoder need at least one block"),
            (self.n_planes >= 1, "at least one plane is required"),
            (self.mlp_ratio >= 1, "mlp_ratio must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(f"Invalid model config: {message}.")

    def to_dict(self) -> Dict:
        return asdict(self)


def config_hash(config: Dict) -> str:
    """First 16 hex chars of SHA-256 over the sorted-key JSON of ``config``."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class LatentTokens:
    """Encoder output rows with the token indices and batch positions they carry.

    ``skips`` maps encoder depth (1-based, before the final norm) to that
    block's output.
    """

    tokens: Tensor
    index: np.ndarray
    positions: np.ndarray
    skips: Dict[int, Tensor] = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


def _check_finite(x: Tensor, stage: str, layer: int) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"Non-finite activation in {stage} layer {layer}.")


class MaskedAutoencoder:
    def __init__(self, config: ModelConfig, seed: int = 0, params: Optional[Params] = None):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: Params = params if params is not None else self.init_params(config, seed)

    @staticmethod
    def init_params(config: ModelConfig, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        std = config.init_std
        params: Params = {}
        init_linear(params, rng, "encoder.patch_embed", config.patch_dim, config.embed_dim, std)
        for i in range(config.depth):
            init_block(params, rng, f"encoder.blocks.{i}", config.embed_dim, config.mlp_ratio, std)
        init_layer_norm(params, "encoder.norm", config.embed_dim)

        init_linear(params, rng, "decoder.embed", config.embed_dim, config.decoder_dim, std)
        mask_token = rng.normal(0.0, std, size=(1, config.decoder_dim)).astype(np.float32)
        params["decoder.mask_token"] = parameter(mask_token, name="decoder.mask_token")
        for i in range(config.decoder_depth):
            init_block(params, rng, f"decoder.blocks.{i}", config.decoder_dim, config.mlp_ratio, std)
        init_layer_norm(params, "decoder.norm", config.decoder_dim)
        init_linear(params, rng, "decoder.pred", config.decoder_dim, config.patch_dim, std)
        return params

    # --- Bookkeeping ---

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def encoder_params(self) -> Params:
        return {name: p for name, p in self.params.items() if name.startswith("encoder.")}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in self.params.items()}

    def config_hash(self) -> str:
        return config_hash(self.config.to_dict())

    # --- Encoder ---

    def project_patches(self, patches: np.ndarray) -> Tensor:
        if patches.ndim != 2 or patches.shape[1] != self.config.patch_dim:
            raise ConfigError(
                f"Patch rows of width {patches.shape[-1]} do not match the projection input {self.config.patch_dim}."
            )
        return linear(constant(patches), self.params, "encoder.patch_embed")

    def embed_tokens(self, kept: KeptTokens) -> Tensor:
        """Linear patch projection plus the positional embedding of each token index."""
        projected = self.project_patches(kept.tokens)
        return add(projected, constant(positional_embeddings(kept.index, self.config.embed_dim)))

    def encode(self, embeddings: Tensor, kept: KeptTokens) -> LatentTokens:
        x = embeddings
        skips: Dict[int, Tensor] = {}
        for i in range(self.config.depth):
            x = transformer_block(x, self.params, f"encoder.blocks.{i}", self.config.num_heads)
            _check_finite(x, "encoder", i + 1)
            skips[i + 1] = x
        x = norm(x, self.params, "encoder.norm")
        return LatentTokens(tokens=x, index=kept.index, positions=kept.positions, skips=skips)

    # --- Decoder ---

    def decode_reconstruct(self, latents: LatentTokens, plan: MaskPlan, index: np.ndarray) -> Tensor:
        """Predict every token of the batch; rows follow the original token order."""
        n_tokens = int(index.shape[0])
        if plan.n_tokens != n_tokens or not np.array_equal(np.sort(latents.positions), plan.kept):
            raise PlanMismatchError("Mask plan does not match the positions carried by the latents.")
        x = scatter_rows(linear(latents.tokens, self.params, "decoder.embed"), latents.positions, n_tokens)
        if plan.masked.size:
            mask_rows = gather_rows(self.params["decoder.mask_token"], np.zeros(plan.masked.size, dtype=np.int64))
            x = add(x, scatter_rows(mask_rows, plan.masked, n_tokens))
        x = add(x, constant(positional_embeddings(index, self.config.decoder_dim)))
        for i in range(self.config.decoder_depth):
            x = transformer_block(x, self.params, f"decoder.blocks.{i}", self.config.decoder_heads)
            _check_finite(x, "decoder", i + 1)
        x = norm(x, self.params, "decoder.norm")
        return linear(x, self.params, "decoder.pred")

    # --- Passes ---

    def forward_pretrain(self, batch: TokenBatch, plan: MaskPlan) -> Tensor:
        kept = apply_mask(batch, plan)
        latents = self.encode(self.embed_tokens(kept), kept)
        return self.decode_reconstruct(latents, plan, batch.index)

    def forward_full(self, batch: TokenBatch) -> LatentTokens:
        """No-mask encoder pass over every token, keeping per-depth skips."""
        kept = apply_mask(batch, full_plan(batch.n_tokens))
        return self.encode(self.embed_tokens(kept), kept)


def pretrain_loss(target: np.ndarray, prediction: Tensor, plan: MaskPlan, scope: str = "all") -> Tensor:
    """MSE over every token element (``all``) or over masked tokens only (``masked``).

    With no masked tokens the ``masked`` scope falls back to all tokens.
    """
    if scope not in LOSS_SCOPES:
        raise ConfigError(f"Unknown loss scope '{scope}'; expected one of {LOSS_SCOPES}.")
    target = np.asarray(target)
    if scope == "masked" and plan.masked.size:
        return mse(gather_rows(prediction, plan.masked), constant(target[plan.masked]))
    return mse(prediction, constant(target))


def pooled_representation(latents: LatentTokens) -> Tensor:
    """Token-mean of the latent rows, shape (1, dim)."""
    if latents.n_tokens == 0:
        raise UsageError("Cannot pool an empty set of latent tokens.")
    return mean_rows(latents.tokens)
