#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.


import dataclasses

import numpy as np
import pytest
from scipy import special

from heart_models.errors import ConfigError, PlanMismatchError, UsageError
from heart_models.mae import LatentTokens, MaskedAutoencoder, ModelConfig, config_hash, pooled_representation, pretrain_loss
from heart_models.mae.layers import LN_EPS
from heart_models.tensor_engine import check_gradients, constant
from heart_models.tokenizer import (
    KeptTokens,
    PlaneStack,
    apply_mask,
    full_plan,
    patchify,
    positional_embeddings,
    sample_mask,
)


@pytest.fixture
def model(tiny_config):
    return MaskedAutoencoder(tiny_config.model, seed=0)


@pytest.fixture
def batch(rng, tiny_config):
    cfg = tiny_config.model
    shape = (cfg.image_size, cfg.image_size, cfg.n_frames)
    stack = PlaneStack(planes=[rng.random(shape).astype(np.float32) for _ in range(2)], view_tags=["SA1", "LA1"])
    return patchify(stack, cfg.patch_size, cfg.patch_frames)


def test_tiny_parameter_count_is_stable(tiny_config):
    first = MaskedAutoencoder(tiny_config.model, seed=0)
    second = MaskedAutoencoder(tiny_config.model, seed=0)
    assert first.parameter_count() == second.parameter_count() == 4096
    for name, value in first.state_dict().items():
        np.testing.assert_array_equal(value, second.state_dict()[name])
    other = MaskedAutoencoder(tiny_config.model, seed=1)
    assert not np.array_equal(first.state_dict()["encoder.patch_embed.weight"], other.state_dict()["encoder.patch_embed.weight"])


def test_encoder_params_exclude_decoder(model):
    names = set(model.encoder_params())
    assert names
    assert all(name.startswith("encoder.") for name in names)
    assert "decoder.mask_token" in model.params


def test_reconstruction_covers_every_token(model, batch):
    plan = sample_mask(batch.n_tokens, 0.5, seed=2)
    prediction = model.forward_pretrain(batch, plan)
    assert prediction.shape == (batch.n_tokens, batch.patch_dim)
    assert np.all(np.isfinite(prediction.data))


def test_encoder_is_permutation_equivariant(model, batch):
    kept = apply_mask(batch, full_plan(batch.n_tokens))
    latents = model.encode(model.embed_tokens(kept), kept)
    perm = np.random.default_rng(0).permutation(batch.n_tokens)
    shuffled = KeptTokens(tokens=kept.tokens[perm], index=kept.index[perm], positions=kept.positions[perm])
    shuffled_latents = model.encode(model.embed_tokens(shuffled), shuffled)
    np.testing.assert_allclose(shuffled_latents.tokens.data, latents.tokens.data[perm], atol=1e-5)
    np.testing.assert_allclose(
        pooled_representation(shuffled_latents).data, pooled_representation(latents).data, atol=1e-5
    )


def test_loss_scopes_partition_the_token_error(model, batch):
    plan = sample_mask(batch.n_tokens, 0.5, seed=3)
    prediction = model.forward_pretrain(batch, plan)
    loss_all = pretrain_loss(batch.tokens, prediction, plan, "all").item()
    loss_masked = pretrain_loss(batch.tokens, prediction, plan, "masked").item()
    squared = (prediction.data.astype(np.float64) - batch.tokens) ** 2
    loss_visible = squared[plan.kept].mean()
    n_masked, n_kept = plan.masked.size, plan.kept.size
    combined = (n_masked * loss_masked + n_kept * loss_visible) / batch.n_tokens
    assert abs(loss_all - combined) <= 1e-6


def test_masked_scope_without_masked_tokens_uses_all_tokens(model, batch):
    plan = full_plan(batch.n_tokens)
    prediction = model.forward_pretrain(batch, plan)
    assert pretrain_loss(batch.tokens, prediction, plan, "masked").item() == pytest.approx(
        pretrain_loss(batch.tokens, prediction, plan, "all").item()
    )
    with pytest.raises(ConfigError):
        pretrain_loss(batch.tokens, prediction, plan, "visible")


def test_single_kept_token_still_reconstructs(model, batch):
    plan = sample_mask(batch.n_tokens, 0.8, seed=4)
    assert plan.kept.size == 1
    prediction = model.forward_pretrain(batch, plan)
    assert prediction.shape == (batch.n_tokens, batch.patch_dim)


def test_single_token_stack_encodes(model, tiny_config, rng):
    cfg = tiny_config.model
    plane = rng.random((cfg.patch_size, cfg.patch_size, cfg.patch_frames)).astype(np.float32)
    single = patchify(PlaneStack(planes=[plane], view_tags=["SA1"]), cfg.patch_size, cfg.patch_frames)
    latents = model.forward_full(single)
    assert latents.tokens.shape == (1, cfg.embed_dim)
    assert np.all(np.isfinite(latents.tokens.data))


def test_forward_full_keeps_skips_per_depth(model, batch, tiny_config):
    latents = model.forward_full(batch)
    assert sorted(latents.skips) == list(range(1, tiny_config.model.depth + 1))
    assert latents.n_tokens == batch.n_tokens
    np.testing.assert_array_equal(latents.positions, np.arange(batch.n_tokens))


def test_mismatched_plan_is_rejected(model, batch):
    with pytest.raises(PlanMismatchError):
        model.forward_pretrain(batch, sample_mask(batch.n_tokens + 2, 0.5, seed=0))


def test_pooling_empty_latents_is_usage_error(tiny_config):
    empty = LatentTokens(
        tokens=constant(np.zeros((0, tiny_config.model.embed_dim))),
        index=np.zeros((0, 4), dtype=np.int64),
        positions=np.zeros(0, dtype=np.int64),
    )
    with pytest.raises(UsageError):
        pooled_representation(empty)


def test_config_validation_and_hash():
    with pytest.raises(ConfigError, match="num_heads"):
        ModelConfig(embed_dim=12, num_heads=5).validate()
    with pytest.raises(ConfigError, match="mask_ratio"):
        ModelConfig(mask_ratio=1.0).validate()
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})
    assert len(config_hash(ModelConfig().to_dict())) == 16


def test_pretrain_loss_gradients_match_finite_differences(model, batch):
    """Every encoder and decoder parameter, element by element."""
    plan = sample_mask(batch.n_tokens, 0.5, seed=5)

    def loss_fn(params):
        trial = MaskedAutoencoder(model.config, params={**model.params, **params})
        return pretrain_loss(batch.tokens, trial.forward_pretrain(batch, plan), plan, "all")

    worst = check_gradients(loss_fn, dict(model.params))
    assert set(worst) == set(model.params)
    assert max(worst.values()) <= 1e-3


def _layer_norm(x, params, name):
    centered = x - x.mean(axis=-1, keepdims=True)
    xhat = centered / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LN_EPS)
    return xhat * params[f"{name}.gamma"] + params[f"{name}.beta"]


def _linear(x, params, name):
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def test_single_token_encoding_matches_closed_form(model, tiny_config, rng):
    """One token attends only to itself, so each block reduces to value projection plus MLP."""
    cfg = tiny_config.model
    plane = rng.random((cfg.patch_size, cfg.patch_size, cfg.patch_frames)).astype(np.float32)
    single = patchify(PlaneStack(planes=[plane], view_tags=["SA1"]), cfg.patch_size, cfg.patch_frames)
    latents = model.forward_full(single)

    p = {name: tensor.data.astype(np.float64) for name, tensor in model.params.items()}
    dim = cfg.embed_dim
    x = _linear(single.tokens.astype(np.float64), p, "encoder.patch_embed")
    x = x + positional_embeddings(single.index, dim).astype(np.float64)
    for i in range(cfg.depth):
        prefix = f"encoder.blocks.{i}"
        qkv = _linear(_layer_norm(x, p, f"{prefix}.norm1"), p, f"{prefix}.attn.qkv")
        x = x + _linear(qkv[:, 2 * dim :], p, f"{prefix}.attn.proj")
        hidden = _linear(_layer_norm(x, p, f"{prefix}.norm2"), p, f"{prefix}.mlp.fc1")
        hidden = hidden * 0.5 * (1.0 + special.erf(hidden / np.sqrt(2.0)))
        x = x + _linear(hidden, p, f"{prefix}.mlp.fc2")
    expected = _layer_norm(x, p, "encoder.norm")

    np.testing.assert_allclose(latents.tokens.data, expected, rtol=1e-4, atol=1e-5)


def test_embed_tokens_is_linear_in_patch_values(model, batch, tiny_config):
    kept = apply_mask(batch, full_plan(batch.n_tokens))
    positional = positional_embeddings(kept.index, tiny_config.model.embed_dim)
    assert not model.params["encoder.patch_embed.bias"].data.any()

    zeros = dataclasses.replace(kept, tokens=np.zeros_like(kept.tokens))
    np.testing.assert_allclose(model.embed_tokens(zeros).data, positional, atol=1e-7)

    base = model.embed_tokens(kept).data - positional
    doubled = dataclasses.replace(kept, tokens=2.0 * kept.tokens)
    np.testing.assert_allclose(model.embed_tokens(doubled).data - positional, 2.0 * base, atol=1e-6)
    assert model.embed_tokens(kept).shape == (kept.tokens.shape[0], tiny_config.model.embed_dim)


def test_swapping_masked_indices_swaps_their_reconstructions(model, batch):
    plan = sample_mask(batch.n_tokens, 0.5, seed=6)
    p, q = (int(i) for i in plan.masked[:2])
    prediction = model.forward_pretrain(batch, plan).data

    swapped_index = batch.index.copy()
    swapped_index[[p, q]] = swapped_index[[q, p]]
    swapped = model.forward_pretrain(dataclasses.replace(batch, index=swapped_index), plan).data

    expected = prediction.copy()
    expected[[p, q]] = prediction[[q, p]]
    np.testing.assert_allclose(swapped, expected, atol=1e-5)
