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


from dataclasses import asdict

import numpy as np
import pytest

from heart_models.errors import ConfigError
from heart_models.heads import PhenotypeHead, PhenotypeHeadConfig, Standardizer, phenotype_loss
from heart_models.mae import LatentTokens, MaskedAutoencoder
from heart_models.phantom import PHENOTYPE_TARGETS
from heart_models.tensor_engine import check_gradients, constant, parameter
from heart_models.tokenizer import PlaneStack, patchify

TRUTHS = np.array(
    [
        [110.0, 55.0, 40.0, 150.0, 30.0],
        [130.0, 45.0, 35.0, 170.0, 40.0],
        [120.0, 50.0, 45.0, 160.0, 35.0],
    ]
)


@pytest.fixture
def latents(rng, tiny_config):
    cfg = tiny_config.model
    shape = (cfg.image_size, cfg.image_size, cfg.n_frames)
    stack = PlaneStack(planes=[rng.random(shape).astype(np.float32) for _ in range(2)], view_tags=["SA1", "LA1"])
    model = MaskedAutoencoder(cfg, seed=0)
    return model, model.forward_full(patchify(stack, cfg.patch_size, cfg.patch_frames))


def head_config(tiny_config) -> PhenotypeHeadConfig:
    return PhenotypeHeadConfig(**asdict(tiny_config.phenotype_head))


def test_standardizer_roundtrip_and_statistics():
    standardizer = Standardizer.fit(TRUTHS)
    assert standardizer.mean == pytest.approx((120.0, 50.0, 40.0, 160.0, 35.0))
    z = standardizer.standardize(TRUTHS)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(standardizer.destandardize(z), TRUTHS)
    assert Standardizer.from_dict(standardizer.to_dict()) == standardizer


def test_standardizer_rejects_constant_targets():
    with pytest.raises(ConfigError):
        Standardizer.fit(np.ones((4, 5)))
    with pytest.raises(ConfigError):
        Standardizer.fit(TRUTHS[:1])


def test_zero_output_layer_predicts_the_means(latents, tiny_config):
    _, lat = latents
    head = PhenotypeHead(head_config(tiny_config), seed=0)
    head.params["phenotype.fc2.weight"] = parameter(np.zeros_like(head.params["phenotype.fc2.weight"].data))
    head.params["phenotype.fc2.bias"] = parameter(np.zeros_like(head.params["phenotype.fc2.bias"].data))
    standardizer = Standardizer.fit(TRUTHS)
    prediction = head.predict_phenotypes(lat, standardizer)
    np.testing.assert_allclose(prediction.as_array(), standardizer.mean)


def test_prediction_needs_a_standardizer(latents, tiny_config):
    _, lat = latents
    head = PhenotypeHead(head_config(tiny_config), seed=0)
    assert head.forward(lat).shape == (1, len(PHENOTYPE_TARGETS))
    with pytest.raises(ConfigError):
        head.predict_phenotypes(lat, None)


def test_loss_is_zero_at_the_truth(latents, tiny_config):
    _, lat = latents
    head = PhenotypeHead(head_config(tiny_config), seed=0)
    standardizer = Standardizer.fit(TRUTHS)
    prediction = head.forward(lat)
    truth = standardizer.destandardize(prediction.data.reshape(-1))
    assert phenotype_loss(prediction, truth, standardizer).item() == pytest.approx(0.0, abs=1e-10)


def test_targets_must_keep_their_order():
    with pytest.raises(ConfigError):
        PhenotypeHeadConfig(targets=tuple(reversed(PHENOTYPE_TARGETS))).validate()


def test_phenotype_loss_gradients_reach_the_encoder(latents, tiny_config, rng):
    model, lat = latents
    head = PhenotypeHead(head_config(tiny_config), seed=1)
    standardizer = Standardizer.fit(TRUTHS)
    truth = TRUTHS[1]
    cfg = tiny_config.model
    shape = (cfg.image_size, cfg.image_size, cfg.n_frames)
    stack = PlaneStack(planes=[rng.random(shape).astype(np.float32) for _ in range(2)], view_tags=["SA1", "LA1"])
    batch = patchify(stack, cfg.patch_size, cfg.patch_frames)
    encoder_names = set(model.encoder_params())

    def loss_fn(params):
        encoder = MaskedAutoencoder(cfg, params={**model.params, **{k: v for k, v in params.items() if k in encoder_names}})
        trial_head = PhenotypeHead(head.config, params={k: v for k, v in params.items() if k.startswith("phenotype.")})
        return phenotype_loss(trial_head.forward(encoder.forward_full(batch)), truth, standardizer)

    checked = {**model.encoder_params(), **head.params}
    worst = check_gradients(loss_fn, checked)
    assert set(worst) == set(checked)
    assert max(worst.values()) <= 1e-3


def test_prediction_ignores_token_order(latents, tiny_config):
    _, lat = latents
    head = PhenotypeHead(head_config(tiny_config), seed=2)
    perm = np.random.default_rng(3).permutation(lat.n_tokens)
    shuffled = LatentTokens(
        tokens=constant(lat.tokens.data[perm]),
        index=lat.index[perm],
        positions=lat.positions[perm],
    )
    np.testing.assert_allclose(head.forward(shuffled).data, head.forward(lat).data, atol=1e-6)
