import numpy as np
import pytest

from layergrasp import gradnet as gn
from layergrasp.error_types import ContractViolation
from layergrasp.fusion import (FUSED, LATENT, AblationMode, FusionFlags, LatentSet, MultisensoryEncoder,
                               ObservationBatch, export_features, fuse_ablated)

from conftest import random_observation


@pytest.mark.parametrize("mode, tokens", [
    (AblationMode.OURS, ['vis', 'ind', 'thu', 'c', 'pro', 'aux']),
    (AblationMode.ONLY_VISION, ['vis']),
    (AblationMode.NO_TOUCH, ['vis', 'pro', 'aux']),
    (AblationMode.NO_FORCE, ['vis', 'ind', 'thu', 'c', 'aux']),
    (AblationMode.SINGLE_LOOP, ['vis', 'ind', 'thu', 'c', 'pro']),
    (AblationMode.NO_ATTENTION, ['vis', 'ind', 'thu', 'c', 'pro', 'aux']),
])
def test_mode_tokens(mode, tokens):
    flags = FusionFlags.for_mode(mode)
    assert flags.tokens == tokens
    assert flags.bypass == (mode is AblationMode.ONLY_VISION)
    assert flags.concat_mlp == (mode is AblationMode.NO_ATTENTION)


def test_modes_accept_string_values():
    assert FusionFlags.for_mode('NT') == FusionFlags.for_mode(AblationMode.NO_TOUCH)


def test_encoder_builds_only_used_subnetworks(rng):
    encoder = MultisensoryEncoder(rng, AblationMode.ONLY_VISION)
    assert encoder.ind_encoder is None and encoder.cross is None and encoder.pro_encoder is None
    full = MultisensoryEncoder(np.random.default_rng(0), AblationMode.OURS)
    assert full.num_parameters() > encoder.num_parameters()


@pytest.mark.parametrize("mode", list(AblationMode))
def test_forward_shapes_per_mode(mode, rng):
    encoder = MultisensoryEncoder(np.random.default_rng(5), mode)
    batch = ObservationBatch.from_observations([random_observation(rng) for _ in range(3)])
    latents = encoder(batch)
    assert latents.kappa.shape == (3, FUSED)
    assert latents.vis.shape == (3, LATENT)
    assert np.all(np.isfinite(latents.kappa.data))
    if mode is AblationMode.SINGLE_LOOP:
        assert latents.aux is None


def test_observation_batch_centres_depth(rng):
    obs = [random_observation(rng) for _ in range(2)]
    batch = ObservationBatch.from_observations(obs)
    np.testing.assert_allclose(batch.vis.mean(axis=(1, 2)), 0.0, atol=1e-4)
    np.testing.assert_allclose(batch.vis[0], (obs[0].vis - obs[0].vis.mean()) * 100.0, rtol=1e-4, atol=1e-5)
    with pytest.raises(ContractViolation):
        ObservationBatch.from_observations([])


def test_fusion_is_invariant_to_token_order(rng):
    encoder = MultisensoryEncoder(np.random.default_rng(2), AblationMode.OURS)
    tokens = [gn.Tensor(rng.standard_normal((2, LATENT)).astype(np.float32)) for _ in range(6)]
    out = encoder.fuse_tokens(tokens).data
    shuffled = encoder.fuse_tokens([tokens[i] for i in (4, 1, 5, 0, 3, 2)]).data
    np.testing.assert_allclose(out, shuffled, atol=1e-5)


def test_fuse_names_the_six_latents(rng):
    encoder = MultisensoryEncoder(np.random.default_rng(2), AblationMode.OURS)
    latents = [gn.Tensor(rng.standard_normal((1, LATENT)).astype(np.float32)) for _ in range(6)]
    np.testing.assert_array_equal(encoder.fuse(*latents).data, encoder.fuse_tokens(latents).data)


def test_fuse_ablated_contracts(rng):
    encoder = MultisensoryEncoder(np.random.default_rng(2), AblationMode.NO_FORCE)
    with pytest.raises(ContractViolation):
        fuse_ablated(FusionFlags.for_mode(AblationMode.OURS), encoder, LatentSet())
    with pytest.raises(ContractViolation):
        encoder.fuse_ablated(LatentSet(vis=gn.Tensor(np.zeros((1, LATENT), dtype=np.float32))))
    with pytest.raises(ContractViolation):
        fuse_ablated(FusionFlags(False, False, False, False, False, False), encoder, LatentSet())


def test_encoder_rejects_bad_shapes():
    encoder = MultisensoryEncoder(np.random.default_rng(0), AblationMode.OURS)
    with pytest.raises(ContractViolation):
        encoder.encode_vis(gn.Tensor(np.zeros((1, 32, 32), dtype=np.float32)))
    with pytest.raises(ContractViolation):
        encoder.encode_pro(gn.Tensor(np.zeros((1, 5), dtype=np.float32)))


def test_symmetric_cross_attention_adds_thumb_queries():
    plain = MultisensoryEncoder(np.random.default_rng(0), AblationMode.OURS)
    symmetric = MultisensoryEncoder(np.random.default_rng(0), AblationMode.OURS, symmetric_cross_attention=True)
    assert symmetric.num_parameters() > plain.num_parameters()


def test_export_features_shape(rng):
    encoder = MultisensoryEncoder(np.random.default_rng(0), AblationMode.OURS)
    features = export_features(encoder, [random_observation(rng) for _ in range(4)])
    assert features.shape == (4, FUSED)
