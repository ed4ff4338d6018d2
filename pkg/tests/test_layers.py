import numpy as np
import pytest

from layergrasp import gradnet as gn
from layergrasp.error_types import ContractViolation
from layergrasp.layers import MLP, CrossAttentionLayer, Linear, MultiHeadAttention, TransformerEncoderLayer


def test_named_parameters_follow_attribute_order(rng):
    mlp = MLP([3, 5, 2], rng)
    names = [name for name, _ in mlp.named_parameters()]
    assert names == ['layers.0.weight', 'layers.0.bias', 'layers.1.weight', 'layers.1.bias']
    assert mlp.num_parameters() == 3 * 5 + 5 + 5 * 2 + 2


def test_state_dict_round_trip(rng):
    source = MLP([4, 8, 1], rng)
    target = MLP([4, 8, 1], np.random.default_rng(99))
    target.load_state_dict(source.state_dict())
    x = gn.Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    np.testing.assert_array_equal(source(x).data, target(x).data)


def test_load_state_dict_rejects_mismatch(rng):
    mlp = MLP([4, 8, 1], rng)
    state = mlp.state_dict()
    state.pop('layers.1.bias')
    with pytest.raises(ContractViolation):
        mlp.load_state_dict(state)
    wrong = MLP([4, 6, 1], rng).state_dict()
    with pytest.raises(ContractViolation):
        mlp.load_state_dict(wrong)


def test_astype_returns_independent_copy(rng):
    layer = Linear(3, 2, rng)
    wide = layer.astype(np.float64)
    assert wide.weight.dtype == np.float64
    assert layer.weight.dtype == np.float32
    wide.weight.data[0, 0] += 1.0
    assert wide.weight.data[0, 0] != layer.weight.data[0, 0]


def test_linear_checks_input_width(rng):
    with pytest.raises(ContractViolation):
        Linear(3, 2, rng)(gn.Tensor(np.zeros((1, 4))))


def test_attention_heads_must_divide_dim(rng):
    with pytest.raises(ContractViolation):
        MultiHeadAttention(10, 3, rng)


def test_attention_weights_are_distributions(rng):
    attention = MultiHeadAttention(8, 2, rng)
    x = gn.Tensor(rng.standard_normal((2, 3, 8)).astype(np.float32))
    out, weights = attention(x, x, return_weights=True)
    assert out.shape == (2, 3, 8)
    assert weights.shape == (2, 2, 3, 3)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, rtol=1e-5)


def test_encoder_layer_is_permutation_equivariant(rng):
    layer = TransformerEncoderLayer(8, 2, 16, rng).astype(np.float64)
    x = rng.standard_normal((1, 5, 8))
    order = [2, 4, 0, 1, 3]
    out = layer(gn.Tensor(x)).data
    permuted = layer(gn.Tensor(x[:, order])).data
    np.testing.assert_allclose(permuted, out[:, order], atol=1e-10)


def test_cross_attention_is_residual(rng):
    layer = CrossAttentionLayer(4, 2, rng)
    for p in layer.parameters():
        p.data[...] = 0.0
    query = gn.Tensor(rng.standard_normal((1, 3, 4)).astype(np.float32))
    key_value = gn.Tensor(rng.standard_normal((1, 5, 4)).astype(np.float32))
    np.testing.assert_array_equal(layer(query, key_value).data, query.data)
