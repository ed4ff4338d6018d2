import copy
import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import gradnet as gn
from .error_types import ContractViolation

logger = logging.getLogger(__name__)


class Module:
    """Base class for parameterised layers.

    Parameters are Tensor attributes with ``requires_grad``; submodules are
    Module attributes or lists of Modules. Attribute order fixes parameter order.
    """

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, gn.Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, gn.Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[gn.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> 'Module':
        """Deep copy with every parameter cast to dtype"""
        clone = copy.deepcopy(self)
        for _, p in clone.named_parameters():
            p.data = p.data.astype(dtype)
        return clone

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractViolation(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ContractViolation(f"{name}: stored shape {state[name].shape} vs parameter {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = gn.parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = gn.parameter(np.zeros(out_features))

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ContractViolation(f"Linear expects last axis {self.weight.shape[0]}, got shape {x.shape}")
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        bound = 1.0 / math.sqrt(in_channels * kernel * kernel)
        self.weight = gn.parameter(rng.uniform(-bound, bound, (out_channels, in_channels, kernel, kernel)))
        self.bias = gn.parameter(np.zeros(out_channels))
        self.stride = stride
        self.padding = padding

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        return gn.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = gn.parameter(np.ones(dim))
        self.beta = gn.parameter(np.zeros(dim))

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        return gn.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ContractViolation(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, query: gn.Tensor, key_value: gn.Tensor, return_weights: bool = False):
        return gn.mha(
            query, key_value, self.heads,
            self.query.weight, self.query.bias,
            self.key.weight, self.key.bias,
            self.value.weight, self.value.bias,
            self.out.weight, self.out.bias,
            return_weights=return_weights,
        )


class TransformerEncoderLayer(Module):
    """Post-norm encoder layer: x = LN(x + MHA(x)); x = LN(x + FFN(x))"""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn_in = Linear(dim, hidden, rng)
        self.ffn_out = Linear(hidden, dim, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        x = self.norm1(x + self.attention(x, x))
        return self.norm2(x + self.ffn_out(gn.relu(self.ffn_in(x))))


class CrossAttentionLayer(Module):
    """Residual cross-attention: queries attend over a second token set"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attention = MultiHeadAttention(dim, heads, rng)

    def forward(self, query: gn.Tensor, key_value: gn.Tensor) -> gn.Tensor:
        return query + self.attention(query, key_value)


class MLP(Module):
    """Linear layers with rectifiers between them; the last layer stays linear"""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 final_activation: Optional[str] = None):
        if len(sizes) < 2:
            raise ContractViolation(f"MLP needs at least input and output sizes, got {list(sizes)}")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.final_activation = final_activation

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gn.relu(x)
        if self.final_activation == 'relu':
            x = gn.relu(x)
        return x
