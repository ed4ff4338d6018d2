"""Base sensory encoders and the multisensory encoder.

Each modality is encoded to a 32-vector. The two tactile latents are fused by
cross-attention, then all latents enter a transformer encoder as an unordered
token set (no positional terms) whose mean token is projected to 64 dims.
Ablation modes drop modalities or swap the fusion stage.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from . import gradnet as gn
from .core import AUX_SIZE, PRO_SIZE, TOUCH_SHAPE, VIS_SHAPE, Observation
from .error_types import ContractViolation
from .layers import MLP, Conv2d, CrossAttentionLayer, Linear, Module, TransformerEncoderLayer

logger = logging.getLogger(__name__)

LATENT = 32
FUSED = 64
CROSS_TOKENS = 4
CROSS_HEADS = 2
CROSS_LAYERS = 2
TRANSFORMER_HEADS = 8
TRANSFORMER_LAYERS = 2
FFN_HIDDEN = 64

TOKEN_ORDER = ('vis', 'ind', 'thu', 'c', 'pro', 'aux')


class AblationMode(str, Enum):
    OURS = 'Ours'
    ONLY_VISION = 'OV'
    NO_TOUCH = 'NT'
    NO_FORCE = 'NF'
    SINGLE_LOOP = 'SL'
    NO_ATTENTION = 'NA'


@dataclass(frozen=True)
class FusionFlags:
    """Which latents become tokens and how they are fused"""
    vis: bool = True
    ind: bool = True
    thu: bool = True
    c: bool = True
    pro: bool = True
    aux: bool = True
    bypass: bool = False
    concat_mlp: bool = False

    @classmethod
    def for_mode(cls, mode: AblationMode) -> 'FusionFlags':
        mode = AblationMode(mode)
        if mode is AblationMode.ONLY_VISION:
            return cls(ind=False, thu=False, c=False, pro=False, aux=False, bypass=True)
        if mode is AblationMode.NO_TOUCH:
            return cls(ind=False, thu=False, c=False)
        if mode is AblationMode.NO_FORCE:
            return cls(pro=False)
        if mode is AblationMode.SINGLE_LOOP:
            return cls(aux=False)
        if mode is AblationMode.NO_ATTENTION:
            return cls(concat_mlp=True)
        return cls()

    @property
    def tokens(self) -> List[str]:
        return [name for name in TOKEN_ORDER if getattr(self, name)]

    @property
    def touch(self) -> bool:
        return self.ind or self.thu or self.c


@dataclass
class LatentSet:
    """Per-modality latents (B, 32); modalities a mode excludes stay None"""
    vis: Optional[gn.Tensor] = None
    ind: Optional[gn.Tensor] = None
    thu: Optional[gn.Tensor] = None
    c: Optional[gn.Tensor] = None
    pro: Optional[gn.Tensor] = None
    aux: Optional[gn.Tensor] = None
    kappa: Optional[gn.Tensor] = None


@dataclass
class ObservationBatch:
    vis: np.ndarray
    ind: np.ndarray
    thu: np.ndarray
    pro: np.ndarray
    aux: np.ndarray

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], dtype=np.float32) -> 'ObservationBatch':
        """Stacks observations; depth crops are centred per sample and scaled to centimetres"""
        if not observations:
            raise ContractViolation("cannot batch zero observations")
        vis = np.stack([o.vis for o in observations]).astype(np.float64)
        vis = (vis - vis.mean(axis=(1, 2), keepdims=True)) * 100.0
        return cls(
            vis=vis.astype(dtype),
            ind=np.stack([o.ind for o in observations]).astype(dtype),
            thu=np.stack([o.thu for o in observations]).astype(dtype),
            pro=np.stack([o.pro for o in observations]).astype(dtype),
            aux=np.stack([o.aux for o in observations]).astype(dtype),
        )

    def __len__(self) -> int:
        return self.vis.shape[0]


class ConvEncoder(Module):
    """Two 7x7 stride-2 convolutions with rectifiers, then global average pooling"""

    def __init__(self, in_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, 16, 7, rng, stride=2)
        self.conv2 = Conv2d(16, LATENT, 7, rng, stride=2)

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        h = gn.relu(self.conv1(x))
        h = gn.relu(self.conv2(h))
        return h.mean(axis=(2, 3))


class VectorEncoder(Module):
    def __init__(self, in_features: int, rng: np.random.Generator):
        self.linear = Linear(in_features, LATENT, rng)

    def forward(self, x: gn.Tensor) -> gn.Tensor:
        return gn.relu(self.linear(x))


class CrossAttentionBlock(Module):
    """Index tokens query thumb tokens through stacked residual cross-attention"""

    def __init__(self, rng: np.random.Generator, symmetric: bool = False):
        dim = LATENT // CROSS_TOKENS
        self.index_queries = [CrossAttentionLayer(dim, CROSS_HEADS, rng) for _ in range(CROSS_LAYERS)]
        self.symmetric = symmetric
        if symmetric:
            self.thumb_queries = [CrossAttentionLayer(dim, CROSS_HEADS, rng) for _ in range(CROSS_LAYERS)]
        self.out = Linear(LATENT, LATENT, rng)

    @staticmethod
    def _attend(layers, query: gn.Tensor, key_value: gn.Tensor) -> gn.Tensor:
        for layer in layers:
            query = layer(query, key_value)
        return query

    def forward(self, l_ind: gn.Tensor, l_thu: gn.Tensor) -> gn.Tensor:
        batch = l_ind.shape[0]
        shape = (batch, CROSS_TOKENS, LATENT // CROSS_TOKENS)
        ind_tokens, thu_tokens = l_ind.reshape(shape), l_thu.reshape(shape)
        fused = self._attend(self.index_queries, ind_tokens, thu_tokens)
        if self.symmetric:
            fused = (fused + self._attend(self.thumb_queries, thu_tokens, ind_tokens)) * 0.5
        return self.out(fused.reshape(batch, LATENT))


class TokenTransformer(Module):
    def __init__(self, rng: np.random.Generator):
        self.layers = [TransformerEncoderLayer(LATENT, TRANSFORMER_HEADS, FFN_HIDDEN, rng)
                       for _ in range(TRANSFORMER_LAYERS)]
        self.out = Linear(LATENT, FUSED, rng)

    def forward(self, tokens: Sequence[gn.Tensor]) -> gn.Tensor:
        batch = tokens[0].shape[0]
        x = gn.concat([t.reshape(batch, 1, LATENT) for t in tokens], axis=1)
        for layer in self.layers:
            x = layer(x)
        return self.out(x.mean(axis=1))


class MultisensoryEncoder(Module):
    """Builds only the sub-networks its ablation mode uses"""

    def __init__(self, rng: np.random.Generator, mode: AblationMode = AblationMode.OURS,
                 symmetric_cross_attention: bool = False):
        self.mode = AblationMode(mode)
        self.flags = FusionFlags.for_mode(self.mode)
        flags = self.flags
        self.vis_encoder = ConvEncoder(1, rng) if flags.vis else None
        self.ind_encoder = ConvEncoder(TOUCH_SHAPE[2], rng) if (flags.ind or flags.c) else None
        self.thu_encoder = ConvEncoder(TOUCH_SHAPE[2], rng) if (flags.thu or flags.c) else None
        self.cross = CrossAttentionBlock(rng, symmetric_cross_attention) if flags.c else None
        self.pro_encoder = VectorEncoder(PRO_SIZE, rng) if flags.pro else None
        self.aux_encoder = VectorEncoder(AUX_SIZE, rng) if flags.aux else None
        if flags.bypass:
            self.bypass = Linear(LATENT, FUSED, rng)
        elif flags.concat_mlp:
            self.mlp = MLP([LATENT * len(flags.tokens), FUSED, FUSED], rng)
        else:
            self.transformer = TokenTransformer(rng)
        logger.debug(f"Built {self.mode.value} encoder with tokens {flags.tokens} ({self.num_parameters()} parameters)")

    def encode_vis(self, vis: gn.Tensor) -> gn.Tensor:
        if tuple(vis.shape[1:]) != VIS_SHAPE:
            raise ContractViolation(f"vision input must be (B, {VIS_SHAPE[0]}, {VIS_SHAPE[1]}), got {vis.shape}")
        return self.vis_encoder(vis.reshape(vis.shape[0], 1, *VIS_SHAPE))

    @staticmethod
    def _touch(encoder: ConvEncoder, field: gn.Tensor) -> gn.Tensor:
        if tuple(field.shape[1:]) != TOUCH_SHAPE:
            raise ContractViolation(f"touch input must be (B, 25, 25, 3), got {field.shape}")
        return encoder(field.transpose(0, 3, 1, 2))

    def encode_touch(self, ind: gn.Tensor, thu: gn.Tensor):
        return self._touch(self.ind_encoder, ind), self._touch(self.thu_encoder, thu)

    def encode_pro(self, pro: gn.Tensor) -> gn.Tensor:
        if tuple(pro.shape[1:]) != (PRO_SIZE,):
            raise ContractViolation(f"force/torque input must be (B, {PRO_SIZE}), got {pro.shape}")
        return self.pro_encoder(pro)

    def encode_aux(self, aux: gn.Tensor) -> gn.Tensor:
        if tuple(aux.shape[1:]) != (AUX_SIZE,):
            raise ContractViolation(f"aux input must be (B, {AUX_SIZE}), got {aux.shape}")
        return self.aux_encoder(aux)

    def cross_attend(self, l_ind: gn.Tensor, l_thu: gn.Tensor) -> gn.Tensor:
        return self.cross(l_ind, l_thu)

    def encode_base(self, batch: ObservationBatch) -> LatentSet:
        """Every latent except aux; shared by the outer and inner stage"""
        flags = self.flags
        latents = LatentSet()
        if flags.vis:
            latents.vis = self.encode_vis(gn.Tensor(batch.vis))
        if self.ind_encoder is not None:
            latents.ind, latents.thu = self.encode_touch(gn.Tensor(batch.ind), gn.Tensor(batch.thu))
        if flags.c:
            latents.c = self.cross_attend(latents.ind, latents.thu)
        if flags.pro:
            latents.pro = self.encode_pro(gn.Tensor(batch.pro))
        return latents

    def fuse_ablated(self, latents: LatentSet) -> gn.Tensor:
        flags = self.flags
        tokens = [getattr(latents, name) for name in flags.tokens]
        if not tokens or any(t is None for t in tokens):
            raise ContractViolation(f"mode {self.mode.value} needs latents {flags.tokens}")
        if flags.bypass:
            return self.bypass(latents.vis)
        if flags.concat_mlp:
            return self.mlp(gn.concat(tokens, axis=-1))
        return self.transformer(tokens)

    def fuse(self, l_vis, l_ind, l_thu, l_c, l_pro, l_aux) -> gn.Tensor:
        """Transformer fusion of the six latents"""
        return self.fuse_ablated(LatentSet(l_vis, l_ind, l_thu, l_c, l_pro, l_aux))

    def fuse_tokens(self, tokens: Sequence[gn.Tensor]) -> gn.Tensor:
        return self.transformer(tokens)

    def with_aux(self, base: LatentSet, aux: np.ndarray) -> LatentSet:
        latents = LatentSet(base.vis, base.ind, base.thu, base.c, base.pro)
        if self.flags.aux:
            latents.aux = self.encode_aux(gn.Tensor(np.asarray(aux, dtype=self.dtype)))
        latents.kappa = self.fuse_ablated(latents)
        return latents

    def forward(self, batch: ObservationBatch) -> LatentSet:
        return self.with_aux(self.encode_base(batch), batch.aux)

    @property
    def dtype(self):
        return self.parameters()[0].dtype


def fuse_ablated(flags: FusionFlags, encoder: MultisensoryEncoder, latents: LatentSet) -> gn.Tensor:
    if not flags.tokens:
        raise ContractViolation("at least one modality must be enabled")
    if flags != encoder.flags:
        raise ContractViolation(f"encoder was built for {encoder.flags}, not {flags}")
    return encoder.fuse_ablated(latents)


def export_features(encoder: MultisensoryEncoder, observations: Sequence[Observation]) -> np.ndarray:
    """Fused latents for a set of observations, shape (N, 64)"""
    batch = ObservationBatch.from_observations(observations, dtype=encoder.dtype)
    with gn.no_grad():
        kappa = encoder(batch).kappa
    return kappa.data.copy()
