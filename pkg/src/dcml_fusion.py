#!/usr/bin/env python3
"""
DCML FUSION v1.0.0
==================
Adaptive channel-gated feature fusion.

    z = Phi(F)                       global average pool (identity on vectors)
    s = sigmoid(d2(act(d1(z))))      d1: D -> ceil(D/r), d2: ceil(D/r) -> D
    out = s * F                      channel-wise rescale

Used twice: over the four concatenated patch features (ratio r1) and over the
concatenated [face, de-aged identity, race] modalities (ratio r2). The modality
fusion also supports fixed per-modality weights and plain concatenation as
comparison baselines.
==================
"""

import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

try:
    from .dcml_shared import ConfigError, DimensionError
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from .dcml_nn import Module, Linear
except ImportError:
    from dcml_shared import ConfigError, DimensionError
    import dcml_tensor as T
    from dcml_tensor import Tensor
    from dcml_nn import Module, Linear

logger = logging.getLogger(__name__)

FUSION_MODES = ('adaptive', 'manual', 'concat')
GATE_ACTIVATIONS = ('relu', 'identity')
MODALITY_ORDER = ('face', 'deaging', 'race')

@dataclass
class FusionResult:
    z: Optional[Tensor]         # channel statistics
    s: Optional[Tensor]         # gate in (0, 1)
    gated: Tensor               # s * F
    output: Tensor              # after optional projection
    embedding: Optional[Tensor] = None

# ============= CONCATENATION =============
def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate feature vectors along the channel axis, order preserved"""
    if not parts:
        raise DimensionError("concat_features needs at least one part")
    for p in parts:
        if p.ndim not in (1, 2):
            raise DimensionError("concat_features expects vectors or (N, D) batches", got=p.shape)
    return T.concat(list(parts), axis=-1)

# ============= GATE =============
class FusionBlock(Module):
    def __init__(self, input_dim: int, ratio: float, rng: np.random.Generator,
                 activation: str = 'relu', output_dim: Optional[int] = None):
        super().__init__()
        if input_dim <= 0:
            raise ConfigError("fusion input_dim must be positive", input_dim=input_dim)
        if ratio < 1:
            raise ConfigError("reduction ratio must be >= 1", ratio=ratio)
        if activation not in GATE_ACTIVATIONS:
            raise ConfigError("unknown gate activation", activation=activation, allowed=GATE_ACTIVATIONS)
        self.input_dim = input_dim
        self.ratio = ratio
        self.hidden_dim = math.ceil(input_dim / ratio)
        self.activation = activation
        self.delta1 = self.add_child("delta1", Linear(input_dim, self.hidden_dim, rng))
        self.delta2 = self.add_child("delta2", Linear(self.hidden_dim, input_dim, rng))
        self.output_dim = output_dim or input_dim
        self.projection = None
        if output_dim and output_dim != input_dim:
            self.projection = self.add_child("projection", Linear(input_dim, output_dim, rng))

    def squeeze(self, F: Tensor) -> Tensor:
        return T.global_avg_pool(F) if F.ndim == 4 else F

    def excite(self, z: Tensor) -> Tensor:
        h = self.delta1(z)
        if self.activation == 'relu':
            h = T.relu(h)
        return T.sigmoid(self.delta2(h))

    def forward(self, F: Tensor) -> FusionResult:
        return fuse(F, self)

def fuse(F: Tensor, block: FusionBlock) -> FusionResult:
    """Gate F channel-wise; F is a (D,) vector, an (N, D) batch or an NHWC map"""
    single = F.ndim == 1
    if single:
        F = T.reshape(F, (1, F.shape[0]))
    if F.shape[-1] != block.input_dim:
        raise DimensionError("fusion input width mismatch", expected=block.input_dim, got=F.shape)
    z = block.squeeze(F)
    s = block.excite(z)
    gated = T.channel_scale(F, s)
    output = block.projection(gated) if block.projection is not None and gated.ndim == 2 else gated
    if single:
        z, s = T.reshape(z, (block.input_dim,)), T.reshape(s, (block.input_dim,))
        gated = T.reshape(gated, (block.input_dim,))
        output = T.reshape(output, (output.shape[-1],))
    return FusionResult(z=z, s=s, gated=gated, output=output)

def fuse_modalities(F: Tensor, f_id: Optional[Tensor], f_race: Optional[Tensor],
                    block: FusionBlock) -> FusionResult:
    """Concatenate [F, f_id, f_race] (absent modalities skipped), gate, project, normalize"""
    parts = [p for p in (F, f_id, f_race) if p is not None]
    joined = concat_features(parts)
    if joined.shape[-1] != block.input_dim:
        raise DimensionError("modality widths do not sum to the fusion input width",
                             expected=block.input_dim, got=[p.shape[-1] for p in parts])
    result = fuse(joined, block)
    result.embedding = T.l2_normalize(result.output, axis=-1)
    return result

# ============= MODALITY FUSION HEAD =============
class ModalityFusion(Module):
    """Fuses the enabled modalities into one unit-norm embedding.

    adaptive: channel gate (fuse_modalities)
    manual:   each modality block scaled by a fixed weight
    concat:   plain concatenation
    All modes share the optional projection to output_dim.
    """

    def __init__(self, modality_dims: Dict[str, int], ratio: float, rng: np.random.Generator,
                 mode: str = 'adaptive', activation: str = 'relu', output_dim: Optional[int] = None,
                 manual_weights: Optional[Dict[str, float]] = None):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ConfigError("unknown fusion mode", mode=mode, allowed=FUSION_MODES)
        if 'face' not in modality_dims:
            raise ConfigError("the face modality is always required", modalities=sorted(modality_dims))
        self.mode = mode
        self.modalities = [m for m in MODALITY_ORDER if m in modality_dims]
        self.dims = [modality_dims[m] for m in self.modalities]
        self.input_dim = sum(self.dims)
        self.block = self.add_child("gate", FusionBlock(self.input_dim, ratio, rng, activation, output_dim))
        weights = manual_weights or {}
        channel_weights = np.concatenate([np.full(d, float(weights.get(m, 1.0)))
                                          for m, d in zip(self.modalities, self.dims)])
        self.channel_weights = Tensor(channel_weights)

    @property
    def output_dim(self) -> int:
        return self.block.output_dim

    def forward(self, features: Dict[str, Tensor]) -> FusionResult:
        missing = [m for m in self.modalities if m not in features]
        if missing:
            raise DimensionError("missing modality features", missing=missing)
        if self.mode == 'adaptive':
            f_id = features['deaging'] if 'deaging' in self.modalities else None
            f_race = features['race'] if 'race' in self.modalities else None
            return fuse_modalities(features['face'], f_id, f_race, self.block)
        joined = concat_features([features[m] for m in self.modalities])
        if self.mode == 'manual':
            joined = T.mul(joined, self.channel_weights)
        output = self.block.projection(joined) if self.block.projection is not None else joined
        return FusionResult(z=None, s=None, gated=joined, output=output,
                            embedding=T.l2_normalize(output, axis=-1))
