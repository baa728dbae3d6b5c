#!/usr/bin/env python3
"""
DCML CONTRASTIVE v1.0.0
=======================
Momentum-contrast engine for parent/child pairs.

  query side  theta_q: patch backbone -> patch gate (r1) -> modality fusion (r2) -> d
  key side    theta_t: same shapes, updated only by theta_t <- m*theta_t + (1-m)*theta_q
  bank        FIFO of unit-norm key embeddings, capacity Kb, newest at the head

Per training step: q = f_q(parent), k+ = f_t(child) (no tape), logits row
[q.k+, q.n_1 .. q.n_Kb] / tau with the positive in column 0, InfoNCE, SGD on
theta_q, momentum update of theta_t, enqueue k+. Bank entries from the query's
own family and stale copies of a re-enqueued child are masked out of the
logits. The race and de-aging features are produced by frozen extractors and
shared by both sides.
=======================
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .dcml_shared import FLAGS, ConfigError, DimensionError, NonFiniteError, WarmupError
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from .dcml_nn import (Backbone, BackboneConfig, Module, Optimizer, OptimizerState,
                          PatchGeometry, encode_patches, extract_patches)
    from .dcml_fusion import FusionBlock, ModalityFusion, FusionResult
except ImportError:
    from dcml_shared import FLAGS, ConfigError, DimensionError, NonFiniteError, WarmupError
    import dcml_tensor as T
    from dcml_tensor import Tensor
    from dcml_nn import (Backbone, BackboneConfig, Module, Optimizer, OptimizerState,
                         PatchGeometry, encode_patches, extract_patches)
    from dcml_fusion import FusionBlock, ModalityFusion, FusionResult

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
UNIT_NORM_TOL = 1e-5

# ============= SIMILARITY =============
def cosine_similarity(u: Tensor, v: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """u.v / (|u| |v|); a zero vector is stabilized by eps and flagged"""
    u, v = T.as_tensor(u), T.as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError("cosine_similarity needs two vectors of equal length", u=u.shape, v=v.shape)
    dot = T.sum_(T.mul(u, v))
    norms = T.mul(T.sqrt(T.sum_(T.mul(u, u))), T.sqrt(T.sum_(T.mul(v, v))))
    if norms.item() < eps:
        FLAGS.raise_flag("cosine_zero_vector", "zero vector in cosine similarity")
        norms = T.add(norms, eps)
    return T.div(dot, norms)

# ============= MOMENTUM UPDATE =============
ParamSource = Union[Module, Sequence[Tensor]]

def _params(source: ParamSource) -> List[Tensor]:
    return source.parameters() if isinstance(source, Module) else list(source)

def momentum_update(target: ParamSource, query: ParamSource, m: float):
    """theta_t <- m * theta_t + (1 - m) * theta_q in place; theta_q is untouched"""
    if not 0.0 <= m <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]", m=m)
    t_params, q_params = _params(target), _params(query)
    if len(t_params) != len(q_params):
        raise DimensionError("parameter sets are not aligned", target=len(t_params), query=len(q_params))
    for i, (t, q) in enumerate(zip(t_params, q_params)):
        if t.shape != q.shape:
            raise DimensionError("parameter shape mismatch", index=i, target=t.shape, query=q.shape)
    for t, q in zip(t_params, q_params):
        t.data = (m * t.data + (1.0 - m) * q.data).astype(t.dtype)
    return target

# ============= MEMORY BANK =============
class MemoryBank:
    """Fixed-capacity FIFO ring buffer of unit-norm embeddings.

    Each entry may carry the dataset index and family id it was computed from
    (-1 when unknown), so a query can skip its own family and stale copies of
    a sample that was enqueued more than once.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ConfigError("bank capacity and dim must be positive", capacity=capacity, dim=dim)
        self.capacity = capacity
        self.dim = dim
        self._data = np.zeros((capacity, dim))
        self._stamps = np.zeros(capacity, dtype=np.int64)
        self._samples = np.full(capacity, -1, dtype=np.int64)
        self._families = np.full(capacity, -1, dtype=np.int64)
        self._next = 0
        self._size = 0
        self.fill_count = 0          # total entries ever enqueued

    def __len__(self) -> int:
        return self._size

    @property
    def is_full(self) -> bool:
        return self._size == self.capacity

    def _order(self) -> np.ndarray:
        """Slot indices from head (newest) to tail (oldest)"""
        return (self._next - 1 - np.arange(self._size)) % self.capacity

    def embeddings(self) -> np.ndarray:
        return self._data[self._order()].copy()

    def timestamps(self) -> np.ndarray:
        return self._stamps[self._order()].copy()

    def sample_ids(self) -> np.ndarray:
        return self._samples[self._order()].copy()

    def family_ids(self) -> np.ndarray:
        return self._families[self._order()].copy()

    def enqueue(self, batch: np.ndarray, sample_ids: Optional[Sequence[int]] = None,
                family_ids: Optional[Sequence[int]] = None) -> 'MemoryBank':
        batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise DimensionError("bank embedding dim mismatch", expected=self.dim, got=batch.shape)
        norms = np.linalg.norm(batch, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise DimensionError("bank entries must be unit-norm", worst=float(np.max(np.abs(norms - 1.0))))
        samples = self._ids(sample_ids, batch.shape[0], "sample_ids")
        families = self._ids(family_ids, batch.shape[0], "family_ids")
        for row, sample, family in zip(batch, samples, families):
            self.fill_count += 1
            self._data[self._next] = row
            self._stamps[self._next] = self.fill_count
            self._samples[self._next] = sample
            self._families[self._next] = family
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        return self

    @staticmethod
    def _ids(ids: Optional[Sequence[int]], n: int, name: str) -> np.ndarray:
        if ids is None:
            return np.full(n, -1, dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size != n:
            raise DimensionError(f"one entry of {name} per embedding required", expected=n, got=ids.size)
        return ids

    def excluded(self, query_families: Optional[Sequence[int]] = None) -> np.ndarray:
        """(N, len) mask of entries a query must not treat as negatives.

        Older copies of a sample id are always excluded (only the newest copy
        counts); with query_families, entries of the query's own family are too.
        """
        samples = self.sample_ids()
        stale = np.zeros(self._size, dtype=bool)
        known = samples >= 0
        if known.any():
            _, first = np.unique(samples[known], return_index=True)
            keep = np.zeros(int(known.sum()), dtype=bool)
            keep[first] = True
            stale[np.flatnonzero(known)[~keep]] = True
        if query_families is None:
            return stale[None, :]
        query_families = np.asarray(query_families, dtype=np.int64).reshape(-1)
        families = self.family_ids()
        same = (families[None, :] == query_families[:, None]) & (families[None, :] >= 0)
        return same | stale[None, :]

    def effective_size(self, query_families: Optional[Sequence[int]] = None) -> np.ndarray:
        """Negatives each query actually competes against"""
        return self._size - self.excluded(query_families).sum(axis=1)

def bank_enqueue(bank: MemoryBank, batch: np.ndarray, sample_ids: Optional[Sequence[int]] = None,
                 family_ids: Optional[Sequence[int]] = None) -> MemoryBank:
    return bank.enqueue(batch, sample_ids, family_ids)

# ============= LOGITS / LOSS =============
MASKED_LOGIT = -1e4          # exp() underflows to exactly 0 at float32 and float64

def build_logits(q_emb: Tensor, positive_key: Tensor, bank: MemoryBank, tau: float,
                 query_families: Optional[Sequence[int]] = None) -> Tuple[Tensor, np.ndarray]:
    """Rows [cos(q, k+), cos(q, n_1), ..., cos(q, n_Kb)] / tau with label 0.

    Inputs are unit-norm, so cosines are dot products. Bank entries never carry
    gradient; the positive key is used as given. Columns excluded by
    bank.excluded() are pushed to MASKED_LOGIT so they get zero softmax weight.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive", tau=tau)
    if len(bank) == 0:
        raise WarmupError("memory bank is empty; fill it before computing the loss")
    single = q_emb.ndim == 1
    q = T.reshape(q_emb, (1, q_emb.shape[0])) if single else q_emb
    k = T.as_tensor(positive_key)
    k = T.reshape(k, (1, k.shape[0])) if k.ndim == 1 else k
    if q.shape != k.shape or q.shape[1] != bank.dim:
        raise DimensionError("query, key and bank widths differ", query=q.shape, key=k.shape, bank=bank.dim)
    if query_families is not None and len(query_families) != q.shape[0]:
        raise DimensionError("one family id per query required", queries=q.shape[0], got=len(query_families))
    negatives = Tensor(bank.embeddings().T.astype(q.dtype))
    positive = T.sum_(T.mul(q, k), axis=1, keepdims=True)
    logits = T.div(T.concat([positive, T.matmul(q, negatives)], axis=1), tau)
    excluded = np.broadcast_to(bank.excluded(query_families), (q.shape[0], len(bank)))
    if excluded.any():
        shift = np.zeros(logits.shape)
        shift[:, 1:][excluded] = MASKED_LOGIT
        logits = T.add(logits, Tensor(shift.astype(q.dtype)))
    return logits, np.zeros(q.shape[0], dtype=np.int64)

def info_nce(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean of -log softmax(row)[label]; log_softmax subtracts the row max"""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError("InfoNCE needs (N, 1 + Kb) logits with Kb >= 1", got=logits.shape)
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite logits")
    return T.cross_entropy(logits, np.asarray(labels, dtype=np.int64))

# ============= ENCODER =============
@dataclass
class EncoderConfig:
    patch_backbone: BackboneConfig = field(default_factory=BackboneConfig)
    geometry: PatchGeometry = field(default_factory=PatchGeometry)
    patch_ratio: float = 4.0              # r1
    modality_ratio: float = 2.0           # r2
    modality_dims: Dict[str, int] = field(default_factory=dict)   # extra modalities besides face
    output_dim: int = 128                 # d
    fusion_mode: str = 'adaptive'
    gate_activation: str = 'relu'
    manual_weights: Optional[Dict[str, float]] = None

    @property
    def face_dim(self) -> int:
        return 4 * self.patch_backbone.feature_dim

class DCMLEncoder(Module):
    """Image (+ frozen modality features) -> unit-norm embedding"""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        cfg.geometry.validate()
        dims = dict(cfg.modality_dims)
        dims['face'] = cfg.face_dim
        self.backbone = self.add_child("patch_backbone", Backbone(cfg.patch_backbone, rng))
        self.patch_gate = self.add_child("patch_gate", FusionBlock(cfg.face_dim, cfg.patch_ratio, rng,
                                                                   cfg.gate_activation))
        self.fusion = self.add_child("fusion", ModalityFusion(dims, cfg.modality_ratio, rng, cfg.fusion_mode,
                                                              cfg.gate_activation, cfg.output_dim,
                                                              cfg.manual_weights))

    @property
    def embedding_dim(self) -> int:
        return self.fusion.output_dim

    def face_features(self, images: Tensor) -> Tensor:
        patches = extract_patches(images, self.cfg.geometry)
        F = T.concat(encode_patches(patches, self.backbone), axis=-1)
        return self.patch_gate(F).output

    def forward(self, images: Tensor, modality_features: Optional[Dict[str, Tensor]] = None) -> FusionResult:
        features = dict(modality_features or {})
        features['face'] = self.face_features(images)
        return self.fusion(features)

    def embed(self, images: Tensor, modality_features: Optional[Dict[str, Tensor]] = None) -> Tensor:
        return self.forward(images, modality_features).embedding

# ============= STATE =============
@dataclass
class ContrastiveState:
    query: DCMLEncoder
    key: DCMLEncoder
    bank: MemoryBank
    optimizer: Optimizer
    m: float = 0.999
    tau: float = 0.07
    steps: int = 0

def build_contrastive_state(cfg: EncoderConfig, seed: int, bank_size: int, m: float, tau: float,
                            lr_schedule: Iterable[Tuple[int, float]], momentum: float = 0.9) -> ContrastiveState:
    """Key encoder starts as an exact copy of the query encoder and never receives gradients"""
    if not 0.0 <= m <= 1.0:
        raise ConfigError("momentum coefficient must lie in [0, 1]", m=m)
    if tau <= 0:
        raise ConfigError("temperature must be positive", tau=tau)
    query = DCMLEncoder(cfg, np.random.default_rng([seed, 3]))
    key = DCMLEncoder(cfg, np.random.default_rng([seed, 3]))
    key.load_state_dict(query.state_dict())
    key.freeze()
    bank = MemoryBank(bank_size, query.embedding_dim)
    opt = Optimizer(query.parameters(), OptimizerState("sgd", list(lr_schedule), momentum=momentum))
    return ContrastiveState(query=query, key=key, bank=bank, optimizer=opt, m=m, tau=tau)

def key_embeddings(state: ContrastiveState, images: np.ndarray,
                   modality_features: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
    with T.no_grad():
        feats = {k: Tensor(v) for k, v in (modality_features or {}).items()}
        return state.key.embed(Tensor(images), feats).data.copy()

def warm_up_bank(state: ContrastiveState, batches: Iterable[tuple]) -> int:
    """Pre-fill the bank with key embeddings until full or out of data.

    Each batch is (images, features) or (images, features, sample_ids, family_ids).
    """
    added = 0
    for batch in batches:
        if state.bank.is_full:
            break
        images, feats = batch[0], batch[1]
        room = state.bank.capacity - len(state.bank)
        samples = None if len(batch) < 3 or batch[2] is None else list(batch[2])[:room]
        families = None if len(batch) < 4 or batch[3] is None else list(batch[3])[:room]
        emb = key_embeddings(state, images[:room], {k: v[:room] for k, v in feats.items()})
        state.bank.enqueue(emb, samples, families)
        added += emb.shape[0]
    logger.info(f"[BANK] warm-up enqueued {added} embeddings ({len(state.bank)}/{state.bank.capacity})")
    return added

def contrastive_step(state: ContrastiveState, parent_images: np.ndarray, child_images: np.ndarray,
                     parent_features: Optional[Dict[str, np.ndarray]] = None,
                     child_features: Optional[Dict[str, np.ndarray]] = None, epoch: int = 0,
                     child_ids: Optional[Sequence[int]] = None,
                     family_ids: Optional[Sequence[int]] = None) -> float:
    """One query/key step; returns the InfoNCE value before the update.

    family_ids (one per pair) keep same-family bank entries out of the negatives;
    child_ids tag the enqueued keys so later copies replace earlier ones.
    """
    k_pos = key_embeddings(state, child_images, child_features)
    q = state.query.embed(Tensor(parent_images), {k: Tensor(v) for k, v in (parent_features or {}).items()})
    logits, labels = build_logits(q, Tensor(k_pos), state.bank, state.tau, family_ids)
    loss = info_nce(logits, labels)
    if not np.isfinite(loss.item()):
        raise NonFiniteError("non-finite InfoNCE loss", step=state.steps, epoch=epoch)
    state.optimizer.zero_grad()
    T.backward(loss)
    state.optimizer.step(epoch)
    momentum_update(state.key, state.query, state.m)
    state.bank.enqueue(k_pos, child_ids, family_ids)
    state.steps += 1
    return loss.item()
