#!/usr/bin/env python3
"""
DCML RACE v1.0.0
================
Race feature extractor: backbone G -> d3 feature, linear head -> 3 classes.
Trained briefly with Adam, then frozen for the rest of the pipeline.
================
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

try:
    from .dcml_shared import ConfigError, DimensionError, LabelError, NonFiniteError, RunLog
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from .dcml_nn import Backbone, BackboneConfig, Linear, Module, Optimizer, OptimizerState
except ImportError:
    from dcml_shared import ConfigError, DimensionError, LabelError, NonFiniteError, RunLog
    import dcml_tensor as T
    from dcml_tensor import Tensor
    from dcml_nn import Backbone, BackboneConfig, Linear, Module, Optimizer, OptimizerState

logger = logging.getLogger(__name__)

NUM_RACE_CLASSES = 3

class RaceEncoder(Module):
    def __init__(self, backbone_cfg: BackboneConfig, rng: np.random.Generator,
                 num_classes: int = NUM_RACE_CLASSES):
        super().__init__()
        self.image_size = backbone_cfg.input_size
        self.feature_dim = backbone_cfg.feature_dim
        self.num_classes = num_classes
        self.backbone = self.add_child("G", Backbone(backbone_cfg, rng))
        self.head = self.add_child("head", Linear(self.feature_dim, num_classes, rng))
        self.frozen = False

    def features(self, images: Tensor) -> Tensor:
        shape = images.shape[-3:-1]
        if images.ndim not in (3, 4) or shape != (self.image_size, self.image_size):
            raise DimensionError("race encoder image size mismatch",
                                 expected=(self.image_size, self.image_size), got=images.shape)
        return self.backbone(images)

    def forward(self, images: Tensor) -> Tuple[Tensor, Tensor]:
        """(features, class logits)"""
        f = self.features(images)
        return f, self.head(f)

    def freeze(self):
        super().freeze()
        self.frozen = True

def encode_race(encoder: RaceEncoder, images: Tensor) -> Tensor:
    with T.no_grad():
        return encoder.features(images)

def race_loss(logits: Tensor, labels: Sequence[int], num_classes: int = NUM_RACE_CLASSES) -> Tensor:
    """Mean softmax cross-entropy over the batch"""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[1] != num_classes:
        raise DimensionError("race logits must be (M, classes)", classes=num_classes, got=logits.shape)
    if labels.size != logits.shape[0] or labels.size == 0:
        raise DimensionError("race labels do not match the batch", batch=logits.shape[0], labels=labels.size)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelError("race label out of range", classes=num_classes,
                         low=int(labels.min()), high=int(labels.max()))
    return T.cross_entropy(logits, labels)

# ============= TRAINING =============
@dataclass
class RaceSchedule:
    epochs: int = 4
    batch_size: int = 32
    rate: float = 0.001
    decay_epoch: int = 2           # rate / 10 from this epoch on
    seed: int = 0

    def lr_schedule(self) -> List[Tuple[int, float]]:
        return [(0, self.rate), (self.decay_epoch, self.rate / 10)]

def train_race(encoder: RaceEncoder, images: np.ndarray, labels: Sequence[int],
               schedule: RaceSchedule, log: Optional[RunLog] = None) -> RaceEncoder:
    """Adam over G and the head; epoch records carry mean loss and accuracy"""
    if encoder.frozen:
        raise ConfigError("race encoder is frozen")
    if schedule.epochs < 1 or schedule.batch_size < 1:
        raise ConfigError("race schedule needs epochs >= 1 and batch_size >= 1")
    log = log or RunLog(None)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != images.shape[0]:
        raise DimensionError("race images and labels are not aligned",
                             images=images.shape[0], labels=labels.size)
    opt = Optimizer(encoder.parameters(), OptimizerState("adam", schedule.lr_schedule()))
    rng = np.random.default_rng([schedule.seed, 1])
    for epoch in range(schedule.epochs):
        order = rng.permutation(labels.size)
        losses, correct = [], 0
        for start in range(0, labels.size, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            _, logits = encoder(Tensor(images[idx]))
            loss = race_loss(logits, labels[idx], encoder.num_classes)
            if not np.isfinite(loss.item()):
                raise NonFiniteError("non-finite race loss", epoch=epoch, step=start // schedule.batch_size)
            opt.zero_grad()
            T.backward(loss)
            opt.step(epoch)
            losses.append(loss.item())
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        record = log.write(stage="race", epoch=epoch, loss=float(np.mean(losses)),
                           acc=correct / labels.size, lr=opt.state.rate_at(epoch))
        logger.info(f"[RACE] epoch {epoch}: loss {record['loss']:.4f} acc {record['acc']:.3f}")
    return encoder
