#!/usr/bin/env python3
"""
DCML DE-AGING v1.0.0
====================
Age-invariant features by residual factorization and decorrelated
adversarial training.

    f      = K(x)                backbone
    f_age  = R(f)                two FC-ReLU layers d2 -> d2
    f_id   = f - R(f)            so f_id + f_age == f exactly
    rho    = Pearson(C(f_id), C(f_age))   over the batch, C: d2 -> 1

An optional Adam warm-up trains K, R and the heads on identity + age-group CE.
Training then alternates a max phase (only C moves, ascending |rho|) with a
min phase (K, R and the classifier heads move, descending |rho| + identity CE
+ age-group CE + a variance-floor hinge). C is bit-identical across every min
phase.
====================
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

try:
    from .dcml_shared import FLAGS, ConfigError, DegenerateError, DimensionError, LabelError, NonFiniteError, RunLog
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from .dcml_nn import Backbone, BackboneConfig, FCStack, Linear, Module, Optimizer, OptimizerState
except ImportError:
    from dcml_shared import FLAGS, ConfigError, DegenerateError, DimensionError, LabelError, NonFiniteError, RunLog
    import dcml_tensor as T
    from dcml_tensor import Tensor
    from dcml_nn import Backbone, BackboneConfig, FCStack, Linear, Module, Optimizer, OptimizerState

logger = logging.getLogger(__name__)

CORRELATION_EPS = 1e-8

# ============= MODEL =============
@dataclass
class DeagingOutput:
    f: Tensor
    f_age: Tensor
    f_id: Tensor

class DeagingModel(Module):
    """Backbone K, factorization R, canonical mapping C, identity and age heads"""

    def __init__(self, backbone_cfg: BackboneConfig, num_identities: int, rng: np.random.Generator,
                 canonical_hidden: Optional[int] = None, age_groups: int = 4):
        super().__init__()
        if num_identities < 2:
            raise ConfigError("identity head needs at least 2 identities", num_identities=num_identities)
        if age_groups < 2:
            raise ConfigError("age head needs at least 2 groups", age_groups=age_groups)
        d = backbone_cfg.feature_dim
        hidden = canonical_hidden or max(d // 4, 8)
        self.feature_dim = d
        self.num_identities = num_identities
        self.age_groups = age_groups
        self.backbone = self.add_child("K", Backbone(backbone_cfg, rng))
        self.residual = self.add_child("R", FCStack([d, d, d], rng, final_relu=True))
        self.canonical = self.add_child("C", FCStack([d, hidden, hidden, 1], rng))
        self.id_head = self.add_child("id_head", Linear(d, num_identities, rng))
        self.age_head = self.add_child("age_head", Linear(d, age_groups, rng))

    @property
    def extractor_modules(self) -> List[Module]:
        """Everything the min phase updates"""
        return [self.backbone, self.residual, self.id_head, self.age_head]

    def forward(self, images: Tensor) -> DeagingOutput:
        f = self.backbone(images)
        f_age, f_id = factorize(f, self.residual)
        return DeagingOutput(f=f, f_age=f_age, f_id=f_id)

def factorize(f: Tensor, residual: Module) -> Tuple[Tensor, Tensor]:
    """(f_age, f_id) with f_age = R(f) and f_id = f - R(f)"""
    if f.shape[-1] != residual.dims[0]:
        raise DimensionError("factorization width mismatch", expected=residual.dims[0], got=f.shape)
    f_age = residual(f)
    return f_age, T.sub(f, f_age)

def encode_deaging(model: DeagingModel, images: Tensor) -> Tensor:
    """Age-invariant feature f_id; no tape is recorded"""
    with T.no_grad():
        return model(images).f_id

# ============= CORRELATION =============
def canonical_correlation(a: Tensor, b: Tensor, eps: float = CORRELATION_EPS) -> Tensor:
    """Differentiable Pearson correlation of two batches of scalars.

    Exact Cov / sqrt(Var * Var) whenever both variances exceed eps. A near-constant
    side gets eps added to its variance and raises the 'degenerate_variance' flag.
    """
    a = T.reshape(a, (a.size,)) if a.ndim != 1 else a
    b = T.reshape(b, (b.size,)) if b.ndim != 1 else b
    if a.size != b.size:
        raise DimensionError("correlation inputs differ in length", a=a.size, b=b.size)
    if a.size < 2:
        raise DimensionError("correlation needs at least 2 samples", n=a.size)
    a_c = T.sub(a, T.mean(a))
    b_c = T.sub(b, T.mean(b))
    cov = T.mean(T.mul(a_c, b_c))
    var_a, var_b = T.variance(a), T.variance(b)
    if var_a.item() <= eps or var_b.item() <= eps:
        FLAGS.raise_flag("degenerate_variance",
                         f"variances {var_a.item():.3e}, {var_b.item():.3e} below {eps:g}")
        var_a, var_b = T.add(var_a, eps), T.add(var_b, eps)
    return T.div(cov, T.sqrt(T.mul(var_a, var_b)))

# ============= LOSSES =============
@dataclass
class DeagingLosses:
    rho: Tensor
    deaging: Tensor         # |rho|
    identity: Tensor        # identity-head CE on f_id
    age: Optional[Tensor]   # age-group CE on f_age
    total: Tensor           # deaging + identity
    variances: Tuple[float, float] = (0.0, 0.0)   # Var C(f_id), Var C(f_age)
    spread: Optional[Tensor] = None               # hinge on variances under their floors

    def objective(self, age_weight: float = 1.0, spread_weight: float = 1.0) -> Tensor:
        """Min-phase objective"""
        out = self.total
        if self.age is not None and age_weight != 0:
            out = T.add(out, T.mul(self.age, age_weight))
        if self.spread is not None and spread_weight != 0:
            out = T.add(out, T.mul(self.spread, spread_weight))
        return out

    @property
    def degenerate(self) -> bool:
        return min(self.variances) <= CORRELATION_EPS

def _check_labels(labels: Sequence[int], classes: int, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError(f"{what} labels must be a flat sequence", shape=labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"{what} label out of range", classes=classes,
                         low=int(labels.min()), high=int(labels.max()))
    return labels

def _spread_penalty(variance: Tensor, floor: float) -> Tensor:
    """max(0, 1 - Var / floor): zero above the floor, 1 at total collapse"""
    return T.relu(T.add(T.neg(T.div(variance, floor)), 1.0))

def deaging_losses(model: DeagingModel, out: DeagingOutput, identity_labels: Sequence[int],
                   age_labels: Optional[Sequence[int]] = None,
                   spread_floors: Optional[Tuple[float, float]] = None) -> DeagingLosses:
    n = out.f.shape[0]
    if n < 2:
        raise DimensionError("de-aging losses need a batch of at least 2", n=n)
    ids = _check_labels(identity_labels, model.num_identities, "identity")
    if ids.size != n:
        raise DimensionError("identity labels do not match batch", batch=n, labels=ids.size)
    c_id, c_age = model.canonical(out.f_id), model.canonical(out.f_age)
    rho = canonical_correlation(c_id, c_age)
    deaging = T.abs_(rho)
    identity = T.cross_entropy(model.id_head(out.f_id), ids)
    age = None
    if age_labels is not None:
        ages = _check_labels(age_labels, model.age_groups, "age group")
        age = T.cross_entropy(model.age_head(out.f_age), ages)
    var_id, var_age = T.variance(c_id), T.variance(c_age)
    spread = None
    if spread_floors is not None:
        spread = T.add(_spread_penalty(var_id, spread_floors[0]), _spread_penalty(var_age, spread_floors[1]))
    return DeagingLosses(rho=rho, deaging=deaging, identity=identity, age=age,
                         total=T.add(deaging, identity), variances=(var_id.item(), var_age.item()),
                         spread=spread)

def age_group_labels(ages: Sequence[float], groups: int) -> np.ndarray:
    """Equal-width bins over [0, 1]"""
    ages = np.clip(np.asarray(ages, dtype=np.float64), 0.0, 1.0)
    return np.minimum((ages * groups).astype(np.int64), groups - 1)

# ============= ADVERSARIAL TRAINING =============
@dataclass
class AdversarialSchedule:
    rounds: int = 3
    max_steps: int = 20
    min_steps: int = 50
    batch_size: int = 64
    lr_schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.0005), (2, 0.001)])
    momentum: float = 0.9
    age_weight: float = 1.0
    seed: int = 0
    warmup_steps: int = 0           # Adam steps on identity + age CE before the first round
    warmup_rate: float = 0.001
    spread_ratio: float = 0.1       # min-phase variance floor, as a fraction of the phase-start variance
    spread_weight: float = 1.0

    def validate(self):
        if min(self.rounds, self.max_steps, self.min_steps, self.warmup_steps) < 0 or self.rounds == 0:
            raise ConfigError("adversarial schedule needs rounds >= 1 and non-negative step counts")
        if self.batch_size < 2:
            raise ConfigError("de-aging batch size must be >= 2", batch_size=self.batch_size)
        if not 0.0 <= self.spread_ratio < 1.0 or self.spread_weight < 0 or self.warmup_rate <= 0:
            raise ConfigError("spread ratio must lie in [0, 1), spread weight and warm-up rate must be positive",
                              spread_ratio=self.spread_ratio, spread_weight=self.spread_weight,
                              warmup_rate=self.warmup_rate)

def _accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=-1) == labels))

def measure_correlation(model: DeagingModel, images: np.ndarray) -> float:
    """|rho| on a fixed batch, no tape"""
    with T.no_grad():
        out = model(Tensor(images))
        rho = canonical_correlation(model.canonical(out.f_id), model.canonical(out.f_age))
    return abs(rho.item())

def canonical_variances(model: DeagingModel, images: np.ndarray) -> Tuple[float, float]:
    """(Var C(f_id), Var C(f_age)) on a fixed batch, no tape"""
    with T.no_grad():
        out = model(Tensor(images))
        return (T.variance(model.canonical(out.f_id)).item(),
                T.variance(model.canonical(out.f_age)).item())

def _warm_up_extractor(model: DeagingModel, images: np.ndarray, ids: np.ndarray, age_labels: np.ndarray,
                       schedule: AdversarialSchedule, rng: np.random.Generator, batch: int, log: RunLog):
    """Identity + age CE only, so f_id carries identity before the adversarial rounds start"""
    model.canonical.freeze()
    for m in model.extractor_modules:
        m.unfreeze()
    params = [p for m in model.extractor_modules for p in m.parameters()]
    opt = Optimizer(params, OptimizerState("adam", [(0, schedule.warmup_rate)]))
    for step in range(schedule.warmup_steps):
        idx = rng.choice(images.shape[0], size=batch, replace=False)
        out = model(Tensor(images[idx]))
        logits = model.id_head(out.f_id)
        identity = T.cross_entropy(logits, ids[idx])
        age = T.cross_entropy(model.age_head(out.f_age), age_labels[idx])
        loss = T.add(identity, T.mul(age, schedule.age_weight))
        _require_finite(loss, "warmup", -1, step)
        opt.zero_grad()
        T.backward(loss)
        opt.step(0)
        log.write(stage="deaging", phase="warmup", round=-1, step=step, L_id=identity.item(),
                  L_age=age.item(), id_acc=_accuracy(logits, ids[idx]))
    model.canonical.unfreeze()

def adversarial_train(model: DeagingModel, images: np.ndarray, identity_labels: Sequence[int],
                      ages: Sequence[float], schedule: AdversarialSchedule,
                      log: Optional[RunLog] = None) -> DeagingModel:
    """Alternate max-|rho| steps on C with min-(|rho| + CE) steps on K, R and heads.

    The min phase keeps both canonical outputs above a variance floor set at
    the start of the phase; if either still collapses below CORRELATION_EPS the
    run stops with DegenerateError instead of reporting rho ~ 0.
    """
    schedule.validate()
    log = log or RunLog(None)
    images = np.asarray(images)
    ids = _check_labels(identity_labels, model.num_identities, "identity")
    age_labels = age_group_labels(ages, model.age_groups)
    if images.shape[0] != ids.size or ids.size != age_labels.size:
        raise DimensionError("images, identities and ages are not aligned",
                             images=images.shape[0], ids=ids.size, ages=age_labels.size)
    rng = np.random.default_rng([schedule.seed, 2])
    batch = min(schedule.batch_size, images.shape[0])
    reference = images[rng.choice(images.shape[0], size=batch, replace=False)]

    if schedule.warmup_steps:
        _warm_up_extractor(model, images, ids, age_labels, schedule, rng, batch, log)
        last = log.last(stage="deaging", phase="warmup")
        if last is not None:
            logger.info(f"[DEAGING] warm-up: L_id {last['L_id']:.4f}, id_acc {last['id_acc']:.3f}")

    c_opt = Optimizer(model.canonical.parameters(),
                      OptimizerState("sgd", list(schedule.lr_schedule), momentum=schedule.momentum))
    extractor_params = [p for m in model.extractor_modules for p in m.parameters()]
    k_opt = Optimizer(extractor_params,
                      OptimizerState("sgd", list(schedule.lr_schedule), momentum=schedule.momentum))

    for round_index in range(schedule.rounds):
        # max phase: extractors frozen, ascend |rho| through C only
        for m in model.extractor_modules:
            m.freeze()
        model.canonical.unfreeze()
        for step in range(schedule.max_steps):
            idx = rng.choice(images.shape[0], size=batch, replace=False)
            try:
                with T.no_grad():
                    out = model(Tensor(images[idx]))
                rho = canonical_correlation(model.canonical(out.f_id), model.canonical(out.f_age))
                loss = T.neg(T.abs_(rho))
                _require_finite(loss, "max", round_index, step)
                c_opt.zero_grad()
                T.backward(loss)
                c_opt.step(round_index)
            except NonFiniteError as e:
                raise NonFiniteError("de-aging training diverged", phase="max", round=round_index,
                                     step=step, cause=e.message) from e
            log.write(stage="deaging", phase="max", round=round_index, step=step, rho=abs(rho.item()))

        # min phase: C frozen, descend |rho| + identity CE + age CE
        model.canonical.freeze()
        for m in model.extractor_modules:
            m.unfreeze()
        start = canonical_variances(model, reference)
        if min(start) <= CORRELATION_EPS:
            raise DegenerateError("canonical outputs have no spread before the min phase",
                                  round=round_index, variances=start)
        floors = (schedule.spread_ratio * start[0], schedule.spread_ratio * start[1])
        for step in range(schedule.min_steps):
            idx = rng.choice(images.shape[0], size=batch, replace=False)
            try:
                out = model(Tensor(images[idx]))
                losses = deaging_losses(model, out, ids[idx], age_labels[idx],
                                        spread_floors=floors if schedule.spread_ratio > 0 else None)
                if losses.degenerate:
                    T.reset_tape()
                    raise DegenerateError("canonical outputs collapsed during the min phase",
                                          round=round_index, step=step, variances=losses.variances,
                                          floors=floors, L_id=losses.identity.item())
                objective = losses.objective(schedule.age_weight, schedule.spread_weight)
                _require_finite(objective, "min", round_index, step)
                with T.no_grad():
                    acc = _accuracy(model.id_head(out.f_id), ids[idx])
                k_opt.zero_grad()
                T.backward(objective)
                k_opt.step(round_index)
            except NonFiniteError as e:
                raise NonFiniteError("de-aging training diverged", phase="min", round=round_index,
                                     step=step, cause=e.message) from e
            log.write(stage="deaging", phase="min", round=round_index, step=step,
                      rho=losses.deaging.item(), L_id=losses.identity.item(),
                      L_age=losses.age.item() if losses.age is not None else None, id_acc=acc,
                      var_id=losses.variances[0], var_age=losses.variances[1])
        last = log.last(stage="deaging", round=round_index)
        if last is not None:
            logger.info(f"[DEAGING] round {round_index} ({last['phase']}): |rho| {last['rho']:.4f}")

    model.canonical.unfreeze()
    return model

def _require_finite(loss: Tensor, phase: str, round_index: int, step: int):
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("non-finite de-aging loss", phase=phase, round=round_index, step=step)
