#!/usr/bin/env python3
"""
DCML GRADCHECK v1.0.0
=====================
Central finite-difference checks of the autodiff engine in float64.

Every registered primitive gets a case; non-scalar outputs are reduced by a
fixed random projection so the whole Jacobian is exercised. Composite items
cover the channel gate and every training loss (InfoNCE, |rho|, identity CE,
de-aging total, race CE). A kind with no case fails the suite.

relative error = max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)
=====================
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

try:
    from .dcml_shared import DCMLError
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
    from .dcml_nn import BackboneConfig, Linear
    from .dcml_fusion import FusionBlock
    from .dcml_contrastive import MemoryBank, build_logits, info_nce
    from .dcml_deaging import DeagingModel, canonical_correlation, deaging_losses, factorize, DeagingOutput
    from .dcml_race import race_loss
except ImportError:
    from dcml_shared import DCMLError
    import dcml_tensor as T
    from dcml_tensor import Tensor
    from dcml_nn import BackboneConfig, Linear
    from dcml_fusion import FusionBlock
    from dcml_contrastive import MemoryBank, build_logits, info_nce
    from dcml_deaging import DeagingModel, canonical_correlation, deaging_losses, factorize, DeagingOutput
    from dcml_race import race_loss

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

# ============= REPORT =============
@dataclass
class GradcheckItem:
    name: str
    max_rel_error: float
    passed: bool
    checked: int = 0              # scalar entries perturbed
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'max_rel_error': self.max_rel_error, 'passed': self.passed,
                'checked': self.checked, 'error': self.error}

@dataclass
class GradcheckReport:
    seed: int
    tolerance: float
    items: List[GradcheckItem] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.items) and all(i.passed for i in self.items)

    @property
    def failures(self) -> List[str]:
        return [i.name for i in self.items if not i.passed]

    def item(self, name: str) -> GradcheckItem:
        for i in self.items:
            if i.name == name:
                return i
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {'seed': self.seed, 'tolerance': self.tolerance, 'passed': self.passed,
                'failures': self.failures, 'items': [i.to_dict() for i in self.items]}

    def to_text(self) -> str:
        width = max(len(i.name) for i in self.items) if self.items else 4
        lines = [f"{'item'.ljust(width)}  max_rel_error  status"]
        for i in self.items:
            status = 'ok' if i.passed else f"FAIL{': ' + i.error if i.error else ''}"
            lines.append(f"{i.name.ljust(width)}  {i.max_rel_error:13.3e}  {status}")
        lines.append(f"{'all'.ljust(width)}  {'':13}  {'PASS' if self.passed else 'FAIL'}")
        return '\n'.join(lines)

# ============= CORE CHECK =============
def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale

def numeric_gradient(fn: Callable[[], Tensor], leaf: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of fn() w.r.t. every entry of leaf.data (perturbed in place)"""
    flat = leaf.data.reshape(-1)
    grad = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            grad[i] = (plus - minus) / (2 * h)
    return grad.reshape(leaf.shape)

def check_gradients(name: str, fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    h: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> GradcheckItem:
    """Compare tape gradients of the scalar fn() against finite differences for all leaves"""
    try:
        for leaf in leaves:
            leaf.requires_grad = True
            leaf.grad = None
        T.reset_tape()
        out = fn()
        if out.size != 1:
            raise DCMLError("gradcheck function must return a scalar", shape=out.shape)
        T.backward(out)
        worst, checked = 0.0, 0
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = numeric_gradient(fn, leaf, h)
            worst = max(worst, relative_error(np.asarray(analytic), numeric))
            checked += leaf.size
        return GradcheckItem(name, worst, worst < tolerance, checked)
    except Exception as e:
        T.reset_tape()
        logger.debug(f"[GRADCHECK] {name} raised {e!r}")
        return GradcheckItem(name, float('inf'), False, 0, error=f"{type(e).__name__}: {e}")

# ============= CASES =============
def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)

def _distinct(rng: np.random.Generator, shape, spacing: float = 0.05) -> np.ndarray:
    """Values with pairwise gaps much larger than the step, so max is stable"""
    count = int(np.prod(shape))
    return (rng.permutation(count) * spacing - count * spacing / 2).reshape(shape)

def _projected(out: Tensor, rng_seed: int) -> Tensor:
    weights = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.sum_(T.mul(out, Tensor(weights)))

def primitive_cases(rng: np.random.Generator) -> Dict[str, Callable[[], List]]:
    """kind -> list of (label, fn, leaves) builders"""
    def leaf(array):
        return Tensor(array, requires_grad=True)

    def unary(kind_fn, x):
        return lambda: [(None, lambda: _projected(kind_fn(x), 1), [x])]

    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    cases: Dict[str, Callable[[], List]] = {
        'matmul': lambda: [(None, lambda: _projected(T.matmul(a, b), 2), [a, b])],
        'relu': unary(T.relu, leaf(_away_from_zero(rng, (3, 5)))),
        'abs': unary(T.abs_, leaf(_away_from_zero(rng, (3, 5)))),
        'sigmoid': unary(T.sigmoid, leaf(rng.standard_normal((3, 5)) * 3)),
        'softmax': unary(lambda x: T.softmax(x, axis=-1), leaf(rng.standard_normal((3, 5)))),
        'log_softmax': unary(lambda x: T.log_softmax(x, axis=-1), leaf(rng.standard_normal((3, 5)))),
        'neg': unary(T.neg, leaf(rng.standard_normal((2, 3)))),
        'sqrt': unary(T.sqrt, leaf(rng.uniform(0.5, 2.0, (2, 3)))),
        'log': unary(T.log, leaf(rng.uniform(0.5, 2.0, (2, 3)))),
        'exp': unary(T.exp, leaf(rng.standard_normal((2, 3)))),
        'transpose': unary(T.transpose, leaf(rng.standard_normal((2, 3)))),
        'reshape': unary(lambda x: T.reshape(x, (3, 2)), leaf(rng.standard_normal((2, 3)))),
        'slice': unary(lambda x: T.slice_(x, (slice(1, 3), slice(None, 2))), leaf(rng.standard_normal((4, 3)))),
        'pick': unary(lambda x: T.pick(x, np.array([2, 0, 1])), leaf(rng.standard_normal((3, 4)))),
        'global_avg_pool': unary(T.global_avg_pool, leaf(rng.standard_normal((2, 3, 3, 2)))),
        'l2_normalize': unary(lambda x: T.l2_normalize(x, axis=-1), leaf(rng.standard_normal((3, 4)))),
        'sum': unary(lambda x: T.sum_(x, axis=0), leaf(rng.standard_normal((3, 4)))),
        'mean': unary(lambda x: T.mean(x, axis=1, keepdims=True), leaf(rng.standard_normal((3, 4)))),
        'variance': unary(lambda x: T.variance(x, axis=0), leaf(rng.standard_normal((5, 3)))),
        'max_pool': unary(T.max_pool, leaf(_distinct(rng, (1, 6, 6, 2)))),
    }

    def binary(kind_fn, x, y, seed):
        return lambda: [(None, lambda: _projected(kind_fn(x, y), seed), [x, y])]

    cases['add'] = binary(T.add, leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4,))), 3)
    cases['sub'] = binary(T.sub, leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((3, 1))), 4)
    cases['mul'] = binary(T.mul, leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4,))), 5)
    cases['div'] = binary(T.div, leaf(rng.standard_normal((3, 4))), leaf(rng.uniform(0.5, 2.0, (3, 4))), 6)
    cases['channel_scale'] = binary(T.channel_scale, leaf(rng.standard_normal((2, 3, 3, 4))),
                                    leaf(rng.uniform(0.1, 1.0, (2, 4))), 7)
    p1, p2 = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((2, 2)))
    cases['concat'] = lambda: [(None, lambda: _projected(T.concat([p1, p2], axis=1), 8), [p1, p2])]

    def conv_cases():
        out = []
        for k, stride, bias in ((1, 1, False), (3, 1, True), (3, 2, True), (7, 1, False)):
            x = leaf(rng.standard_normal((1, 8, 8, 2)))
            w = leaf(rng.standard_normal((k, k, 2, 3)) * 0.3)
            leaves = [x, w]
            bvec = None
            if bias:
                bvec = leaf(rng.standard_normal(3))
                leaves.append(bvec)
            fn = (lambda x=x, w=w, bvec=bvec, k=k, stride=stride:
                  _projected(T.conv2d(x, w, bvec, stride=stride, padding=k // 2), 9 + k))
            out.append((f"k{k}s{stride}", fn, leaves))
        return out
    cases['conv2d'] = conv_cases
    return cases

def composite_cases(rng: np.random.Generator) -> List:
    """(name, fn, leaves) for the gate and every training loss"""
    out = []

    block = FusionBlock(6, 2, rng)
    F = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    out.append(("fusion_gate", lambda: _projected(block(F).output, 20), [F] + block.parameters()))
    block_map = FusionBlock(4, 2, rng)
    Fm = Tensor(rng.standard_normal((2, 3, 3, 4)), requires_grad=True)
    out.append(("fusion_gate_nhwc", lambda: _projected(block_map(Fm).output, 21), [Fm] + block_map.parameters()))

    # InfoNCE through normalization, positive column and bank negatives
    bank = MemoryBank(7, 5)
    negatives = rng.standard_normal((7, 5))
    bank.enqueue(negatives / np.linalg.norm(negatives, axis=1, keepdims=True))
    q_raw = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    k_raw = rng.standard_normal((3, 5))
    k_pos = Tensor(k_raw / np.linalg.norm(k_raw, axis=1, keepdims=True))

    def nce():
        logits, labels = build_logits(T.l2_normalize(q_raw, axis=-1), k_pos, bank, 0.07)
        return info_nce(logits, labels)
    out.append(("loss_infonce", nce, [q_raw]))

    # de-aging: |rho|, identity CE and their sum, through R, C and the head
    cfg = BackboneConfig(stem_channels=2, stage_block_counts=(1, 1, 1), stage_bottleneck=(2, 2, 2),
                         stage_channels=(2, 2, 2), feature_dim=6, input_size=8)
    model = DeagingModel(cfg, num_identities=3, rng=rng, canonical_hidden=4)
    f = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
    ids = np.array([0, 1, 2, 0, 1, 2])

    def losses(spread_floors=None):
        f_age, f_id = factorize(f, model.residual)
        return deaging_losses(model, DeagingOutput(f=f, f_age=f_age, f_id=f_id), ids, spread_floors=spread_floors)

    head_params = model.residual.parameters() + model.canonical.parameters()
    out.append(("loss_deaging_rho", lambda: losses().deaging, [f] + head_params))
    out.append(("loss_identity", lambda: losses().identity, [f] + model.id_head.parameters()))
    out.append(("loss_deaging_total", lambda: losses().total,
                [f] + head_params + model.id_head.parameters()))
    with T.no_grad():
        floors = tuple(4.0 * v for v in losses().variances)   # both hinges active
    out.append(("loss_deaging_spread", lambda: losses(floors).spread, [f] + head_params))
    a = Tensor(rng.standard_normal(6), requires_grad=True)
    c = Tensor(rng.standard_normal(6), requires_grad=True)
    out.append(("pearson_rho", lambda: canonical_correlation(a, c), [a, c]))

    head = Linear(4, 3, rng)
    feats = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    labels = np.array([0, 2, 1, 2])
    out.append(("loss_race", lambda: race_loss(head(feats), labels), [feats] + head.parameters()))
    return out

# ============= SUITE =============
def gradcheck_suite(seed: int = 0, h: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> GradcheckReport:
    """Every primitive plus gate and losses, in float64; failures are entries, never exceptions"""
    report = GradcheckReport(seed=seed, tolerance=tolerance)
    with T.precision('float64'):
        rng = np.random.default_rng(seed)
        cases = primitive_cases(rng)
        for kind in sorted(T.PRIMITIVES):
            builder = cases.get(kind)
            if builder is None:
                report.items.append(GradcheckItem(kind, float('inf'), False, error="no gradcheck case"))
                continue
            for label, fn, leaves in builder():
                name = f"{kind}[{label}]" if label else kind
                report.items.append(check_gradients(name, fn, leaves, h, tolerance))
        for name, fn, leaves in composite_cases(rng):
            report.items.append(check_gradients(name, fn, leaves, h, tolerance))
    failed = report.failures
    if failed:
        logger.warning(f"[GRADCHECK] {len(failed)} item(s) failed: {', '.join(failed)}")
    else:
        logger.info(f"[GRADCHECK] all {len(report.items)} items passed")
    return report
