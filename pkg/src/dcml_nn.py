#!/usr/bin/env python3
"""
DCML NN BLOCKS v1.0.0
=====================
Parameter containers, the bottleneck-ResNet backbone family, FC stacks,
four-patch extraction and the two optimizers (SGD-momentum, Adam).

Backbone layout (spatial sizes for a 48x48 input):
  stem    7x7 conv stride 1 + ReLU    48x48
          3x3 max-pool stride 2       24x24
  stage1  bottleneck blocks           24x24
  stage2  bottleneck blocks, stride 2 12x12
  stage3  bottleneck blocks, stride 2  6x6
  head    global average pool + fc    feature_dim
No batch normalization anywhere.
=====================
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

try:
    from .dcml_shared import ConfigError, DimensionError, GeometryError, NonFiniteError
    from . import dcml_tensor as T
    from .dcml_tensor import Tensor
except ImportError:
    from dcml_shared import ConfigError, DimensionError, GeometryError, NonFiniteError
    import dcml_tensor as T
    from dcml_tensor import Tensor

logger = logging.getLogger(__name__)

# ============= MODULE BASE =============
class Module:
    """Ordered tree of named parameters and child modules"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, 'Module'] = {}

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        tensor = Tensor(array, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: 'Module') -> 'Module':
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield f"{prefix}{name}", tensor
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def freeze(self):
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self):
        for t in self.parameters():
            t.requires_grad = True

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True):
        own = dict(self.named_parameters(prefix))
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise ConfigError("checkpoint is missing parameters", missing=missing[:8])
        for name, tensor in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise DimensionError("checkpoint shape mismatch", name=name,
                                     expected=tensor.shape, got=value.shape)
            tensor.data = value.astype(tensor.dtype).copy()

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in self.named_parameters():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)

# ============= LAYERS =============
class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError("Linear dimensions must be positive", in_dim=in_dim, out_dim=out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param("weight", fan_in_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError("Linear input width mismatch", expected=self.in_dim, got=x.shape)
        out = T.matmul(x, self.weight)
        return T.add(out, self.bias) if self.bias is not None else out

class Conv2d(Module):
    def __init__(self, kernel: int, in_ch: int, out_ch: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None):
        super().__init__()
        if kernel not in T.CONV_KERNELS:
            raise ConfigError("kernel must be 1, 3 or 7", kernel=kernel)
        self.kernel, self.in_ch, self.out_ch, self.stride = kernel, in_ch, out_ch, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = kernel * kernel * in_ch
        self.weight = self.add_param("weight", fan_in_uniform(rng, (kernel, kernel, in_ch, out_ch), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

class FCStack(Module):
    """Linear layers with ReLU between them (and optionally after the last)"""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, final_relu: bool = False):
        super().__init__()
        if len(dims) < 2:
            raise ConfigError("FCStack needs at least input and output widths", dims=list(dims))
        self.dims = list(dims)
        self.final_relu = final_relu
        self.layers = [self.add_child(f"fc{i}", Linear(dims[i], dims[i + 1], rng))
                       for i in range(len(dims) - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x

class Bottleneck(Module):
    """1x1 -> 3x3 -> 1x1 convolutions with identity or projection shortcut"""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv2d(1, in_ch, mid_ch, rng))
        self.conv2 = self.add_child("conv2", Conv2d(3, mid_ch, mid_ch, rng, stride=stride))
        self.conv3 = self.add_child("conv3", Conv2d(1, mid_ch, out_ch, rng))
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.shortcut = self.add_child("shortcut", Conv2d(1, in_ch, out_ch, rng, stride=stride, padding=0))

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(h))
        h = self.conv3(h)
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.relu(T.add(h, skip))

# ============= BACKBONE =============
@dataclass
class BackboneConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stage_block_counts: Tuple[int, int, int] = (10, 10, 10)
    stage_bottleneck: Tuple[int, int, int] = (16, 32, 64)
    stage_channels: Tuple[int, int, int] = (64, 128, 256)
    stage_strides: Tuple[int, int, int] = (1, 2, 2)
    feature_dim: int = 256
    input_size: int = 48

    def validate(self):
        for name in ('stage_block_counts', 'stage_bottleneck', 'stage_channels', 'stage_strides'):
            values = getattr(self, name)
            if len(values) != 3 or any(int(v) <= 0 for v in values):
                raise ConfigError(f"{name} must be 3 positive integers", value=list(values))
        if min(self.in_channels, self.stem_channels, self.feature_dim) <= 0:
            raise ConfigError("channel widths must be positive")
        size = self.spatial_schedule()[-1]
        if size < 1:
            raise ConfigError("input too small for the stride schedule", input_size=self.input_size)
        for mid, out in zip(self.stage_bottleneck, self.stage_channels):
            if mid > out:
                raise ConfigError("bottleneck width exceeds stage output width", mid=mid, out=out)

    def spatial_schedule(self) -> List[int]:
        """[stem, stage1, stage2, stage3] spatial sizes"""
        size = self.input_size                        # 7x7 stride 1 pad 3 keeps size
        size = (size + 2 - 3) // 2 + 1                # 3x3 max-pool stride 2 pad 1
        sizes = [size]
        for stride in self.stage_strides:
            size = (size + 2 - 3) // stride + 1
            sizes.append(size)
        return sizes

class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = self.add_child("stem", Conv2d(7, cfg.in_channels, cfg.stem_channels, rng, stride=1))
        self.stages: List[List[Bottleneck]] = []
        in_ch = cfg.stem_channels
        for s, (count, mid, out, stride) in enumerate(zip(cfg.stage_block_counts, cfg.stage_bottleneck,
                                                          cfg.stage_channels, cfg.stage_strides)):
            blocks = []
            for b in range(count):
                block = Bottleneck(in_ch, mid, out, rng, stride=stride if b == 0 else 1)
                blocks.append(self.add_child(f"stage{s + 1}.block{b}", block))
                in_ch = out
            self.stages.append(blocks)
        self.fc = self.add_child("fc", Linear(in_ch, cfg.feature_dim, rng))

    def forward(self, x: Tensor, trace: Optional[List[Tuple[str, Tuple[int, ...]]]] = None) -> Tensor:
        """NHWC batch (or a single HWC image) -> (N, feature_dim)"""
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[3] != self.cfg.in_channels:
            raise DimensionError("backbone input must be NHWC with matching channels",
                                 expected_channels=self.cfg.in_channels, got=x.shape)
        h = T.relu(self.stem(x))
        h = T.max_pool(h, size=3, stride=2, padding=1)
        if trace is not None:
            trace.append(("stem", h.shape))
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                h = block(h)
            if trace is not None:
                trace.append((f"stage{s + 1}", h.shape))
        pooled = T.global_avg_pool(h)
        if trace is not None:
            trace.append(("pool", pooled.shape))
        out = self.fc(pooled)
        if trace is not None:
            trace.append(("fc", out.shape))
        return out

def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    return Backbone(cfg, np.random.default_rng(seed))

def backbone_parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count from the declared layer dimensions"""
    def conv(k, cin, cout):
        return k * k * cin * cout + cout
    total = conv(7, cfg.in_channels, cfg.stem_channels)
    in_ch = cfg.stem_channels
    for count, mid, out, stride in zip(cfg.stage_block_counts, cfg.stage_bottleneck,
                                       cfg.stage_channels, cfg.stage_strides):
        for b in range(count):
            total += conv(1, in_ch, mid) + conv(3, mid, mid) + conv(1, mid, out)
            if in_ch != out or (stride != 1 and b == 0):
                total += conv(1, in_ch, out)
            in_ch = out
    return total + in_ch * cfg.feature_dim + cfg.feature_dim

# ============= PATCHES =============
@dataclass
class PatchGeometry:
    image_size: Tuple[int, int] = (64, 64)
    patch_size: Tuple[int, int] = (48, 48)
    offsets: Tuple[Tuple[int, int], ...] = ((0, 0), (0, 16), (16, 0), (16, 16))

    def validate(self):
        H, W = self.image_size
        h, w = self.patch_size
        if len(self.offsets) != 4:
            raise GeometryError("exactly four patch offsets required", offsets=list(self.offsets))
        for (r, c) in self.offsets:
            if r < 0 or c < 0 or r + h > H or c + w > W:
                raise GeometryError("patch exceeds image bounds", offset=(r, c),
                                    patch=self.patch_size, image=self.image_size)
        for i in range(4):
            for j in range(i + 1, 4):
                (r1, c1), (r2, c2) = self.offsets[i], self.offsets[j]
                if min(r1, r2) + h <= max(r1, r2) or min(c1, c2) + w <= max(c1, c2):
                    raise GeometryError("patches must overlap pairwise", pair=(i, j))

def extract_patches(image: Tensor, geom: PatchGeometry) -> List[Tensor]:
    """Four verbatim sub-windows of an HWC image (or NHWC batch)"""
    geom.validate()
    spatial = image.shape[-3:-1]
    if tuple(spatial) != tuple(geom.image_size):
        raise GeometryError("image size does not match patch geometry",
                            image=image.shape, expected=geom.image_size)
    h, w = geom.patch_size
    lead = (slice(None),) * (image.ndim - 3)
    return [T.slice_(image, lead + (slice(r, r + h), slice(c, c + w), slice(None)))
            for r, c in geom.offsets]

def encode_patches(patches: Sequence[Tensor], backbone: Backbone) -> List[Tensor]:
    """Shared-weight encoding: one backbone pass over all four patches"""
    if len(patches) != 4:
        raise DimensionError("expected four patches", got=len(patches))
    shapes = {p.shape for p in patches}
    if len(shapes) != 1:
        raise DimensionError("patches differ in shape", shapes=sorted(shapes))
    batch = [p if p.ndim == 4 else T.reshape(p, (1,) + p.shape) for p in patches]
    n = batch[0].shape[0]
    features = backbone(T.concat(batch, axis=0))
    return [T.slice_(features, (slice(i * n, (i + 1) * n),)) for i in range(4)]

# ============= OPTIMIZERS =============
@dataclass
class OptimizerState:
    kind: str = "sgd"
    schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.01)])
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError("optimizer kind must be 'sgd' or 'adam'", kind=self.kind)
        if not self.schedule:
            raise ConfigError("learning-rate schedule is empty")
        self.schedule = sorted((int(e), float(r)) for e, r in self.schedule)

    def rate_at(self, epoch: int) -> float:
        rate = self.schedule[0][1]
        for boundary, value in self.schedule:
            if epoch >= boundary:
                rate = value
        return rate

def optimizer_step(state: OptimizerState, params: Sequence[Tensor],
                   grads: Sequence[Optional[np.ndarray]], epoch: int = 0) -> Sequence[Tensor]:
    """Apply one update to every parameter, or to none if any gradient is non-finite"""
    if len(params) != len(grads):
        raise DimensionError("params and grads are not aligned", params=len(params), grads=len(grads))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError("gradient shape mismatch", index=i, param=p.shape, grad=g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient, step aborted", index=i, name=p.name,
                                 step=state.step_count)

    lr = state.rate_at(epoch)
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        slot = state.slots.setdefault(i, {})
        if state.kind == "sgd":
            v = slot.get('v')
            v = g.copy() if v is None else state.momentum * v + g
            slot['v'] = v
            p.data = (p.data - lr * v).astype(p.dtype)
        else:
            m = slot.get('m', np.zeros_like(p.data))
            s = slot.get('s', np.zeros_like(p.data))
            m = state.momentum * m + (1 - state.momentum) * g
            s = state.beta2 * s + (1 - state.beta2) * g * g
            slot['m'], slot['s'] = m, s
            m_hat = m / (1 - state.momentum ** t)
            s_hat = s / (1 - state.beta2 ** t)
            p.data = (p.data - lr * m_hat / (np.sqrt(s_hat) + state.eps)).astype(p.dtype)
    return params

class Optimizer:
    """Binds an OptimizerState to a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self, epoch: int = 0):
        optimizer_step(self.state, self.params, [p.grad for p in self.params], epoch)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
