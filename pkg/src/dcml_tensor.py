#!/usr/bin/env python3
"""
DCML TENSOR CORE v1.0.0
=======================
Dense tensors over numpy with reverse-mode automatic differentiation.

Every differentiable operation goes through apply_primitive(), which checks
shapes and finiteness, runs the numpy kernel, and records a node on the active
ComputationTape when any input requires a gradient. backward() walks the tape
once, newest node first.

Element width is a per-run choice: float32 for training, float64 for
finite-difference checking (see precision()).
=======================
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .dcml_shared import DCMLError, DimensionError, NonFiniteError, FLAGS
except ImportError:
    from dcml_shared import DCMLError, DimensionError, NonFiniteError, FLAGS

logger = logging.getLogger(__name__)

# ============= PRECISION =============
_DTYPES = {'float32': np.float32, 'float64': np.float64}
_state = threading.local()

def _get_state():
    if not hasattr(_state, 'precision'):
        _state.precision = 'float32'
        _state.grad_enabled = True
        _state.tape = None
    return _state

def set_precision(name: str):
    """Select the element width used for newly created tensors"""
    if name not in _DTYPES:
        raise DCMLError(f"Unknown precision '{name}'", allowed=sorted(_DTYPES))
    _get_state().precision = name

def get_precision() -> str:
    return _get_state().precision

def get_dtype():
    return _DTYPES[get_precision()]

@contextmanager
def precision(name: str):
    """Temporarily switch element width (gradcheck runs use float64)"""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)

@contextmanager
def no_grad():
    """Evaluate without recording on the tape (key encoder, evaluation)"""
    state = _get_state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous

def is_grad_enabled() -> bool:
    return _get_state().grad_enabled

# ============= TENSOR =============
ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]

class Tensor:
    """Shape + row-major element buffer + optional gradient"""

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None, check_finite: bool = True):
        array = np.array(data, dtype=dtype or get_dtype(), copy=True)
        if check_finite and not np.all(np.isfinite(array)):
            raise NonFiniteError("Tensor data contains NaN or Inf", name=name, shape=array.shape)
        if any(d <= 0 for d in array.shape):
            raise DimensionError("Tensor dimensions must be positive", shape=array.shape)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[int] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> 'Tensor':
        """Wrap a kernel output without copying or re-checking"""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        return t

    # ----- shape helpers -----
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item() needs a single-element tensor", shape=self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data.copy(), False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ----- operator sugar -----
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def backward(self):
        backward(self)

def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)

# ============= COMPUTATION TAPE =============
@dataclass
class TapeNode:
    index: int
    kind: str
    inputs: List[Tensor]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

@dataclass
class ComputationTape:
    """Ordered record of primitive applications, oldest first"""

    nodes: List[TapeNode] = field(default_factory=list)

    def record(self, kind: str, inputs: List[Tensor], output: Tensor,
               backward_fn: Callable) -> TapeNode:
        index = len(self.nodes)
        for t in inputs:
            # Inputs must come from earlier nodes or be leaves
            assert t._node is None or t._node < index, "tape order violated"
        node = TapeNode(index, kind, inputs, output, backward_fn)
        self.nodes.append(node)
        output._node = index
        return node

    def clear(self):
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(leaf) into every reachable leaf's .grad"""
        if root.data.size != 1:
            raise DimensionError("backward() root must be a scalar", shape=root.shape)
        seed = np.ones_like(root.data)
        if root._node is None:
            if not root.requires_grad:
                raise DCMLError("backward() root is not on the tape")
            _accumulate_leaf(root, seed)
            return
        if root._node >= len(self.nodes) or self.nodes[root._node].output is not root:
            raise DCMLError("backward() root belongs to a different tape")

        pending: Dict[int, np.ndarray] = {id(root): seed}
        visited = 0
        for node in reversed(self.nodes[:root._node + 1]):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            visited += 1
            input_grads = node.backward_fn(grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if g.shape != tensor.shape:
                    raise DimensionError(f"backward rule for '{node.kind}' produced wrong shape",
                                         expected=tensor.shape, got=g.shape)
                if tensor._node is None:
                    _accumulate_leaf(tensor, g)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + g
                else:
                    pending[id(tensor)] = g
        logger.debug(f"[TAPE] backward visited {visited}/{len(self.nodes)} nodes")

def _accumulate_leaf(tensor: Tensor, grad: np.ndarray):
    grad = grad.astype(tensor.dtype, copy=False)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad

def get_tape() -> ComputationTape:
    state = _get_state()
    if state.tape is None:
        state.tape = ComputationTape()
    return state.tape

def reset_tape():
    get_tape().clear()

def backward(root: Tensor, retain_tape: bool = False):
    """Run reverse-mode differentiation from a scalar root on the active tape"""
    tape = get_tape()
    try:
        tape.backward(root)
    finally:
        if not retain_tape:
            tape.clear()

# ============= PRIMITIVE REGISTRY =============
# Each entry maps kind -> kernel(arrays, attrs) returning (output, backward_fn),
# where backward_fn(grad_output) returns one gradient (or None) per input.
PRIMITIVES: Dict[str, Callable] = {}

def primitive(kind: str):
    def register(kernel: Callable) -> Callable:
        PRIMITIVES[kind] = kernel
        return kernel
    return register

def apply_primitive(kind: str, inputs: Sequence[ArrayLike], **attrs: Any) -> Tensor:
    """Run one primitive and record it on the tape when gradients are needed"""
    kernel = PRIMITIVES.get(kind)
    if kernel is None:
        raise DCMLError(f"Unknown primitive '{kind}'", allowed=sorted(PRIMITIVES))
    tensors = [as_tensor(x) for x in inputs]
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"Non-finite input to '{kind}'", shape=t.shape)
    arrays = [t.data for t in tensors]
    out, backward_fn = kernel(arrays, attrs)
    out = np.asarray(out, dtype=arrays[0].dtype)
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, needs_grad)
    if needs_grad:
        get_tape().record(kind, tensors, result, backward_fn)
    return result

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"'{kind}' operands do not broadcast", left=a.shape, right=b.shape)

# ============= LINEAR ALGEBRA =============
@primitive("matmul")
def _matmul(arrays, attrs):
    a, b = arrays
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner dimensions disagree", left=a.shape, right=b.shape)
    out = a @ b

    def backward_fn(g):
        return g @ b.T, a.T @ g
    return out, backward_fn

# ============= CONVOLUTION & POOLING =============
CONV_KERNELS = (1, 3, 7)

def _windows(x_pad: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> (N, Ho, Wo, kh, kw, C) strided view"""
    view = np.lib.stride_tricks.sliding_window_view(x_pad, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]
    return view.transpose(0, 1, 2, 4, 5, 3)

@primitive("conv2d")
def _conv2d(arrays, attrs):
    x, w = arrays[0], arrays[1]
    bias = arrays[2] if len(arrays) > 2 else None
    stride = int(attrs.get('stride', 1))
    pad = int(attrs.get('padding', 0))
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects NHWC input and (kh, kw, Cin, Cout) kernel",
                             input=x.shape, kernel=w.shape)
    kh, kw, cin, cout = w.shape
    if kh != kw or kh not in CONV_KERNELS:
        raise DimensionError("conv2d kernel must be 1x1, 3x3 or 7x7", kernel=w.shape)
    if x.shape[3] != cin:
        raise DimensionError("conv2d channel mismatch", input=x.shape, kernel=w.shape)
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d bias must have one entry per output channel",
                             bias=bias.shape, cout=cout)
    n, h, wd, _ = x.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError("conv2d kernel larger than padded input", input=x.shape, kernel=w.shape)

    x_pad = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = _windows(x_pad, kh, kw, stride)
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, kh * kw * cin)
    w_mat = w.reshape(kh * kw * cin, cout)
    out = (cols @ w_mat).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias

    def backward_fn(g):
        g_mat = g.reshape(n * ho * wo, cout)
        grad_w = (cols.T @ g_mat).reshape(w.shape)
        dcols = (g_mat @ w_mat.T).reshape(n, ho, wo, kh, kw, cin)
        dx_pad = np.zeros_like(x_pad)
        for i in range(kh):
            for j in range(kw):
                dx_pad[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        grad_x = dx_pad[:, pad:pad + h, pad:pad + wd, :] if pad else dx_pad
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads
    return out, backward_fn

@primitive("max_pool")
def _max_pool(arrays, attrs):
    x, = arrays
    size = int(attrs.get('size', 3))
    stride = int(attrs.get('stride', 2))
    pad = int(attrs.get('padding', 1))
    if x.ndim != 4:
        raise DimensionError("max_pool expects NHWC input", input=x.shape)
    n, h, wd, c = x.shape
    x_pad = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-np.inf) if pad else x
    win = _windows(x_pad, size, size, stride)
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(n, ho, wo, size * size, c)
    arg = flat.argmax(axis=3)
    out = np.take_along_axis(flat, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward_fn(g):
        dx_pad = np.zeros(x_pad.shape, dtype=x.dtype)
        for k in range(size * size):
            i, j = divmod(k, size)
            dx_pad[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(arg == k, g, 0)
        return [dx_pad[:, pad:pad + h, pad:pad + wd, :] if pad else dx_pad]
    return out, backward_fn

@primitive("global_avg_pool")
def _global_avg_pool(arrays, attrs):
    x, = arrays
    if x.ndim not in (3, 4):
        raise DimensionError("global_avg_pool expects HWC or NHWC input", input=x.shape)
    axes = (0, 1) if x.ndim == 3 else (1, 2)
    count = x.shape[axes[0]] * x.shape[axes[1]]
    out = x.mean(axis=axes)

    def backward_fn(g):
        g = np.expand_dims(np.expand_dims(g, axes[0]), axes[1])
        return [np.broadcast_to(g / count, x.shape).copy()]
    return out, backward_fn

# ============= ACTIVATIONS =============
@primitive("relu")
def _relu(arrays, attrs):
    x, = arrays
    mask = x > 0
    return np.where(mask, x, 0), lambda g: [np.where(mask, g, 0)]

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))

@primitive("sigmoid")
def _sigmoid(arrays, attrs):
    x, = arrays
    s = _stable_sigmoid(x)
    return s, lambda g: [g * s * (1 - s)]

@primitive("softmax")
def _softmax(arrays, attrs):
    x, = arrays
    axis = attrs.get('axis', -1)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return [p * (g - (g * p).sum(axis=axis, keepdims=True))]
    return p, backward_fn

@primitive("log_softmax")
def _log_softmax(arrays, attrs):
    x, = arrays
    axis = attrs.get('axis', -1)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward_fn(g):
        return [g - p * g.sum(axis=axis, keepdims=True)]
    return out, backward_fn

# ============= STRUCTURE =============
@primitive("concat")
def _concat(arrays, attrs):
    axis = attrs.get('axis', -1)
    if not arrays:
        raise DimensionError("concat needs at least one part")
    ref = arrays[0]
    ax = axis % ref.ndim
    for a in arrays[1:]:
        if a.ndim != ref.ndim or any(a.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax):
            raise DimensionError("concat parts disagree off the concat axis",
                                 shapes=[x.shape for x in arrays])
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=ax)
    return out, backward_fn

@primitive("reshape")
def _reshape(arrays, attrs):
    x, = arrays
    shape = tuple(attrs['shape'])
    try:
        out = x.reshape(shape)
    except ValueError:
        raise DimensionError("reshape size mismatch", source=x.shape, target=shape)
    return out, lambda g: [g.reshape(x.shape)]

@primitive("slice")
def _slice(arrays, attrs):
    x, = arrays
    index = attrs['index']
    out = x[index]

    def backward_fn(g):
        dx = np.zeros_like(x)
        dx[index] += g
        return [dx]
    return np.array(out, copy=True), backward_fn

@primitive("pick")
def _pick(arrays, attrs):
    """Row-wise gather: out[i] = x[i, labels[i]]"""
    x, = arrays
    labels = np.asarray(attrs['labels'], dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError("pick expects (N, K) input and N labels", input=x.shape, labels=labels.shape)
    rows = np.arange(x.shape[0])
    out = x[rows, labels]

    def backward_fn(g):
        dx = np.zeros_like(x)
        dx[rows, labels] = g
        return [dx]
    return out, backward_fn

@primitive("transpose")
def _transpose(arrays, attrs):
    x, = arrays
    if x.ndim != 2:
        raise DimensionError("transpose expects a matrix", input=x.shape)
    return x.T.copy(), lambda g: [g.T.copy()]

# ============= ELEMENTWISE ARITHMETIC =============
@primitive("channel_scale")
def _channel_scale(arrays, attrs):
    """x * s with one scale per channel (last axis), broadcast over spatial axes"""
    x, s = arrays
    if x.shape[0] != s.shape[0] or x.shape[-1] != s.shape[-1] or s.ndim != 2:
        raise DimensionError("channel_scale expects (N, ..., C) input and (N, C) scales",
                             input=x.shape, scales=s.shape)
    expand = (slice(None),) + (None,) * (x.ndim - 2) + (slice(None),)
    out = x * s[expand]

    def backward_fn(g):
        grad_s = (g * x).reshape(x.shape[0], -1, x.shape[-1]).sum(axis=1)
        return [g * s[expand], grad_s]
    return out, backward_fn

@primitive("add")
def _add(arrays, attrs):
    a, b = arrays
    _check_broadcast("add", a, b)
    return a + b, lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

@primitive("sub")
def _sub(arrays, attrs):
    a, b = arrays
    _check_broadcast("sub", a, b)
    return a - b, lambda g: [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]

@primitive("mul")
def _mul(arrays, attrs):
    a, b = arrays
    _check_broadcast("mul", a, b)
    return a * b, lambda g: [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]

@primitive("div")
def _div(arrays, attrs):
    a, b = arrays
    _check_broadcast("div", a, b)
    if np.any(b == 0):
        raise NonFiniteError("Division by zero")
    out = a / b
    return out, lambda g: [_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)]

@primitive("neg")
def _neg(arrays, attrs):
    x, = arrays
    return -x, lambda g: [-g]

@primitive("abs")
def _abs(arrays, attrs):
    x, = arrays
    return np.abs(x), lambda g: [g * np.sign(x)]

@primitive("sqrt")
def _sqrt(arrays, attrs):
    x, = arrays
    if np.any(x < 0):
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(x)
    return out, lambda g: [g * 0.5 / np.where(out > 0, out, np.inf)]

@primitive("log")
def _log(arrays, attrs):
    x, = arrays
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return np.log(x), lambda g: [g / x]

@primitive("exp")
def _exp(arrays, attrs):
    x, = arrays
    out = np.exp(x)
    return out, lambda g: [g * out]

# ============= REDUCTIONS =============
def _expand_reduced(g: np.ndarray, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)

def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))

@primitive("sum")
def _sum(arrays, attrs):
    x, = arrays
    axis, keepdims = attrs.get('axis'), attrs.get('keepdims', False)
    out = x.sum(axis=axis, keepdims=keepdims)
    return out, lambda g: [_expand_reduced(g, x.shape, axis, keepdims).copy()]

@primitive("mean")
def _mean(arrays, attrs):
    x, = arrays
    axis, keepdims = attrs.get('axis'), attrs.get('keepdims', False)
    count = _reduced_count(x.shape, axis)
    out = x.mean(axis=axis, keepdims=keepdims)
    return out, lambda g: [_expand_reduced(g, x.shape, axis, keepdims) / count]

@primitive("variance")
def _variance(arrays, attrs):
    """Population variance (divide by n)"""
    x, = arrays
    axis, keepdims = attrs.get('axis'), attrs.get('keepdims', False)
    count = _reduced_count(x.shape, axis)
    centered = x - x.mean(axis=axis, keepdims=True)
    out = (centered ** 2).mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return [_expand_reduced(g, x.shape, axis, keepdims) * 2.0 * centered / count]
    return out, backward_fn

# ============= NORMALIZATION =============
@primitive("l2_normalize")
def _l2_normalize(arrays, attrs):
    x, = arrays
    axis = attrs.get('axis', -1)
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        FLAGS.raise_flag("l2_normalize_zero", f"{int(zero.sum())} zero-norm vector(s) left as zeros")
    safe = np.where(zero, 1.0, norm)
    out = np.where(zero, 0.0, x / safe)

    def backward_fn(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return [np.where(zero, 0.0, (g - out * proj) / safe)]
    return out, backward_fn

# ============= FUNCTIONAL API =============
def matmul(a, b) -> Tensor: return apply_primitive("matmul", [a, b])
def relu(x) -> Tensor: return apply_primitive("relu", [x])
def sigmoid(x) -> Tensor: return apply_primitive("sigmoid", [x])
def softmax(x, axis: int = -1) -> Tensor: return apply_primitive("softmax", [x], axis=axis)
def log_softmax(x, axis: int = -1) -> Tensor: return apply_primitive("log_softmax", [x], axis=axis)
def add(a, b) -> Tensor: return apply_primitive("add", [a, b])
def sub(a, b) -> Tensor: return apply_primitive("sub", [a, b])
def mul(a, b) -> Tensor: return apply_primitive("mul", [a, b])
def div(a, b) -> Tensor: return apply_primitive("div", [a, b])
def neg(x) -> Tensor: return apply_primitive("neg", [x])
def abs_(x) -> Tensor: return apply_primitive("abs", [x])
def sqrt(x) -> Tensor: return apply_primitive("sqrt", [x])
def log(x) -> Tensor: return apply_primitive("log", [x])
def exp(x) -> Tensor: return apply_primitive("exp", [x])
def transpose(x) -> Tensor: return apply_primitive("transpose", [x])
def reshape(x, shape) -> Tensor: return apply_primitive("reshape", [x], shape=tuple(shape))
def pick(x, labels) -> Tensor: return apply_primitive("pick", [x], labels=labels)
def global_avg_pool(x) -> Tensor: return apply_primitive("global_avg_pool", [x])
def channel_scale(x, s) -> Tensor: return apply_primitive("channel_scale", [x, s])

def slice_(x, index) -> Tensor:
    return apply_primitive("slice", [x], index=index)

def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise DimensionError("concat needs at least one part")
    return apply_primitive("concat", list(parts), axis=axis)

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)

def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)

def variance(x, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("variance", [x], axis=axis, keepdims=keepdims)

def l2_normalize(x, axis: int = -1) -> Tensor:
    return apply_primitive("l2_normalize", [x], axis=axis)

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv2d", inputs, stride=stride, padding=padding)

def max_pool(x, size: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    return apply_primitive("max_pool", [x], size=size, stride=stride, padding=padding)

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy with integer class labels"""
    return neg(mean(pick(log_softmax(logits, axis=-1), labels)))
