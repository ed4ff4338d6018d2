"""Dense reverse-mode automatic differentiation on numpy arrays.

Every primitive builds its output Tensor together with a closure that maps the
output gradient to the gradients of its inputs. ``backward`` walks the traced
graph in reverse topological order. Training runs at float32; gradient checks
run the same code at float64.
"""
import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .error_types import ContractViolation

logger = logging.getLogger(__name__)

MAX_AXES = 4
RELATIVE_FLOOR = 1e-8
ROUNDOFF_FACTOR = 8.0

_node_ids = itertools.count()
_grad_mode = threading.local()

ArrayLike = Union['Tensor', np.ndarray, float, int]


def grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Runs forward passes without recording the graph (per thread)"""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A value in the graph: data, optional gradient and the rule that produced it"""

    __slots__ = ('data', 'grad', 'requires_grad', 'parents', 'backward_fn', 'op', 'id')
    # numpy defers mixed expressions to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 parents: Tuple['Tensor', ...] = (), backward_fn: Optional[Callable] = None,
                 op: str = 'leaf'):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        if array.ndim > MAX_AXES:
            raise ContractViolation(f"tensors have at most {MAX_AXES} axes, got shape {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_node_ids)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, key) -> 'Tensor':
        return slice_(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    tracked = grad_enabled() and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# elementwise arithmetic

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'add')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), backward, 'add')


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'sub')

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), backward, 'sub')


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, 'mul')

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), backward, 'mul')


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), 'neg')


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), 'square')


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ContractViolation(f"minimum: shapes {a.shape} and {b.shape} differ")
    pick_a = a.data <= b.data

    def backward(g):
        return g * pick_a, g * ~pick_a
    return _make(np.where(pick_a, a.data, b.data), (a, b), backward, 'minimum')


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data, op='detach')


# nonlinearities

def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _make(a.data * active, (a,), lambda g: (g * active,), 'relu')


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def logistic(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), 'logistic')


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), 'log')


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), backward, 'softmax')


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalises the last axis, then applies the affine (gamma, beta)"""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ContractViolation(
            f"layer_norm: input {a.shape} needs gamma/beta of shape ({a.shape[-1]},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def backward(g):
        gxhat = g * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(a.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)
    return _make(xhat * gamma.data + beta.data, (a, gamma, beta), backward, 'layer_norm')


# reductions and shape ops

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, 'sum')


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = float(np.prod([a.shape[ax] for ax in axes])) if axes else 1.0

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, 'mean')


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {a.shape} as {shape}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ContractViolation(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ContractViolation("concat: no tensors")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        first = [s for i, s in enumerate(tensors[0].shape) if i != axis]
        if t.ndim != ndim or other != first:
            raise ContractViolation(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, 'concat')


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return _make(np.array(out), (a,), backward, 'slice')


# linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractViolation(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")
    return _make(out, (a, b), backward, 'matmul')


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over (N, C, H, W) with zero padding"""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ContractViolation(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    out_channels, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractViolation(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contribution.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)
    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, backward, 'conv2d')


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Linear map of length n onto 2n samples, half-pixel centres"""
    u = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        u[i, i0] += 1.0 - lam
        u[i, i1] += lam
    return u


def bilinear_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ContractViolation(f"bilinear_upsample2x expects (N, C, H, W), got {x.shape}")
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def backward(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)
    return _make(out, (x,), backward, 'upsample2x')


def binary_cross_entropy(p: Tensor, target: np.ndarray, positive_weight: float = 1.0,
                         eps: float = 1e-7) -> Tensor:
    """Mean pixelwise BCE on probabilities; positive pixels weighted"""
    if p.shape != target.shape:
        raise ContractViolation(f"binary_cross_entropy: prediction {p.shape} vs target {target.shape}")
    t = target.astype(p.dtype)
    q = np.clip(p.data, eps, 1.0 - eps)
    count = float(p.data.size)
    loss = -(positive_weight * t * np.log(q) + (1.0 - t) * np.log(1.0 - q)).sum() / count
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        grad = -(positive_weight * t / q - (1.0 - t) / (1.0 - q)) / count
        return (g * grad * inside,)
    return _make(np.asarray(loss, dtype=p.dtype), (p,), backward, 'bce')


def mha(query: Tensor, key_value: Tensor, heads: int,
        wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
        wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor,
        return_weights: bool = False):
    """Multi-head scaled dot-product attention over (B, T, D) token batches.

    No positional terms: the output for each query depends on the keys only
    as a set.
    """
    if query.ndim != 3 or key_value.ndim != 3:
        raise ContractViolation(f"mha expects (B, T, D) tokens, got {query.shape} and {key_value.shape}")
    batch, tq, dim = query.shape
    tk = key_value.shape[1]
    if dim % heads != 0:
        raise ContractViolation(f"mha: model dim {dim} not divisible by {heads} heads")
    if key_value.shape[0] != batch or key_value.shape[2] != dim:
        raise ContractViolation(f"mha: query {query.shape} and key/value {key_value.shape} disagree")
    head_dim = dim // heads

    def split(t: Tensor, length: int) -> Tensor:
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(query @ wq + bq, tq)
    k = split(key_value @ wk + bk, tk)
    v = split(key_value @ wv + bv, tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    attended = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, tq, dim)
    out = attended @ wo + bo
    if return_weights:
        return out, weights
    return out


# graph and backward

@dataclass
class Graph:
    """Nodes reachable from a root, parents before children"""
    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> 'Graph':
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in visited:
                continue
            visited.add(node.id)
            stack.append((node, True))
            for parent in node.parents:
                if parent.id not in visited:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """Back-propagates a scalar loss.

    Leaf tensors reached by the graph get their ``grad`` set. Returns the
    gradients of ``params`` in order; parameters the loss never touched get zeros.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    pending = {loss.id: np.ones_like(loss.data)}
    leaf_grads = {}
    for node in reversed(graph.nodes):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                leaf_grads[node.id] = node.grad
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + parent_grad
            else:
                pending[parent.id] = parent_grad
    if params is None:
        return []
    return [leaf_grads.get(p.id, np.zeros_like(p.data)) for p in params]


# optimizer

@dataclass
class AdamState:
    lr: float
    m: List[np.ndarray]
    v: List[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float) -> 'AdamState':
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> List[Tensor]:
    """Bias-corrected adaptive moment update, applied in place"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractViolation(f"adam_step: gradient {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return list(params)


class Adam:
    """Adam bound to a fixed parameter list"""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, lr)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.state, self.params, grads)


# gradient checking

def grad_check(builder: Callable[..., Tensor], input_shapes: Sequence[Tuple[int, ...]],
               params: Sequence[Tensor] = (), seed: int = 0, step: float = 1e-5,
               max_coords: Optional[int] = 32, skip_kinks: bool = False) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Inputs are drawn at float64; ``params`` (captured by ``builder``) must be
    float64 too. Coordinates are subsampled to ``max_coords`` per tensor. With
    ``skip_kinks``, coordinates whose difference quotient changes between
    ``step`` and ``step / 2`` straddle a rectifier kink and are left out.
    Differences within the rounding error of the quotient itself count as zero.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractViolation(f"grad_check needs float64 parameters, got {p.dtype}")
    rng = np.random.default_rng(seed)
    inputs = [Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64) for shape in input_shapes]
    sample_out = builder(*inputs)
    weights = rng.standard_normal(sample_out.shape)

    def scalar_loss() -> Tensor:
        return (builder(*inputs) * weights).sum()

    def central(tensor: Tensor, index, h: float) -> float:
        original = tensor.data[index]
        with no_grad():
            tensor.data[index] = original + h
            plus = scalar_loss().item()
            tensor.data[index] = original - h
            minus = scalar_loss().item()
        tensor.data[index] = original
        return (plus - minus) / (2.0 * h)

    checked = list(inputs) + list(params)
    loss = scalar_loss()
    analytic = backward(loss, checked)
    roundoff = ROUNDOFF_FACTOR * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / step

    worst = 0.0
    skipped = 0
    for tensor, grad in zip(checked, analytic):
        flat_size = tensor.data.size
        coords = np.arange(flat_size)
        if max_coords is not None and flat_size > max_coords:
            coords = rng.choice(flat_size, size=max_coords, replace=False)
        for flat_index in coords:
            index = np.unravel_index(flat_index, tensor.shape)
            numeric = central(tensor, index, step)
            if skip_kinks:
                half = central(tensor, index, step / 2.0)
                if abs(half - numeric) > 1e-6 * max(abs(numeric), abs(half), 1e-3):
                    skipped += 1
                    continue
            exact = float(grad[index])
            error = max(abs(exact - numeric) - roundoff, 0.0) / max(abs(exact), abs(numeric), RELATIVE_FLOOR)
            worst = max(worst, error)
    logger.debug(f"grad_check over {len(checked)} tensors: worst relative error {worst:.3e}, {skipped} kinks skipped")
    return worst
