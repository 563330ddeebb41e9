"""
Dense tensors with reverse-mode automatic differentiation.

Every numeric quantity in the package (clean motions, noisy motions, noise,
frozen weights, adapter factors, token embeddings) lives in a ``Tensor``.
Each op stores a closure that pushes the output gradient back to its inputs;
``backward`` replays those closures in reverse topological order.

Also hosts the Adam optimizer, global-norm clipping, the seedable Philox
generator factory and the "MDLC" binary tensor container.
"""

import hashlib
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from stylediff.errors import GraphError, LayoutError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.dtype = np.float32


_STATE = _State()


def get_default_dtype():
    return _STATE.dtype


@contextmanager
def precision(dtype: Union[str, type] = "float64"):
    """Switch the float type of newly created tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"Unsupported precision: {dtype}")
    previous = _STATE.dtype
    _STATE.dtype = dtype
    try:
        yield
    finally:
        _STATE.dtype = previous


@contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    previous = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Philox-4x64 generator keyed by ``seed`` and an optional stream path.

    Distinct stream tuples give statistically independent generators for the
    same seed, so e.g. the style and prior batches of a fine-tuning run never
    share draws.
    """
    entropy = [int(seed)] + [int(s) for s in stream]
    if any(e < 0 for e in entropy):
        raise ValueError(f"Seeds must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class Tensor:
    """
    An n-dimensional float array that can take part in a recorded graph.

    Leaves created with ``requires_grad=True`` own a zero-initialized ``grad``
    buffer that accumulates during ``backward``.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _STATE.dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


# ----------------------------------------------------------------------
# Graph plumbing
# ----------------------------------------------------------------------

@dataclass
class GraphNode:
    """One op record of a computation graph."""
    op: str
    input_ids: Tuple[int, ...]
    output_id: int


@dataclass
class ComputationGraph:
    """Tensors reachable from a root, in topological order (inputs first)."""
    nodes: List[Tensor] = field(default_factory=list)

    def records(self) -> List[GraphNode]:
        ids = {id(node): i for i, node in enumerate(self.nodes)}
        return [
            GraphNode(
                op=node._op,
                input_ids=tuple(ids[id(p)] for p in node._parents),
                output_id=i
            )
            for i, node in enumerate(self.nodes)
            if not node.is_leaf
        ]


def _as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._consumed = False
    out.requires_grad = _STATE.grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(tensor: Tensor, grad: np.ndarray):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def build_graph(root: Tensor) -> ComputationGraph:
    """Iterative post-order walk from ``root``; raises on consumed nodes."""
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._consumed:
            raise GraphError(
                f"Graph already consumed: node '{node._op}' was released by an earlier backward"
            )
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return ComputationGraph(order)


def backward(loss: Tensor):
    """Populate ``grad`` of every requires_grad leaf with d(loss)/d(leaf)."""
    if loss._consumed:
        raise GraphError("Graph already consumed: backward was called twice on the same loss")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("Loss does not depend on any tensor with requires_grad=True")

    graph = build_graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    # Release saved activations so the graph cannot be replayed
    for node in graph.nodes:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True
            if node is not loss:
                node.grad = None


# ----------------------------------------------------------------------
# Elementwise ops
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", _backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def _backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), "div", _backward)


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)

    def _backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), "neg", _backward)


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(exponent, (int, float)):
        raise TypeError("power only supports scalar exponents")

    def _backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _result(a.data ** exponent, (a,), "pow", _backward)


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def _backward(g):
        _accumulate(a, g * out_data)

    return _result(out_data, (a,), "exp", _backward)


def log(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)

    def _backward(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), "log", _backward)


def sqrt(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def _backward(g):
        _accumulate(a, g * 0.5 / out_data)

    return _result(out_data, (a,), "sqrt", _backward)


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def _backward(g):
        _accumulate(a, g * mask)

    return _result(a.data * mask, (a,), "relu", _backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: ArrayLike) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def _backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * d_inner
        _accumulate(a, g * grad)

    return _result(out_data, (a,), "gelu", _backward)


# ----------------------------------------------------------------------
# Reductions and shape ops
# ----------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), "sum", _backward)


def tmean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _result(a.data.mean(axis=axes, keepdims=keepdims), (a,), "mean", _backward)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)

    def _backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), "reshape", _backward)


def transpose(a: ArrayLike, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        _accumulate(a, g.transpose(inverse))

    return _result(a.data.transpose(axes), (a,), "transpose", _backward)


def swapaxes(a: ArrayLike, axis1: int, axis2: int) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, tuple(axes))


def getitem(a: ArrayLike, index) -> Tensor:
    a = _as_tensor(a)

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _result(a.data[index], (a,), "getitem", _backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate their gradients."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )

    def _backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _result(table.data[ids], (table,), "embedding", _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        for part, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accumulate(part, piece)

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, "concat", _backward)


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes, leading axes broadcast as batch.

    Gradients: dA = dC·Bᵀ, dB = Aᵀ·dC (summed over broadcast batch axes).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from e

    def _backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out_data, (a, b), "matmul", _backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weightᵀ + bias`` with weight stored as (out_features, in_features)."""
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Same-padded 1D convolution over time.

    x is time-major (B, N, C_in); weight is (C_out, C_in, K) with odd K.
    Returns (B, N, C_out).
    """
    x = _as_tensor(x)
    c_out, c_in, k = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape} do not match kernel {weight.shape}")
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    pad = k // 2
    n = x.shape[1]
    zeros = np.zeros((x.shape[0], pad, c_in), dtype=x.data.dtype)
    padded = concat([zeros, x, zeros], axis=1) if pad else x
    out = None
    for tap in range(k):
        window = getitem(padded, (slice(None), slice(tap, tap + n), slice(None)))
        term = matmul(window, transpose(getitem(weight, (slice(None), slice(None), tap))))
        out = term if out is None else add(out, term)
    if bias is not None:
        out = add(out, bias)
    return out


# ----------------------------------------------------------------------
# Normalization and probabilities
# ----------------------------------------------------------------------

def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows along ``axis`` sum to one."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), "softmax", _backward)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def _backward(g):
        _accumulate(x, g - probs * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), "log_softmax", _backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data

    def _backward(g):
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accumulate(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _result(out_data, (x, gamma, beta), "layer_norm", _backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    norm = sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------

def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Mean of squared elementwise differences."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def _backward(g):
        grad = g * 2.0 * diff / n
        _accumulate(pred, grad)
        _accumulate(target, -grad)

    return _result(np.asarray((diff * diff).mean(), dtype=diff.dtype), (pred, target), "mse", _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    targets = np.zeros_like(logits.data)
    targets[np.arange(len(labels)), labels] = 1.0
    return soft_cross_entropy(logits, targets)


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy against per-row target distributions (rows of ``targets`` sum to 1)."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_probs)
    batch = logits.shape[0]
    loss = -(targets * log_probs).sum() / batch

    def _backward(g):
        row_mass = targets.sum(axis=-1, keepdims=True)
        _accumulate(logits, g * (probs * row_mass - targets) / batch)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", _backward)


# ----------------------------------------------------------------------
# Parameters and optimization
# ----------------------------------------------------------------------

class Module:
    """
    Flat, ordered registry of named parameters.

    Subclasses register weights with ``add_param`` in construction order, which
    is also the order used by checkpoints and optimizers.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add_param(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"Parameter '{name}' registered twice")
        tensor = Tensor(data, requires_grad=requires_grad, name=name)
        self._params[name] = tensor
        return tensor

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def parameters(self, trainable_only: bool = False) -> List[Tensor]:
        return [p for p in self._params.values() if p.requires_grad or not trainable_only]

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(p.size for p in self.parameters(trainable_only)))

    def set_trainable(self, flag: bool, names: Optional[Iterable[str]] = None):
        for name in (names if names is not None else self._params):
            tensor = self._params[name]
            tensor.requires_grad = flag
            tensor.grad = np.zeros_like(tensor.data) if flag else None

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        missing = [name for name in self._params if name not in state]
        if strict and missing:
            raise LayoutError(f"Checkpoint is missing parameters: {missing[:5]}")
        for name, tensor in self._params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(
                    f"Parameter '{name}': checkpoint shape {value.shape} != model shape {tensor.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype, copy=True)


@dataclass
class AdamState:
    """First/second moment buffers, step counter and hyperparameters."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


MAX_ADAM_STEP = 2 ** 62


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[Tensor]:
    """One bias-corrected Adam update, applied in place."""
    assert state.step < MAX_ADAM_STEP, "Adam step counter overflow"
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} / moment {m.shape} vs parameter {p.shape}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


class Adam:
    """Adam over a fixed list of tensors, reading their ``grad`` buffers."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8
    ):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


def grad_norm(params: Sequence[Tensor]) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))


# ----------------------------------------------------------------------
# MDLC tensor container
# ----------------------------------------------------------------------

MAGIC = b"MDLC"
FORMAT_VERSION = 1


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def encode_tensors(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> bytes:
    """
    Serialize named arrays.

    Layout: magic "MDLC", version u32, entry count u32, then per entry name
    length u32 + UTF-8 name, rank u32, dims u64 each, little-endian f32 payload.
    """
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.ascontiguousarray(_as_array(value), dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        if array.ndim:
            chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise LayoutError(f"Not an MDLC container (magic {blob[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise LayoutError(f"Unsupported MDLC version {version}")
        offset = 12
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
            offset += 8 * rank
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64))
            if offset + n_bytes > len(blob):
                raise LayoutError(f"Truncated payload for tensor '{name}'")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=n_bytes // 4, offset=offset).reshape(dims).copy()
            offset += n_bytes
    except struct.error as e:
        raise LayoutError(f"Truncated MDLC header: {e}") from e
    except UnicodeDecodeError as e:
        raise LayoutError(f"Tensor name is not UTF-8: {e}") from e
    if offset != len(blob):
        raise LayoutError(f"{len(blob) - offset} trailing bytes after last tensor")
    return tensors


def save_tensors(path: Union[str, Path], tensors: Mapping[str, Union[Tensor, np.ndarray]]):
    Path(path).write_bytes(encode_tensors(tensors))
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def checksum(tensors: Mapping[str, Union[Tensor, np.ndarray]]) -> str:
    """SHA-256 over names and raw bytes, used to prove weights did not move."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        array = np.ascontiguousarray(_as_array(tensors[name]))
        digest.update(name.encode("utf-8"))
        digest.update(str(array.dtype).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()
