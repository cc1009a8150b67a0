"""
Dense tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new `Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients. Node ids
grow monotonically with creation, so sorting the reachable nodes by id is a
valid topological order; `Tape` holds that order and replays it backwards.
"""

import contextlib
import itertools
import logging
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from zeroshotnmt.models.config import DropoutMode
from zeroshotnmt.models.error import TensorError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_NODE_IDS = itertools.count(1)
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording inside the block (inference and analysis).
    """

    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """
    N-dimensional float array that participates in the differentiation tape.

    Storage defaults to float32; pass `dtype=np.float64` for finite-difference
    oracles. Results of operations keep the dtype numpy gives them.
    """

    data: np.ndarray
    grad: Optional[np.ndarray]
    requires_grad: bool
    node_id: int
    name: Optional[str]

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=np.float32, name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)
        self.name = name
        self.op = 'leaf'
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardFn] = None

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> 'Tensor':
        return Tensor(self.data, dtype=None)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # Operators #

    def __add__(self, other) -> 'Tensor':
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> 'Tensor':
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other) -> 'Tensor':
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __mul__(self, other) -> 'Tensor':
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> 'Tensor':
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def reshape(self, *shape: int) -> 'Tensor':
        return reshape(self, shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return tensor_mean(self, axis=axis, keepdims=keepdims)


class Tape:
    """
    Recorded operations reachable from a root, in topological order.
    """

    nodes: List[Tensor]

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> 'Tape':
        """
        Collect every node the root depends on that requires a gradient.
        """

        seen: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.node_id in seen or not node.requires_grad:
                continue
            seen[node.node_id] = node
            stack.extend(node._parents)

        nodes = sorted(seen.values(), key=lambda n: n.node_id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients from `root` to all leaves, visiting each node once.
        """

        pending: Dict[int, np.ndarray] = {
            root.node_id: np.ones_like(root.data) if seed is None else seed}

        for node in reversed(self.nodes):
            grad = pending.pop(node.node_id, None)
            if grad is None:
                continue

            if node.is_leaf:
                grad = grad.astype(node.dtype, copy=False)
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue

            parent_grads = node._backward(grad)
            for parent, parent_grad in zip(node._parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + parent_grad
                else:
                    pending[parent.node_id] = parent_grad


def backward(loss: Tensor) -> Tape:
    """
    Populate `.grad` on every leaf reachable from a scalar loss.
    """

    if loss.ndim != 0:
        raise TensorError(error_dict={
            'error': 'non_scalar_loss',
            'shape': list(loss.shape),
        })

    tape = Tape.record(loss)
    tape.backward(loss)
    return tape


# Helpers #

def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data, dtype=None)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sum out the axes numpy broadcasting added or stretched.
    """

    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise #

def add(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else np.float32)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as error:
        raise TensorError.shape_mismatch('add', a.shape, b.shape) from error

    def _backward(grad):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)

    return _result(data, (a, b), _backward, 'add')


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda grad: (-grad,), 'neg')


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else np.float32)
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as error:
        raise TensorError.shape_mismatch('mul', a.shape, b.shape) from error

    def _backward(grad):
        grad_a = unbroadcast(grad * b.data, a.shape) if a.requires_grad else None
        grad_b = unbroadcast(grad * a.data, b.shape) if b.requires_grad else None
        return grad_a, grad_b

    return _result(data, (a, b), _backward, 'mul')


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _result(a.data * active, (a,), lambda grad: (grad * active,), 'relu')


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """
    Replace positions where `mask` is true by a constant (e.g. -inf before softmax).
    """

    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError as error:
        raise TensorError.shape_mismatch('masked_fill', a.shape, np.shape(mask)) from error
    data = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def _backward(grad):
        return (np.where(mask, 0, grad).astype(grad.dtype, copy=False),)

    return _result(data, (a,), _backward, 'masked_fill')


# Shapes #

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.
    """

    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError.shape_mismatch('matmul', a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as error:
        raise TensorError.shape_mismatch('matmul', a.shape, b.shape) from error

    def _backward(grad):
        grad_a = grad_b = None
        if a.requires_grad:
            grad_a = unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            grad_b = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape)
        return grad_a, grad_b

    return _result(data, (a, b), _backward, 'matmul')


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda grad: (np.transpose(grad, inverse),), 'transpose')


def swapaxes(a: Tensor, first: int, second: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[first], axes[second] = axes[second], axes[first]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = shape[0]
    try:
        data = a.data.reshape(shape)
    except ValueError as error:
        raise TensorError.shape_mismatch('reshape', a.shape, shape) from error
    return _result(data, (a,), lambda grad: (grad.reshape(a.shape),), 'reshape')


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as error:
        raise TensorError.shape_mismatch('broadcast_to', a.shape, shape) from error
    return _result(data, (a,), lambda grad: (unbroadcast(grad, a.shape),), 'broadcast_to')


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as error:
        raise TensorError.shape_mismatch('concat', tensors[0].shape, tensors[-1].shape) from error
    sizes = [t.shape[axis] for t in tensors]
    cuts = list(itertools.accumulate(sizes))[:-1]

    def _backward(grad):
        return tuple(np.split(grad, cuts, axis=axis))

    return _result(data, tuple(tensors), _backward, 'concat')


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return _result(np.asarray(data), (a,), _backward, 'sum')


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """
    Row lookup; gradients scatter-add back into the table.
    """

    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TensorError(error_dict={
            'error': 'index_out_of_range',
            'op': 'embedding',
            'rows': weight.shape[0],
            'max_index': int(ids.max()),
        })

    def _backward(grad):
        table = np.zeros_like(weight.data)
        np.add.at(table, ids.reshape(-1), grad.reshape(-1, weight.shape[-1]))
        return (table,)

    return _result(weight.data[ids], (weight,), _backward, 'embedding')


# Normalization #

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """
    Max-subtracted softmax. Entries equal to -inf receive zero weight; a
    slice with no finite entry is rejected.
    """

    peak = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(peak)):
        raise TensorError(error_dict={'error': 'all_masked_row', 'op': 'softmax'})
    weights = np.exp(x.data - peak)
    weights /= weights.sum(axis=axis, keepdims=True)

    def _backward(grad):
        inner = (grad * weights).sum(axis=axis, keepdims=True)
        return (weights * (grad - inner),)

    return _result(weights, (x,), _backward, 'softmax')


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Per-vector normalisation over the last axis, then affine.
    """

    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise TensorError(error_dict={'error': 'empty_feature_axis', 'op': 'layer_norm'})
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorError.shape_mismatch('layer_norm', x.shape, gain.shape)
    if eps <= 0:
        raise TensorError.invalid_value('eps', eps, 'must be positive')

    wide = x.data.astype(np.float64)
    mu = wide.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(((wide - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = (wide - mu) * rstd
    out = (normed * gain.data + bias.data).astype(x.dtype)

    def _backward(grad):
        wide_grad = grad.astype(np.float64)
        grad_normed = wide_grad * gain.data
        grad_x = rstd * (grad_normed
                         - grad_normed.mean(axis=-1, keepdims=True)
                         - normed * (grad_normed * normed).mean(axis=-1, keepdims=True))
        lead = tuple(range(grad.ndim - 1))
        grad_gain = (wide_grad * normed).sum(axis=lead)
        grad_bias = wide_grad.sum(axis=lead)
        return (grad_x.astype(x.dtype), grad_gain.astype(gain.dtype), grad_bias.astype(bias.dtype))

    return _result(out, (x, gain, bias), _backward, 'layer_norm')


def dropout(x: Tensor, rate: float, mode, rng: np.random.Generator, training: bool = True) -> Tensor:
    """
    Inverted dropout. Element-wise mode draws an independent keep mask per
    element; variational mode draws one feature mask per sequence and shares it
    across every timestep (the second-to-last axis).
    """

    if not 0.0 <= rate < 1.0:
        raise TensorError.invalid_value('rate', rate, 'dropout rate must satisfy 0 <= rate < 1')
    if not training or rate == 0.0:
        return x

    mode = DropoutMode(mode)
    if mode is DropoutMode.VARIATIONAL and x.ndim >= 2:
        mask_shape = x.shape[:-2] + (1, x.shape[-1])
    else:
        mask_shape = x.shape
    keep = (rng.random(mask_shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)

    return _result(x.data * keep, (x,), lambda grad: (grad * keep,), 'dropout')


# Losses #

def cross_entropy_label_smoothed(logits: Tensor, targets: np.ndarray, epsilon: float = 0.1,
                                 pad_id: Optional[int] = 0) -> Tensor:
    """
    Mean over non-pad rows of -sum_k q_k log p_k with q = (1-eps) onehot + eps/V.
    """

    if logits.ndim != 2:
        raise TensorError.shape_mismatch('cross_entropy', logits.shape, np.shape(targets))
    rows, vocab = logits.shape
    if vocab == 0:
        raise TensorError(error_dict={'error': 'empty_vocabulary', 'op': 'cross_entropy'})
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != rows:
        raise TensorError.shape_mismatch('cross_entropy', logits.shape, targets.shape)
    if rows and (targets.min() < 0 or targets.max() >= vocab):
        raise TensorError(error_dict={'error': 'target_out_of_range', 'op': 'cross_entropy'})

    counted = np.ones(rows, dtype=bool) if pad_id is None else targets != pad_id
    count = int(counted.sum())
    if count == 0:
        raise TensorError(error_dict={'error': 'all_positions_padded', 'op': 'cross_entropy'})

    wide = logits.data.astype(np.float64)
    shifted = wide - wide.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    smooth = np.full((rows, vocab), epsilon / vocab)
    smooth[np.arange(rows), targets] += 1.0 - epsilon
    per_row = -(smooth * log_probs).sum(axis=-1)
    loss = per_row[counted].sum() / count

    def _backward(grad):
        grad_logits = (np.exp(log_probs) - smooth) * (counted[:, None] / count) * float(grad)
        return (grad_logits.astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, 'cross_entropy')


# Gradient checking #

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3) -> np.ndarray:
    """
    Central finite differences of a scalar-valued closure w.r.t. one tensor.
    """

    estimate = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        upper = float(fn().data)
        flat[index] = original - h
        lower = float(fn().data)
        flat[index] = original
        estimate.reshape(-1)[index] = (upper - lower) / (2 * h)
    return estimate


def gradient_check(fn: Callable[[], Tensor], tensors: Iterable[Tensor], h: float = 1e-3) -> float:
    """
    Largest relative error between analytic and finite-difference gradients.
    """

    tensors = list(tensors)
    for tensor in tensors:
        tensor.grad = None
    backward(fn())

    worst = 0.0
    for tensor in tensors:
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        numeric = numerical_gradient(fn, tensor, h)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
