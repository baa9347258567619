# Copyright 2024 D-Wave
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Dense rank-4 tensors, small-matrix LU and a reverse-mode gradient tape.

Every value is a :class:`Tensor` of shape ``(B, C, H, W)`` holding 64-bit floats.
Vectors and matrices are embedded as degenerate shapes: a ``C_out x C_in`` weight
is ``(1, 1, C_out, C_in)``, a per-channel vector is ``(1, C, 1, 1)`` and a scalar
is ``(1, 1, 1, 1)``. Elementwise operations require equal shapes or a scalar
operand; any other broadcast goes through :func:`expand`.

Operations record themselves on the active :class:`Tape` (see :func:`recording`)
when at least one operand is tracked, i.e. is a :class:`Parameter` or was watched
or produced on that tape.
"""
from __future__ import annotations

import contextlib
import logging
import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg, special

from app_configs import PIVOT_FLOOR
from src.errors import DomainError, NonFiniteError, ShapeError, SingularMatrixError, TapeError

logger = logging.getLogger(__name__)

Shape = tuple[int, int, int, int]
Vjp = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]
Operand = Union["Tensor", float, int]

SCALAR_SHAPE: Shape = (1, 1, 1, 1)

ELEMENTWISE_KINDS = (
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "negate",
    "tanh",
    "relu",
)


def _check_finite(op: str, array: np.ndarray) -> None:
    if not np.isfinite(array).all():
        position = tuple(int(i) for i in np.argwhere(~np.isfinite(array))[0])
        raise NonFiniteError(f"{op} produced a non-finite value at index {position}")


class Tensor:
    """An immutable rank-4 array of 64-bit floats, optionally bound to a tape node."""

    __slots__ = ("_data", "_tape", "_node")

    def __init__(self, data):
        array = np.array(data, dtype=np.float64)
        if array.ndim != 4:
            raise ShapeError(f"tensors are rank 4, got shape {array.shape}")
        _check_finite("tensor", array)
        array.setflags(write=False)
        self._data = array
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, array: np.ndarray, tape: Tape | None = None, node: int | None = None) -> Tensor:
        tensor = Tensor.__new__(Tensor)
        array.setflags(write=False)
        tensor._data = array
        tensor._tape = tape
        tensor._node = node
        return tensor

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> Shape:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def tape_id(self) -> int | None:
        """Node index on the active tape, or None when the tensor is not tracked there."""
        tape = active_tape()
        if tape is None:
            return None
        return tape.node_of(self)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return negate(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Parameter(Tensor):
    """A named trainable tensor. Its values change only through :meth:`assign`."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data)
        self.name = name

    def assign(self, data) -> None:
        """Replace the values, keeping the shape."""
        array = np.array(data, dtype=np.float64)
        if array.shape != self.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {array.shape} to {self.shape}")
        _check_finite(self.name, array)
        array.setflags(write=False)
        self._data = array

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    vjp: Vjp | None
    shape: Shape
    parameter: Parameter | None = None


class Tape:
    """Append-only record of operations for one forward/backward pass.

    A tape is single-owner: build it with :func:`recording`, run the forward
    computation, then call :meth:`backward` or :meth:`gradient` once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, int] = {}
        self._watched: list[Tensor] = []

    def watch(self, tensor: Tensor) -> int:
        """Track ``tensor`` as a leaf so gradients flow back to it."""
        if tensor._tape is self:
            return tensor._node
        key = id(tensor)
        if key not in self._leaves:
            parameter = tensor if isinstance(tensor, Parameter) else None
            self.nodes.append(_Node("leaf", (), None, tensor.shape, parameter))
            self._leaves[key] = len(self.nodes) - 1
            # Keeps ids unique for the lifetime of the tape.
            self._watched.append(tensor)
        return self._leaves[key]

    def node_of(self, tensor: Tensor) -> int | None:
        if tensor._tape is self:
            return tensor._node
        return self._leaves.get(id(tensor))

    def record(
        self, op: str, inputs: Sequence[Tensor], array: np.ndarray, vjp: Vjp
    ) -> Tensor:
        ids = []
        for tensor in inputs:
            if isinstance(tensor, Parameter):
                ids.append(self.watch(tensor))
            else:
                ids.append(self.node_of(tensor))
        if all(i is None for i in ids):
            return Tensor._wrap(array)
        self.nodes.append(_Node(op, tuple(ids), vjp, array.shape))
        return Tensor._wrap(array, self, len(self.nodes) - 1)

    def _accumulate(self, root: Tensor) -> list[np.ndarray | None]:
        root_id = self.node_of(root)
        if root_id is None:
            raise TapeError("backward root was not recorded on this tape")
        if root.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self.nodes)
        adjoints[root_id] = np.ones(root.shape)
        for index in range(root_id, -1, -1):
            adjoint = adjoints[index]
            node = self.nodes[index]
            if adjoint is None or node.vjp is None:
                continue
            for input_id, grad in zip(node.inputs, node.vjp(adjoint)):
                if input_id is None or grad is None:
                    continue
                if adjoints[input_id] is None:
                    adjoints[input_id] = grad
                else:
                    adjoints[input_id] = adjoints[input_id] + grad
        self.grads = {i: np.array(g) for i, g in enumerate(adjoints) if g is not None}
        return adjoints

    def gradient(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of ``root`` with respect to each tensor in ``wrt`` (zeros if unreachable)."""
        adjoints = self._accumulate(root)
        result = []
        for tensor in wrt:
            node = self.node_of(tensor)
            if node is None or adjoints[node] is None:
                result.append(np.zeros(tensor.shape))
            else:
                result.append(np.array(adjoints[node]))
        return result

    def backward(self, root: Tensor) -> dict[str, np.ndarray]:
        """Adjoints of ``root`` for every parameter used on this tape, keyed by name."""
        adjoints = self._accumulate(root)
        grads = {}
        for index, node in enumerate(self.nodes):
            if node.parameter is None:
                continue
            adjoint = adjoints[index]
            grads[node.parameter.name] = (
                np.zeros(node.shape) if adjoint is None else np.array(adjoint)
            )
        return grads


def backward(root: Tensor, tape: Tape) -> dict[str, np.ndarray]:
    """Reverse-accumulate ``root`` over ``tape`` and return per-parameter adjoints."""
    return tape.backward(root)


_state = threading.local()


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record operations on ``tape`` (a fresh one by default) for the duration of the block."""
    tape = Tape() if tape is None else tape
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


@contextlib.contextmanager
def paused() -> Iterator[None]:
    """Evaluate without recording, e.g. for inverse passes and finite differences."""
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _result(op: str, inputs: Sequence[Tensor], array: np.ndarray, vjp: Vjp) -> Tensor:
    _check_finite(op, array)
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(array)
    return tape.record(op, inputs, array, vjp)


#########################
# Construction helpers  #
#########################


def as_tensor(value: Operand | np.ndarray) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if np.isscalar(value):
        return Tensor._wrap(np.full(SCALAR_SHAPE, float(value)))
    return Tensor(value)


def constant(array) -> Tensor:
    return Tensor(array)


def zeros(shape: Shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(shape: Shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))


def scalar(value: float) -> Tensor:
    return Tensor._wrap(np.full(SCALAR_SHAPE, float(value)))


#########################
# Elementwise arithmetic #
#########################


def _binary_operands(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != SCALAR_SHAPE and b.shape != SCALAR_SHAPE:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    return _result(
        "sub",
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    av, bv = a.data, b.data
    return _result(
        "mul",
        (a, b),
        av * bv,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b)
    av, bv = a.data, b.data
    if (bv == 0).any():
        position = tuple(int(i) for i in np.argwhere(bv == 0)[0])
        raise DomainError(f"div by zero at index {position}")
    return _result(
        "div",
        (a, b),
        av / bv,
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.data
    if (av <= 0).any():
        position = tuple(int(i) for i in np.argwhere(av <= 0)[0])
        raise DomainError(f"log of non-positive value {av[position]:.3e} at index {position}")
    return _result("log", (a,), np.log(av), lambda g: (g / av,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    av = a.data
    return _result("softplus", (a,), np.logaddexp(0.0, av), lambda g: (g * special.expit(av),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(a))`` evaluated as ``-softplus(-a)``."""
    return negate(softplus(negate(a)))


def negate(a: Tensor) -> Tensor:
    return _result("negate", (a,), -a.data, lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    av = a.data
    return _result("relu", (a,), np.maximum(av, 0.0), lambda g: (g * (av > 0),))


_UNARY = {
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "negate": negate,
    "tanh": tanh,
    "relu": relu,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Operand | None = None) -> Tensor:
    """Apply the pointwise operation named ``kind`` (one of ``ELEMENTWISE_KINDS``)."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs a second operand")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def logsumexp(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise ``log(sum_i exp(t_i))`` over equally shaped tensors."""
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("logsumexp operands must share a shape")
    stacked = np.stack([t.data for t in tensors])
    peak = stacked.max(axis=0)
    out = peak + np.log(np.exp(stacked - peak).sum(axis=0))

    def vjp(g):
        return tuple(g * np.exp(s - out) for s in stacked)

    return _result("logsumexp", tuple(tensors), out, vjp)


#########################
# Reductions, reshaping #
#########################


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(
        "sum_all", (x,), x.data.sum().reshape(SCALAR_SHAPE), lambda g: (np.broadcast_to(g, shape),)
    )


def sum_axes(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Sum over ``axes`` keeping them as extent-1 dimensions."""
    shape = x.shape
    axes = tuple(axes)
    return _result(
        "sum_axes",
        (x,),
        x.data.sum(axis=axes, keepdims=True),
        lambda g: (np.broadcast_to(g, shape),),
    )


def per_sample_sum(x: Tensor) -> Tensor:
    """Sum each batch entry to shape ``(B, 1, 1, 1)``."""
    return sum_axes(x, (1, 2, 3))


def expand(x: Tensor, shape: Shape) -> Tensor:
    """Tile extent-1 dimensions of ``x`` up to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes = []
    for axis, (have, want) in enumerate(zip(x.shape, shape)):
        if have != want:
            if have != 1:
                raise ShapeError(f"cannot expand {x.shape} to {shape}")
            axes.append(axis)
    axes = tuple(axes)
    return _result(
        "expand",
        (x,),
        np.broadcast_to(x.data, shape).copy(),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def channel_mean(x: Tensor) -> Tensor:
    """Average over channels: ``out[b, 0, i, j] = mean_c x[b, c, i, j]``."""
    shape = x.shape
    channels = shape[1]
    return _result(
        "channel_mean",
        (x,),
        x.data.sum(axis=1, keepdims=True) / channels,
        lambda g: (np.broadcast_to(g / channels, shape),),
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return _result("slice_channels", (x,), x.data[:, start:stop].copy(), vjp)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(
        "concat_channels", tuple(tensors), np.concatenate([t.data for t in tensors], axis=1), vjp
    )


def _squeeze_array(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    a = a.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return a.reshape(b, c * 4, h // 2, w // 2)


def _unsqueeze_array(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    a = a.reshape(b, c // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return a.reshape(b, c // 4, h * 2, w * 2)


def squeeze2x2(x: Tensor) -> Tensor:
    """Space-to-channel rearrangement ``(B, C, H, W) -> (B, 4C, H/2, W/2)``."""
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even height and width, got {h}x{w}")
    return _result(
        "squeeze", (x,), _squeeze_array(x.data), lambda g: (_unsqueeze_array(g),)
    )


def unsqueeze2x2(x: Tensor) -> Tensor:
    """Exact inverse of :func:`squeeze2x2`."""
    if x.shape[1] % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {x.shape[1]}")
    return _result(
        "unsqueeze", (x,), _unsqueeze_array(x.data), lambda g: (_squeeze_array(g),)
    )


#########################
# Channel mixing        #
#########################


def _weight_tensor(weight) -> Tensor:
    if isinstance(weight, SquareMatrix):
        return Tensor(weight.entries[None, None])
    if isinstance(weight, np.ndarray) and weight.ndim == 2:
        return Tensor(weight[None, None])
    return as_tensor(weight)


def conv1x1(x: Tensor, weight, bias: Tensor | None = None) -> Tensor:
    """Per-position channel mixing ``y[b, :, i, j] = W x[b, :, i, j] (+ bias)``.

    Args:
        x: Input of shape ``(B, C_in, H, W)``.
        weight: ``(1, 1, C_out, C_in)`` tensor, a 2D array or a :class:`SquareMatrix`.
        bias: Optional ``(1, C_out, 1, 1)`` tensor.

    Returns:
        Tensor: Output of shape ``(B, C_out, H, W)``.
    """
    weight = _weight_tensor(weight)
    w = weight.data[0, 0]
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1 weight {w.shape} does not match {x.shape[1]} input channels")
    xv = x.data
    out = np.einsum("oc,bchw->bohw", w, xv)
    if bias is None:
        return _result(
            "conv1x1",
            (x, weight),
            out,
            lambda g: (
                np.einsum("oc,bohw->bchw", w, g),
                np.einsum("bohw,bchw->oc", g, xv)[None, None],
            ),
        )
    if bias.shape != (1, w.shape[0], 1, 1):
        raise ShapeError(f"conv1x1 bias {bias.shape} does not match {w.shape[0]} output channels")
    return _result(
        "conv1x1",
        (x, weight, bias),
        out + bias.data,
        lambda g: (
            np.einsum("oc,bohw->bchw", w, g),
            np.einsum("bohw,bchw->oc", g, xv)[None, None],
            g.sum(axis=(0, 2, 3)).reshape(bias.shape),
        ),
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded ("same") convolution with an odd ``(C_out, C_in, k, k)`` kernel."""
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0 or c_in != x.shape[1]:
        raise ShapeError(f"conv2d kernel {weight.shape} does not fit input {x.shape}")
    pad = k // 2
    _, _, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    kernel = weight.data
    out = np.einsum("bchwij,ocij->bohw", windows, kernel)
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        grad_padded = np.zeros(padded.shape)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + h, j : j + w] += np.einsum(
                    "bohw,oc->bchw", g, kernel[:, :, i, j]
                )
        grads = (
            grad_padded[:, :, pad : pad + h, pad : pad + w],
            np.einsum("bohw,bchwij->ocij", g, windows),
        )
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)).reshape(bias.shape),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", inputs, out, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading extents must match."""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _result(
        "matmul",
        (a, b),
        np.einsum("bpik,bpkm->bpim", av, bv),
        lambda g: (
            np.einsum("bpim,bpkm->bpik", g, bv),
            np.einsum("bpik,bpim->bpkm", av, g),
        ),
    )


#########################
# Patchwise attention   #
#########################


def gather_positions(x: Tensor, index: np.ndarray) -> Tensor:
    """Collect spatial positions: ``(B, C, H, W) -> (B, C, P, m)`` for a ``(P, m)`` flat index."""
    b, c, h, w = x.shape
    index = np.asarray(index)
    flat = x.data.reshape(b, c, h * w)

    def vjp(g):
        grad = np.zeros((b, c, h * w))
        grad[:, :, index] = g
        return (grad.reshape(b, c, h, w),)

    return _result("gather_positions", (x,), flat[:, :, index], vjp)


def scatter_positions(rows: Tensor, index: np.ndarray, spatial: tuple[int, int]) -> Tensor:
    """Inverse of :func:`gather_positions`; positions not in ``index`` are zero."""
    b, c, _, _ = rows.shape
    h, w = spatial
    index = np.asarray(index)
    out = np.zeros((b, c, h * w))
    out[:, :, index] = rows.data

    def vjp(g):
        return (g.reshape(b, c, h * w)[:, :, index],)

    return _result("scatter_positions", (rows,), out.reshape(b, c, h, w), vjp)


def patch_scores(q: Tensor, k: Tensor) -> Tensor:
    """Per-patch dot products ``S[b, p, i, j] = sum_c q[b, c, p, i] k[b, c, p, j]``."""
    if q.shape != k.shape:
        raise ShapeError(f"query {q.shape} and key {k.shape} differ")
    qv, kv = q.data, k.data
    return _result(
        "patch_scores",
        (q, k),
        np.einsum("bcpi,bcpj->bpij", qv, kv),
        lambda g: (
            np.einsum("bpij,bcpj->bcpi", g, kv),
            np.einsum("bpij,bcpi->bcpj", g, qv),
        ),
    )


def patch_apply(weights: Tensor, values: Tensor) -> Tensor:
    """Per-patch mixing ``y[b, c, p, i] = sum_j W[b, p, i, j] v[b, c, p, j]``."""
    wb, wp, wm, wm2 = weights.shape
    vb, _, vp, vm = values.shape
    if (wb, wp, wm, wm2) != (vb, vp, vm, vm):
        raise ShapeError(f"weights {weights.shape} do not fit values {values.shape}")
    wv, vv = weights.data, values.data
    return _result(
        "patch_apply",
        (weights, values),
        np.einsum("bpij,bcpj->bcpi", wv, vv),
        lambda g: (
            np.einsum("bcpi,bcpj->bpij", g, vv),
            np.einsum("bpij,bcpi->bcpj", wv, g),
        ),
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = x.data - x.data.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=3, keepdims=True)
    return _result(
        "softmax_rows",
        (x,),
        out,
        lambda g: (out * (g - (g * out).sum(axis=3, keepdims=True)),),
    )


def block_logdet(blocks: Tensor, head: int | None = None) -> Tensor:
    """``log|det|`` of every ``(m, m)`` block of a ``(B, P, m, m)`` tensor, shape ``(B, P, 1, 1)``.

    The adjoint of a block is ``g * inv(W)^T``.

    Raises:
        SingularMatrixError: A block has a pivot below the singularity floor; the
            error names the patch (and head, when given).
    """
    b, p, m, m2 = blocks.shape
    if m != m2:
        raise ShapeError(f"blocks must be square, got {blocks.shape}")
    out = np.empty((b, p, 1, 1))
    factors = {}
    for i in range(b):
        for j in range(p):
            matrix = SquareMatrix(blocks.data[i, j])
            try:
                result = lu_logdet_solve(matrix)
            except SingularMatrixError as err:
                raise SingularMatrixError(err.pivot, err.magnitude, patch=j, head=head) from err
            out[i, j, 0, 0] = result.logabsdet
            factors[i, j] = matrix.factorize()

    def vjp(g):
        grad = np.empty((b, p, m, m))
        identity = np.eye(m)
        for (i, j), factor in factors.items():
            grad[i, j] = g[i, j, 0, 0] * linalg.lu_solve(factor, identity).T
        return (grad,)

    return _result("block_logdet", (blocks,), out, vjp)


#########################
# Small-matrix algebra  #
#########################


@dataclass
class SquareMatrix:
    """An ``n x n`` matrix with a cached partial-pivoting LU factorization."""

    entries: np.ndarray
    _lu: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ShapeError(f"square matrix expected, got shape {entries.shape}")
        _check_finite("matrix", entries)
        entries.setflags(write=False)
        self.entries = entries

    @classmethod
    def identity(cls, n: int) -> SquareMatrix:
        return cls(np.eye(n))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def factorize(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the packed ``(lu, piv)`` factors, computing them once.

        Raises:
            SingularMatrixError: A pivot has magnitude below ``PIVOT_FLOOR``.
        """
        if self._lu is None:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                lu, piv = linalg.lu_factor(self.entries)
            pivots = np.abs(np.diag(lu))
            below = np.flatnonzero(pivots < PIVOT_FLOOR)
            if below.size:
                raise SingularMatrixError(int(below[0]), float(pivots[below[0]]))
            self._lu = (lu, piv)
        return self._lu

    def row_permutation(self) -> np.ndarray:
        """Rows of the matrix in the order the factorization visits them."""
        _, piv = self.factorize()
        rows = np.arange(self.n)
        for i, p in enumerate(piv):
            rows[i], rows[p] = rows[p], rows[i]
        return rows

    def reconstruct(self) -> np.ndarray:
        """Multiply the factors back together, ``P L U``."""
        lu, _ = self.factorize()
        lower = np.tril(lu, -1) + np.eye(self.n)
        upper = np.triu(lu)
        out = np.empty_like(lu)
        out[self.row_permutation()] = lower @ upper
        return out


class LuResult(NamedTuple):
    """Sign and log-magnitude of a determinant, plus an optional linear solve."""

    sign: float
    logabsdet: float
    solution: np.ndarray | None


def lu_logdet_solve(matrix: SquareMatrix, rhs: np.ndarray | None = None) -> LuResult:
    """Determinant sign, ``log|det|`` and optionally the solution of ``matrix @ sol = rhs``.

    Args:
        matrix: The matrix to factorize (partial pivoting).
        rhs: Optional ``n`` or ``n x k`` right-hand side.

    Returns:
        LuResult: ``(sign, logabsdet, solution)``.
    """
    lu, piv = matrix.factorize()
    diagonal = np.diag(lu)
    swaps = int(np.count_nonzero(piv != np.arange(matrix.n)))
    sign = float(np.prod(np.sign(diagonal))) * (-1.0) ** swaps
    logabsdet = float(np.log(np.abs(diagonal)).sum())
    solution = None
    if rhs is not None:
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != matrix.n:
            raise ShapeError(f"right-hand side has {rhs.shape[0]} rows, matrix order is {matrix.n}")
        solution = linalg.lu_solve((lu, piv), rhs)
    return LuResult(sign, logabsdet, solution)
