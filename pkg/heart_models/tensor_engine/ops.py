#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

"""Primitive ops with their backward rules.

Every op computes in float64 and rounds the result to the active dtype.
Backward closures receive the upstream gradient as an array and return one
gradient (or ``None``) per input.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from heart_models.errors import ConformanceError
from heart_models.tensor_engine.graph import Tensor, constant, emit

ArrayLike = Union[Tensor, np.ndarray, float, int]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


def _f64(tensor: Tensor) -> np.ndarray:
    return tensor.data.astype(np.float64)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ConformanceError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast.") from e


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _index_array(op: str, indices, n_rows: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ConformanceError(f"{op}: row index out of range for {n_rows} rows.")
    return idx


def scatter_add_rows(indices: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """Deterministic ``out[indices[i]] += values[i]`` in float64 (sorted segment sums)."""
    out = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    if indices.size == 0:
        return out
    order = np.argsort(indices, kind="stable")
    sorted_idx = indices[order]
    starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
    out[sorted_idx[starts]] = np.add.reduceat(values[order].astype(np.float64), starts, axis=0)
    return out


# --- Linear algebra ---


def matmul(a: ArrayLike, b: ArrayLike, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2D operands, accumulated in float64."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ConformanceError(f"matmul expects 2D operands, got {a.shape} and {b.shape}.")
    inner = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner:
        suffix = "^T" if transpose_b else ""
        raise ConformanceError(f"matmul inner dimensions differ: {a.shape} x {b.shape}{suffix}.")
    a64, b64 = _f64(a), _f64(b)
    out = a64 @ (b64.T if transpose_b else b64)

    def backward(grad):
        if transpose_b:
            return grad @ b64, grad.T @ a64
        return grad @ b64.T, a64.T @ grad

    return emit("matmul", (a, b), out, backward)


# --- Elementwise ---


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    out = _f64(a) + _f64(b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return emit("add", (a, b), out, backward)


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    out = _f64(a) * factor

    def backward(grad):
        return (grad * factor,)

    return emit("scale", (a,), out, backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    a64, b64 = _f64(a), _f64(b)

    def backward(grad):
        return _unbroadcast(grad * b64, a.shape), _unbroadcast(grad * a64, b.shape)

    return emit("mul", (a, b), a64 * b64, backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    a64, b64 = _f64(a), _f64(b)
    out = a64 / b64

    def backward(grad):
        return (
            _unbroadcast(grad / b64, a.shape),
            _unbroadcast(-grad * a64 / (b64 * b64), b.shape),
        )

    return emit("div", (a, b), out, backward)


def gelu(x: ArrayLike) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    x = _as_tensor(x)
    x64 = _f64(x)
    cdf = 0.5 * (1.0 + special.erf(x64 / _SQRT2))
    out = x64 * cdf

    def backward(grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x64 * x64)
        return (grad * (cdf + x64 * pdf),)

    return emit("gelu", (x,), out, backward)


# --- Normalization and probabilities ---


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ConformanceError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature width {width}."
        )
    x64 = _f64(x)
    centered = x64 - x64.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    g64 = _f64(gamma)
    out = xhat * g64 + _f64(beta)

    def backward(grad):
        gxhat = grad * g64
        dx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_grad = grad.reshape(-1, width)
        return dx, (flat_grad * xhat.reshape(-1, width)).sum(axis=0), flat_grad.sum(axis=0)

    return emit("layer_norm", (x, gamma, beta), out, backward)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ConformanceError(f"{op}: axis {axis} invalid for shape {x.shape}.")
    return axis % x.ndim


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis("softmax", x, axis)
    x64 = _f64(x)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(grad):
        return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)

    return emit("softmax", (x,), y, backward)


def log_softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis("log_softmax", x, axis)
    x64 = _f64(x)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(grad):
        return (grad - np.exp(out) * grad.sum(axis=axis, keepdims=True),)

    return emit("log_softmax", (x,), out, backward)


# --- Row movement ---


def gather_rows(x: ArrayLike, indices) -> Tensor:
    """Select rows ``x[indices]``; repeated indices are allowed."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ConformanceError("gather_rows needs at least a 1D operand.")
    idx = _index_array("gather_rows", indices, x.shape[0])
    out = x.data[idx]

    def backward(grad):
        return (scatter_add_rows(idx, grad, x.shape[0]),)

    return emit("gather_rows", (x,), out, backward)


def scatter_rows(x: ArrayLike, indices, n_rows: int) -> Tensor:
    """Place row ``i`` of ``x`` at ``indices[i]`` of an ``n_rows`` zero tensor."""
    x = _as_tensor(x)
    idx = _index_array("scatter_rows", indices, n_rows)
    if idx.size != x.shape[0]:
        raise ConformanceError(f"scatter_rows: {idx.size} indices for {x.shape[0]} rows.")
    if np.unique(idx).size != idx.size:
        raise ConformanceError("scatter_rows: indices must be unique.")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=np.float64)
    out[idx] = x.data

    def backward(grad):
        return (grad[idx],)

    return emit("scatter_rows", (x,), out, backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ConformanceError("concat needs at least one operand.")
    axis = _check_axis("concat", parts[0], axis)
    for part in parts[1:]:
        if part.ndim != parts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(part.shape, parts[0].shape)) if i != axis
        ):
            raise ConformanceError(f"concat: shape {part.shape} does not conform to {parts[0].shape} on axis {axis}.")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(grad):
        return tuple(
            np.take(grad, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return emit("concat", parts, out, backward)


def slice_axis(x: ArrayLike, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    x = _as_tensor(x)
    axis = _check_axis("slice", x, axis)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ConformanceError(f"slice: [{start}, {stop}) outside axis {axis} of extent {x.shape[axis]}.")
    selector = [slice(None)] * x.ndim
    selector[axis] = slice(start, stop)
    selector = tuple(selector)

    def backward(grad):
        full = np.zeros(x.shape, dtype=np.float64)
        full[selector] = grad
        return (full,)

    return emit("slice", (x,), x.data[selector], backward)


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ConformanceError(f"reshape: cannot view {x.shape} as {shape}.")

    def backward(grad):
        return (grad.reshape(x.shape),)

    return emit("reshape", (x,), x.data.reshape(shape), backward)


# --- Reductions and losses ---


def reduce_sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis("reduce_sum", x, axis)
    out = _f64(x).sum(axis=axis)

    def backward(grad):
        if axis is None:
            return (np.broadcast_to(grad, x.shape),)
        return (np.broadcast_to(np.expand_dims(grad, axis), x.shape),)

    return emit("reduce_sum", (x,), out, backward)


def mean_rows(x: ArrayLike) -> Tensor:
    """Row mean as ``(1/n)·1ᵀX``, a (1 × d) tensor."""
    x = _as_tensor(x)
    n = x.shape[0]
    return matmul(np.full((1, n), 1.0 / n), x)


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """Mean squared error over every element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ConformanceError(f"mse: shapes {pred.shape} and {target.shape} differ.")
    diff = _f64(pred) - _f64(target)
    count = max(diff.size, 1)
    out = np.array((diff * diff).sum() / count)

    def backward(grad):
        g = grad * (2.0 / count) * diff
        return g, -g

    return emit("mse", (pred, target), out, backward)
