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

"""Tensors, the recording graph and reverse-mode traversal.

A ``Graph`` is a tape: while it is the active graph (``with Graph() as g:``)
every primitive whose inputs require a gradient appends a ``Node`` holding the
op id, its inputs and a backward closure over the activations it saved.
``backward`` walks the tape once in reverse.
"""

import contextlib
import contextvars
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from heart_models.errors import NumericError, UsageError

logger = logging.getLogger(__name__)

_DTYPE = contextvars.ContextVar("heart_dtype", default=np.float32)
_DEBUG = contextvars.ContextVar(
    "heart_debug", default=os.getenv("HEART_DEBUG", "0") == "1"
)
_ACTIVE_GRAPH = contextvars.ContextVar("heart_active_graph", default=None)


def current_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def use_dtype(dtype) -> Iterator[None]:
    """Compute every primitive in ``dtype`` inside the block (float32 by default)."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def debug_enabled() -> bool:
    return _DEBUG.get()


@contextlib.contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Check every primitive output for NaN/Inf while the block is active."""
    token = _DEBUG.set(enabled)
    try:
        yield
    finally:
        _DEBUG.reset(token)


class Tensor:
    """Immutable dense array plus a ``requires_grad`` flag.

    Data is row-major in the active dtype. Tensors hash by identity so they can
    key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=current_dtype(), copy=True)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=current_dtype())
        array.setflags(write=False)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    node_id: int
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Graph:
    """Tape of primitive applications in topological (execution) order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.finalized = False
        self._produced: Dict[Tensor, Node] = {}
        self._token = None

    def __enter__(self) -> "Graph":
        if self.finalized:
            raise UsageError("A finalized graph cannot record again; create a new Graph.")
        if self._token is not None:
            raise UsageError("Graph is already active.")
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None
        self.finalized = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn) -> Node:
        node = Node(len(self.nodes), op, inputs, output, backward_fn)
        self.nodes.append(node)
        self._produced[output] = node
        return node

    def produced(self, tensor: Tensor) -> bool:
        return tensor in self._produced


def active_graph() -> Optional[Graph]:
    return _ACTIVE_GRAPH.get()


def emit(op: str, inputs: Tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    """Wrap a primitive's output and record it when any input requires a gradient."""
    out = np.asarray(out)
    if debug_enabled() and out.size and not np.all(np.isfinite(out)):
        raise NumericError(f"Non-finite output from op '{op}' (shape {out.shape}).")
    graph = _ACTIVE_GRAPH.get()
    needs_grad = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs_grad)
    if needs_grad:
        graph.record(op, inputs, result, backward_fn)
    return result


def backward(
    graph: Graph,
    loss: Tensor,
    wrt: Optional[Sequence[Tensor]] = None,
    allow_unused: bool = False,
) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` recorded on ``graph``.

    Returns a map tensor -> gradient array. With ``wrt`` given, every listed
    tensor must lie on a path to the loss unless ``allow_unused`` is set, in
    which case unreachable tensors get zeros.
    """
    if not graph.finalized:
        raise UsageError("Graph is still recording; leave the graph context before backward().")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}.")
    if not graph.produced(loss):
        raise UsageError("The loss tensor was not produced on this graph.")

    grads: Dict[Tensor, np.ndarray] = {loss: np.ones(loss.shape, dtype=np.float64)}
    visited = 0
    for node in reversed(graph.nodes):
        upstream = grads.pop(node.output, None)
        if upstream is None:
            continue
        visited += 1
        input_grads = node.backward(upstream)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise UsageError(
                    f"Backward rule of '{node.op}' produced shape {grad.shape} for an input of shape {tensor.shape}."
                )
            if tensor in grads:
                grads[tensor] = grads[tensor] + grad
            else:
                grads[tensor] = grad
    logger.debug(f"Backward visited {visited} of {len(graph.nodes)} nodes.")

    dtype = current_dtype()
    if wrt is None:
        return {t: g.astype(dtype) for t, g in grads.items() if not graph.produced(t)}

    result: Dict[Tensor, np.ndarray] = {}
    for tensor in wrt:
        if tensor in grads:
            result[tensor] = grads[tensor].astype(dtype)
        elif allow_unused:
            result[tensor] = np.zeros(tensor.shape, dtype=dtype)
        else:
            label = tensor.name or repr(tensor)
            raise UsageError(f"Gradient requested for '{label}', which is not on the graph of this loss.")
    return result
