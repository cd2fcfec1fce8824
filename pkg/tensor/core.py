"""
Tensor type and reverse-mode gradient tape.
Every differentiable operation records itself on the active tape.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import InternalError, UsageError

logger = logging.getLogger(__name__)

VjpFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def default_dtype() -> np.dtype:
    """Float type new tensors are created with on this thread."""
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def verification_mode() -> Iterator[None]:
    """Run the enclosed code with 64-bit tensors (for finite-difference checks)."""
    previous = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """
    Dense row-major array with an optional handle onto a gradient tape.

    Images and feature maps use (N, C, H, W) dims; the same type carries the
    vectors and matrices used by attention and the loss.
    """

    __slots__ = ("data", "tape_id", "name")

    # ndarray (op) Tensor must dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.tape_id: Optional[Tuple[int, int]] = None
        self.name = name

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an op result without changing its dtype."""
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(array)
        out.tape_id = None
        out.name = None
        return out

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    shape = dims

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{label})"

    # Operator sugar; the implementations live in tensor.ops.

    def __add__(self, other):
        from tensor import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from tensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from tensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from tensor import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from tensor import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from tensor import ops
        return ops.div(other, self)

    def __neg__(self):
        from tensor import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from tensor import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from tensor import ops
        return ops.index(self, index)


@dataclass
class TapeNode:
    """One recorded operation (or a watched leaf when vjp is None)."""
    kind: str
    inputs: Tuple[Optional[int], ...]
    dims: Tuple[int, ...]
    vjp: Optional[VjpFn] = None


@dataclass
class GradTape:
    """
    Ordered record of operations for reverse-mode differentiation.

    Use as a context manager; operations executed inside the block whose
    inputs descend from a watched tensor are recorded. One tape per thread.
    """
    nodes: List[TapeNode] = field(default_factory=list)
    gradients: Dict[int, np.ndarray] = field(default_factory=dict)
    key: int = field(default_factory=lambda: next(_tape_serial))

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    # ==================== RECORDING ====================

    def watch(self, *tensors: Tensor) -> None:
        """Register tensors as leaves whose gradients backward() fills in."""
        for t in tensors:
            t.tape_id = (self.key, len(self.nodes))
            self.nodes.append(TapeNode("leaf", (), t.dims))

    def handle(self, t: Tensor) -> Optional[int]:
        """Node index of a tensor on this tape, or None if it is untracked here."""
        if t.tape_id is not None and t.tape_id[0] == self.key:
            return t.tape_id[1]
        return None

    def record(self, kind: str, inputs: Sequence[Optional[int]], out: Tensor, vjp: VjpFn) -> Tensor:
        out.tape_id = (self.key, len(self.nodes))
        self.nodes.append(TapeNode(kind, tuple(inputs), out.dims, vjp))
        return out

    # ==================== BACKWARD ====================

    def backward(self, root: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate d(root)/d(node) back to every watched leaf.

        Args:
            root: Scalar tensor produced under this tape

        Returns:
            Map from leaf node index to gradient (zeros for untouched leaves)

        Raises:
            UsageError: If root is not a scalar or is not on this tape
            InternalError: If a node references an input recorded after it
        """
        if root.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got dims {root.dims}")
        start = self.handle(root)
        if start is None:
            raise UsageError("backward() root was not produced under this tape")

        grads: Dict[int, np.ndarray] = {start: np.ones(root.dims, dtype=root.dtype)}
        for idx in range(start, -1, -1):
            node = self.nodes[idx]
            g = grads.get(idx)
            if g is None or node.vjp is None:
                continue
            for src in node.inputs:
                if src is not None and src >= idx:
                    raise InternalError(f"tape cycle: node {idx} ({node.kind}) reads node {src}")
            for src, contribution in zip(node.inputs, node.vjp(g)):
                if src is None or contribution is None:
                    continue
                if contribution.shape != self.nodes[src].dims:
                    raise InternalError(
                        f"{node.kind} backward produced dims {contribution.shape} "
                        f"for input of dims {self.nodes[src].dims}"
                    )
                if src in grads:
                    grads[src] = grads[src] + contribution
                else:
                    grads[src] = contribution

        self.gradients = {
            idx: grads.get(idx, np.zeros(node.dims, dtype=root.dtype))
            for idx, node in enumerate(self.nodes)
            if node.kind == "leaf"
        }
        return self.gradients

    def gradient(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() root with respect to a watched tensor."""
        idx = self.handle(t)
        if idx is None or idx not in self.gradients:
            raise UsageError(f"{t!r} is not a watched leaf of this tape")
        return self.gradients[idx]


_tape_serial = itertools.count()


def _tape_stack() -> List[GradTape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(root: Tensor) -> Dict[int, np.ndarray]:
    """Run backward() on the innermost active tape."""
    tape = current_tape()
    if tape is None:
        raise UsageError("backward() called outside a GradTape block")
    return tape.backward(root)


# ==================== FAULT INJECTION ====================

_faults: Dict[str, float] = {}


@contextmanager
def planted_fault(kind: str, scale: float = 2.0) -> Iterator[None]:
    """
    Scale the backward of one operation kind while the block runs.
    Used to show the gradient suite catches a broken VJP.
    """
    _faults[kind] = scale
    logger.warning("planted backward fault in %s (scale %.2f)", kind, scale)
    try:
        yield
    finally:
        _faults.pop(kind, None)


def emit(kind: str, out: np.ndarray, inputs: Sequence[object], vjp: VjpFn) -> Tensor:
    """
    Wrap an op result and record it on the active tape when any input is tracked.

    Args:
        kind: Operation name (used in diagnostics and fault injection)
        out: Forward result
        inputs: Operation inputs in the order vjp returns their gradients;
            non-Tensor entries are treated as constants
        vjp: Maps the output gradient to one gradient (or None) per input

    Returns:
        Result tensor, tracked when the op was recorded
    """
    result = Tensor.wrap(out)
    tape = current_tape()
    if tape is None:
        return result
    handles = [tape.handle(t) if isinstance(t, Tensor) else None for t in inputs]
    if all(h is None for h in handles):
        return result
    scale = _faults.get(kind)
    if scale is not None:
        inner = vjp

        def vjp(g, _inner=inner, _scale=scale):
            return [None if c is None else c * _scale for c in _inner(g)]

    return tape.record(kind, handles, result, vjp)
