"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation creates a new Tensor that remembers its inputs and a closure
mapping the output gradient to input gradients. Tensor ids are drawn from a
single increasing counter, so sorting the reachable nodes by id yields a
topological order: that sorted record is the Tape, and one backward sweep
walks it in reverse, visiting each node exactly once.

The module also hosts the kernels the model is built from (softmax over rows,
layer normalization, cross-entropy, the Newton-Schulz pseudo-inverse) and
the named random sub-streams that all randomness flows through.
"""

import itertools
import logging
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractViolation, NumericFault

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (evaluation, snapshots)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent random stream derived from a run seed and a stream name.

    Streams used across the package: "data", "init", "shuffle", "deletion".
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


class Tensor:
    """A dense float64 array that may take part in gradient computation."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        _op: str = "leaf",
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if requires_grad and not _parents else None
        )
        self.name = name
        self.id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":  # noqa: N802
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() needs a scalar root, got shape {self.shape}"
            )
        Tape.record(self).sweep()


class Parameter(Tensor):
    """A trainable leaf. Frozen parameters are skipped by the optimizer."""

    def __init__(self, data: ArrayLike, name: Optional[str] = None, frozen: bool = False):
        super().__init__(data, requires_grad=True, name=name)
        self.frozen = frozen

    def assign(self, value: np.ndarray) -> None:
        """Replace the value (shape may change, e.g. a growing output head)."""
        self.data = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.data)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs_grad:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    """One primitive operation in the recorded graph."""

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    tensor: Tensor


@dataclass
class Tape:
    """Topologically ordered record of the graph reachable from a root."""

    root: Tensor
    entries: list[TapeEntry]

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen[node.id] = node
            stack.extend(node._parents)
        entries = [
            TapeEntry(
                node._op,
                tuple(p.id for p in node._parents),
                node.id,
                node,
            )
            for node in sorted(seen.values(), key=lambda n: n.id)
        ]
        return cls(root, entries)

    def sweep(self) -> None:
        """Propagate gradients from the root to the leaves in one pass."""
        pending: dict[int, np.ndarray] = {self.root.id: np.ones_like(self.root.data)}
        for entry in reversed(self.entries):
            node = entry.tensor
            upstream = pending.pop(node.id, None)
            if upstream is None:
                continue
            if not np.all(np.isfinite(upstream)):
                raise NumericFault(f"non-finite gradient at '{entry.op}'", node.id)
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += upstream
                continue
            assert node._backward is not None
            for parent, grad in zip(node._parents, node._backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + grad
                else:
                    pending[parent.id] = grad


# ---------------------------------------------------------------------------
# Elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def absolute(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), backward, "abs")


def relu(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0.0), (a,), backward, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.T,)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def amax(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Maximum; the gradient flows to the first maximal entry."""
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            grad = np.zeros(a.data.size)
            grad[flat] = g
            return (grad.reshape(a.shape),)

        return _make(np.asarray(out), (a,), backward, "max")

    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward_axis(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _make(out, (a,), backward_axis, "max")


def getitem(a: Tensor, index: object) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, np.integer)) for p in parts)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] += g  # type: ignore[index]
        else:
            np.add.at(grad, index, g)  # type: ignore[arg-type]
        return (grad,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")  # type: ignore[index]


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        backward,
        "concat",
    )


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# Fused kernels
# ---------------------------------------------------------------------------


def softmax_rows(m: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``mask`` is a boolean array of m's shape; True entries are excluded
    (probability exactly 0). Every row must keep at least one entry.
    """
    if m.ndim != 2:
        raise ContractViolation(f"softmax_rows expects rank 2, got {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise NumericFault("softmax_rows received non-finite input", m.id)
    scores = m.data
    if mask is not None:
        if np.any(mask.all(axis=1)):
            raise ContractViolation("softmax_rows mask removes an entire row")
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (m,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply gain and bias."""
    if eps <= 0:
        raise ContractViolation("layer_norm needs eps > 0")
    if x.ndim != 2:
        raise ContractViolation(f"layer_norm expects rank 2, got {x.shape}")
    n = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gain.data * xhat + bias.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dxhat = g * gain.data
        dx = (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[row, target]."""
    targets_arr = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != len(targets_arr):
        raise ContractViolation(
            f"cross_entropy needs one target per row, got {logits.shape} and {len(targets_arr)}"
        )
    rows = np.arange(len(targets_arr))
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[rows, targets_arr].mean()

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.exp(log_probs)
        grad[rows, targets_arr] -= 1.0
        return (g * grad / len(targets_arr),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


def mse(prediction: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared difference against a constant target."""
    diff = prediction - Tensor(target)
    return mean(diff * diff)


# ---------------------------------------------------------------------------
# Pseudo-inverse
# ---------------------------------------------------------------------------

_DIVERGENCE_LIMIT = 1e12


def pinv_newton_schulz(a: Tensor, iters: int = 6) -> Tensor:
    """Iterative Moore-Penrose pseudo-inverse of a square matrix.

    Z0 = A^T / (||A||_1 ||A||_inf), then the cubic Newton-Schulz update
    Z <- Z (13I - AZ (15I - AZ (7I - AZ))) / 4. The iteration is built from
    differentiable primitives, so gradients follow the unrolled loop.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractViolation(f"pinv_newton_schulz needs a square matrix, got {a.shape}")
    if iters < 1:
        raise ContractViolation("pinv_newton_schulz needs iters >= 1")
    eye = Tensor(np.eye(a.shape[0]))
    abs_a = absolute(a)
    norm_1 = amax(sum_(abs_a, axis=0))
    norm_inf = amax(sum_(abs_a, axis=1))
    z = transpose(a) / (norm_1 * norm_inf)
    previous = float(np.linalg.norm(z.data))
    for step in range(iters):
        az = a @ z
        inner = az @ (7.0 * eye - az)
        z = (z @ (13.0 * eye - az @ (15.0 * eye - inner))) * 0.25
        current = float(np.linalg.norm(z.data))
        if not np.isfinite(current) or current > _DIVERGENCE_LIMIT * max(previous, 1.0):
            raise NumericFault(f"pseudo-inverse diverged at iteration {step + 1}", z.id)
        previous = current
    return z


def pinv_residual(a: np.ndarray, z: np.ndarray) -> float:
    """Relative residual ||AZA - A||_F / ||A||_F."""
    return float(np.linalg.norm(a @ z @ a - a) / np.linalg.norm(a))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_difference_grad(
    f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central finite-difference estimate of df/dparam, evaluated without graphs."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = f().item()
            flat[i] = original - eps
            lower = f().item()
            flat[i] = original
            grad.reshape(-1)[i] = (upper - lower) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
