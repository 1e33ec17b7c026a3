"""Dense tensors and a small define-by-run reverse-mode differentiation engine.

Every differentiable kernel in the package produces a :class:`Tensor` whose
``_parents`` and ``_backward`` fields describe one node of the graph.
``_backward`` receives the gradient of the output and returns one gradient
array (or ``None``) per parent.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "make_node",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "elementwise",
    "concat_channels",
    "split_channels",
    "reshape",
    "sum_all",
    "reverse_accumulate",
    "finite_diff_check",
    "flat_index",
    "unflat_index",
]

LEAKY_SLOPE = 0.1

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class KinkLog:
    """Digest of which linear piece every piecewise op landed on.

    relu sign, bilinear cell and argmax choices all feed the digest, so two
    forward passes with equal ``pieces`` ran through the same smooth region.
    """

    def __init__(self):
        self._digest = hashlib.blake2b(digest_size=16)

    @property
    def pieces(self) -> bytes:
        return self._digest.digest()

    def add(self, piece: np.ndarray) -> None:
        self._digest.update(np.ascontiguousarray(piece).tobytes())


@contextlib.contextmanager
def kink_log():
    """Record the pieces of every piecewise op run inside the block."""
    prev = getattr(_state, "kinks", None)
    log = KinkLog()
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def note_kink(piece: np.ndarray) -> None:
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.add(piece)


class Tensor:
    """An immutable n-d array that may carry a node of the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap a forward result, recording the node only when a parent needs grads."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_node(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,), "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return make_node(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_kink(mask)
    return make_node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    note_kink(x > 0)
    factor = np.where(x > 0, x.dtype.type(1), x.dtype.type(slope))
    return make_node(x * factor, (a,), lambda g: (g * factor,), "leaky_relu")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "leaky-relu": leaky_relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``sigmoid``, ``scale`` ...)."""
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ValueError(f"{kind} takes two tensors")
        return _BINARY[kind](*inputs)
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ValueError(f"{kind} takes one tensor")
        return _UNARY[kind](inputs[0])
    if kind == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(inputs[0], factor)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack (N, C_i, H, W) tensors along the channel axis, in argument order."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != 4 or (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError(f"concat_channels: N/H/W mismatch {ref} vs {x.shape}")
    bounds = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return make_node(np.concatenate([x.data for x in xs], axis=1), xs, backward, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels`."""
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to {x.shape[1]} channels")
    outs = []
    start = 0
    for size in sizes:
        stop = start + size

        def backward(g, start=start, stop=stop):
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            return (full,)

        outs.append(make_node(x.data[:, start:stop], (x,), backward, "split"))
        start = stop
    return outs


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(
        np.asarray(x.data.sum()).reshape(1), (x,), lambda g: (np.broadcast_to(g.reshape(()), shape),), "sum"
    )


# ---------------------------------------------------------------------------
# reverse accumulation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def reverse_accumulate(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Back-propagate a scalar loss.

    ``params`` may be a mapping ``name -> Tensor`` (the result is keyed by the
    same names) or an iterable of tensors (keyed by position). Parameters the
    loss does not depend on receive zero gradients. With ``params=None`` the
    gradient of every graph node is returned, keyed by ``id``.
    """
    if int(np.prod(loss.shape)) != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            if node._parents and params is not None:
                # interior gradients are no longer needed once pushed upstream
                del grads[id(node)]
    if params is None:
        return grads

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return np.ascontiguousarray(np.broadcast_to(g, t.shape), dtype=t.dtype)

    if isinstance(params, Mapping):
        return {name: lookup(t) for name, t in params.items()}
    return [lookup(t) for t in params]


def central_differences(f: Callable[[Tensor], Tensor], x, h: float, indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference estimates of d sum(f) / dx at the chosen flat components."""
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.ravel()
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)).data.sum())
        flat[i] = orig - h
        fm = float(f(Tensor(base)).data.sum())
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)


def analytic_gradient(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    leaf = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    (g,) = reverse_accumulate(f(leaf), [leaf])
    return g.ravel()


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``indices`` restricts the comparison to the given flat components.
    """
    if not h > 0:
        raise ValueError(f"finite difference step must be positive, got {h}")
    analytic = analytic_gradient(f, x)
    idx = np.arange(analytic.size) if indices is None else np.asarray(indices, dtype=np.int64)
    numeric = central_differences(f, x, h, idx)
    return float(relative_error(analytic[idx], numeric).max(initial=0.0))


def flat_index(idx: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat offset of a multi-index."""
    offset = 0
    for i, d in zip(idx, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(idx)} out of range for shape {tuple(shape)}")
        offset = offset * d + i
    return offset


def unflat_index(offset: int, shape: Sequence[int]) -> tuple[int, ...]:
    idx = []
    for d in reversed(shape):
        offset, r = divmod(offset, d)
        idx.append(r)
    return tuple(reversed(idx))
