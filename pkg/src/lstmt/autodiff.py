"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the captioner needs are provided.  Every op computes its
result eagerly; when a :class:`Tape` is active (``with Tape() as tape:``) and
at least one input requires a gradient, the op is appended to the tape.  The
tape order is the creation order, which is a valid topological order.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, Tensor([3.0, 4.0])))
    >>> backward(tape, loss)
    >>> w.grad
    array([[3., 4.]])
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

__all__ = [
    "Tensor", "Tape", "backward", "no_grad_value",
    "matmul", "add", "sub", "mul", "scale", "neg", "tanh", "sigmoid", "log",
    "softmax", "log_softmax", "concat", "stack", "mean", "sum_", "take_column",
    "pick", "slice_", "reshape", "transpose", "add_col", "elementwise",
]

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus the bookkeeping reverse mode needs."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_fwd", "_bwd", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.op = "leaf"
        self._fwd = None
        self._bwd = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._fwd is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape})"


class Tape:
    """Ordered record of the ops executed while it is active."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded node from its parents' current values.

        Returns the recomputed arrays without touching the stored ones, so
        the caller can compare them against the original forward pass.
        """
        fresh: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            args = [fresh.get(id(p), p.data) for p in node.parents]
            value = node._fwd(*args)
            fresh[id(node)] = value
            out.append(value)
        return out


class no_grad_value:
    """Context manager that suspends recording even if a tape is active."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced a non-finite value")


def _record(op, parents, fwd, bwd):
    """Run ``fwd`` on the parents' data and register the node if needed."""
    with np.errstate(all="ignore"):
        data = fwd(*[p.data for p in parents])
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._fwd = fwd
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._bwd = bwd
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out.parents = tuple(parents)
        out._bwd = None
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients of parameters and of any leaf created with
    ``requires_grad=True`` are written to ``.grad`` (replacing any previous
    value).  Leaves recorded on the tape that do not influence the loss
    receive zeros; leaves never used on this tape are left untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        for p in node.parents:
            if p.requires_grad and p.is_leaf:
                leaves[id(p)] = p
        if g is None:
            continue
        with np.errstate(all="ignore"):
            pgrads = node._bwd(g, *[p.data for p in node.parents], node.data)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            _check_finite(f"backward of {node.op}", pg)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)


# ---------------------------------------------------------------- primitives

def _mm_bwd(g, a, b, out):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def matmul(a, b) -> Tensor:
    """Matrix product; 1-D operands act as row/column vectors as in numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul needs 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    return _record("matmul", (a, b), np.matmul, _mm_bwd)


def _binary_shapes(op, a, b):
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _record(
        "add", (a, b), np.add,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _record(
        "sub", (a, b), np.subtract,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _record(
        "mul", (a, b), np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def scale(a, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient flows to ``c``)."""
    c = float(c)
    return _record("scale", (_as_tensor(a),), lambda x: x * c, lambda g, x, out: (g * c,))


def neg(a) -> Tensor:
    return _record("neg", (_as_tensor(a),), np.negative, lambda g, x, out: (-g,))


def tanh(a) -> Tensor:
    return _record("tanh", (_as_tensor(a),), np.tanh, lambda g, x, out: (g * (1.0 - out * out),))


def _sigmoid(x):
    # written through tanh so large |x| never overflows exp
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _record("sigmoid", (_as_tensor(a),), _sigmoid, lambda g, x, out: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _record("log", (a,), np.log, lambda g, x, out: (g / x,))


_ELEMENTWISE = {"add": add, "mul": mul, "tanh": tanh, "sigmoid": sigmoid}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch by name to one of ``add``, ``mul``, ``tanh``, ``sigmoid``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def _log_softmax(x):
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {a.shape}")
    return _record("softmax", (a,), _softmax, lambda g, x, out: (out * (g - np.dot(g, out)),))


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 1 or a.shape[0] == 0:
        raise DimensionError(f"log_softmax needs a non-empty vector, got shape {a.shape}")
    return _record(
        "log_softmax", (a,), _log_softmax,
        lambda g, x, out: (g - np.exp(out) * np.sum(g),),
    )


def concat(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    for p in parts:
        if p.data.ndim != 1:
            raise DimensionError(f"concat takes vectors, got shape {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g, *args):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record("concat", tuple(parts), lambda *xs: np.concatenate(xs), bwd)


def stack(scalars) -> Tensor:
    """Gather 0-d tensors into a vector."""
    scalars = [_as_tensor(s) for s in scalars]
    if not scalars:
        raise DimensionError("stack of an empty list")
    for s in scalars:
        if s.data.size != 1:
            raise DimensionError(f"stack takes scalars, got shape {s.shape}")
    return _record(
        "stack", tuple(scalars),
        lambda *xs: np.array([float(x) for x in xs]),
        lambda g, *args: tuple(np.asarray(g[i]).reshape(args[i].shape) for i in range(len(scalars))),
    )


def _shifted_mean(x, axis):
    # mean(x) = x0 + mean(x - x0): exact when all entries are equal
    if axis is None:
        x0 = x.flat[0]
        return np.asarray(x0 + np.mean(x - x0))
    x0 = x[0]
    return x0 + np.mean(x - x0, axis=0)


def mean(a, axis=None) -> Tensor:
    """Mean of all entries (``axis=None``) or over rows (``axis=0``)."""
    a = _as_tensor(a)
    if a.data.size == 0:
        raise DimensionError("mean of an empty tensor")
    if axis not in (None, 0):
        raise DimensionError("mean supports axis=None or axis=0 only")
    if axis is None:
        n = a.data.size
        return _record(
            "mean", (a,), lambda x: _shifted_mean(x, None),
            lambda g, x, out: (np.full(x.shape, float(g) / n),),
        )
    n = a.shape[0]
    return _record(
        "mean0", (a,), lambda x: _shifted_mean(x, 0),
        lambda g, x, out: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    return _record("sum", (a,), lambda x: np.asarray(np.sum(x)), lambda g, x, out: (np.full(x.shape, float(g)),))


def take_column(m, j: int) -> Tensor:
    """Column ``j`` of a matrix (embedding lookup by one-hot selection)."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"take_column needs a matrix, got {m.shape}")
    if not 0 <= j < m.shape[1]:
        raise DimensionError(f"column {j} out of range for shape {m.shape}")

    def bwd(g, x, out):
        gx = np.zeros_like(x)
        gx[:, j] = g
        return (gx,)

    return _record("take_column", (m,), lambda x: x[:, j].copy(), bwd)


def pick(v, i: int) -> Tensor:
    """Element ``i`` of a vector as a 0-d tensor."""
    v = _as_tensor(v)
    if v.data.ndim != 1 or not 0 <= i < v.shape[0]:
        raise DimensionError(f"pick index {i} invalid for shape {v.shape}")

    def bwd(g, x, out):
        gx = np.zeros_like(x)
        gx[i] = g
        return (gx,)

    return _record("pick", (v,), lambda x: np.asarray(x[i]), bwd)


def slice_(v, start: int, stop: int) -> Tensor:
    v = _as_tensor(v)
    if v.data.ndim != 1 or not 0 <= start < stop <= v.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] invalid for shape {v.shape}")

    def bwd(g, x, out):
        gx = np.zeros_like(x)
        gx[start:stop] = g
        return (gx,)

    return _record("slice", (v,), lambda x: x[start:stop].copy(), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return _record("reshape", (a,), lambda x: x.reshape(shape), lambda g, x, out: (g.reshape(x.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _record("transpose", (a,), lambda x: x.T.copy(), lambda g, x, out: (g.T,))


def add_col(m, v) -> Tensor:
    """Add vector ``v`` (length m) to every column of an m x n matrix."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[0] != v.shape[0]:
        raise DimensionError(f"add_col: incompatible shapes {m.shape} and {v.shape}")
    return _record(
        "add_col", (m, v), lambda x, y: x + y[:, None],
        lambda g, x, y, out: (g, g.sum(axis=1)),
    )
