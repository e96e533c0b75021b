"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: every shape in this toolkit is known
statically, so there is no general broadcasting (the single exception is a
bias add along the last axis) and no view semantics. Operations record onto
an explicit :class:`GradTape`; replaying the tape in reverse creation order
is a valid reverse topological order, which fixes the gradient accumulation
order and makes backward passes bit-reproducible.

Matmul supports stacked (batched) operands: ``[..., m, k] @ [k, n]`` and
``[..., m, k] @ [..., k, n]`` with identical leading dims. All data is
float64, row-major.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "swap_axes",
    "reshape",
    "concat_rows",
    "slice_rows",
    "softmax_rows",
    "sigmoid",
    "gelu",
    "relu",
    "layer_norm",
    "mean",
    "total_sum",
    "binary_cross_entropy",
    "mac_counter",
    "MacCounter",
    "mac_scope",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; never silently propagated."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# MAC instrumentation (used by the complexity probe)

class MacCounter:
    """Accumulates multiply-accumulate counts of matmuls, keyed by scope label."""

    def __init__(self) -> None:
        self.by_scope: dict[str, int] = {}
        self._scope = "unscoped"

    def add(self, macs: int) -> None:
        self.by_scope[self._scope] = self.by_scope.get(self._scope, 0) + macs

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())


_active_counter: MacCounter | None = None


class mac_counter:
    """Context manager that installs a MacCounter for enclosed forward passes."""

    def __init__(self) -> None:
        self.counter = MacCounter()

    def __enter__(self) -> MacCounter:
        global _active_counter
        self._prev = _active_counter
        _active_counter = self.counter
        return self.counter

    def __exit__(self, *exc) -> None:
        global _active_counter
        _active_counter = self._prev


class mac_scope:
    """Attributes matmul MACs inside the block to a named bucket."""

    def __init__(self, label: str) -> None:
        self.label = label

    def __enter__(self) -> None:
        if _active_counter is not None:
            self._prev = _active_counter._scope
            _active_counter._scope = self.label

    def __exit__(self, *exc) -> None:
        if _active_counter is not None:
            _active_counter._scope = self._prev


# ---------------------------------------------------------------------------
# Tape

class GradTape:
    """Ordered record of primitive operations for one computation graph.

    Usable as a context manager; while active, every op whose inputs include
    a Tensor is recorded. Nodes are stored in creation order (a topological
    order of the forward graph), so the backward pass simply walks the list
    in reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._prev

    def gradients(
        self, loss: "Tensor", wrt: Sequence["Tensor"] | None = None
    ) -> dict["Tensor", np.ndarray]:
        """Gradient of a scalar loss w.r.t. every tensor reachable on this tape.

        Returns a map Tensor -> ndarray. When ``wrt`` is given, every listed
        tensor is present in the result; tensors the loss does not depend on
        get an all-zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        by_id: dict[int, Tensor] = {id(loss): loss}
        # Buffers in `owned` are private copies that may be accumulated into
        # in place; everything else may alias an upstream gradient or a view
        # of one and is copied on first accumulation (copy-on-write).
        owned: set[int] = set()
        for node in reversed(self.nodes):
            g_out = grads.get(id(node))
            if g_out is None or node._inputs is None:
                continue
            partials = node._backward(g_out)
            for inp, g_in in zip(node._inputs, partials):
                if g_in is None:
                    continue
                by_id[id(inp)] = inp
                key = id(inp)
                acc = grads.get(key)
                if acc is None:
                    grads[key] = g_in
                else:
                    if key not in owned:
                        acc = grads[key] = np.array(acc)
                        owned.add(key)
                    acc += g_in

        result = {by_id[k]: v for k, v in grads.items()}
        if wrt is not None:
            for t in wrt:
                if t not in result:
                    result[t] = np.zeros_like(t.data)
        return result


_active_tape: GradTape | None = None


def backward(
    loss: "Tensor", wrt: Sequence["Tensor"] | None = None
) -> dict["Tensor", np.ndarray]:
    """Run the reverse pass from a recorded scalar loss; see GradTape.gradients."""
    if loss._tape is None:
        raise ValueError("loss is not connected to a recorded tape")
    return loss._tape.gradients(loss, wrt)


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    """N-dimensional float64 array, optionally a node of a recorded graph."""

    __slots__ = ("data", "_tape", "_inputs", "_backward")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialised with non-finite values")
        self.data = arr
        self._tape: GradTape | None = None
        self._inputs: tuple[Tensor, ...] | None = None
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar; all dispatch to the module-level primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _make_node(
    data: np.ndarray,
    op: str,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._tape = None
    out._inputs = None
    out._backward = None
    if _active_tape is not None:
        out._tape = _active_tape
        out._inputs = inputs
        out._backward = backward_fn
        _active_tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# Arithmetic primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a last-axis bias vector for ``b``."""
    if a.shape == b.shape:
        return _make_node(
            a.data + b.data, "add", (a, b), lambda g: (g, g)
        )
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        n = b.shape[0]
        return _make_node(
            a.data + b.data,
            "add",
            (a, b),
            lambda g: (g, g.reshape(-1, n).sum(axis=0)),
        )
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make_node(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make_node(
        a.data * b.data, "mul", (a, b),
        lambda g: (g * b.data, g * a.data),
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return _make_node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported operand ranks: 2D @ 2D, ND @ 2D (shared weight matrix), and
    ND @ ND with identical leading dims. Backward: dA = dC Bᵀ, dB = Aᵀ dC,
    summed over stacked dims where the operand was shared.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )

    if bd.ndim == 2:
        m, k = ad.shape[-2], ad.shape[-1]
        n = bd.shape[-1]
        lead = ad.shape[:-2]
        out = (ad.reshape(-1, k) @ bd).reshape(*lead, m, n)
        if _active_counter is not None:
            _active_counter.add(int(np.prod(lead, dtype=np.int64)) * m * k * n)

        def back_nd2d(g: np.ndarray) -> tuple:
            g2 = g.reshape(-1, n)
            da = (g2 @ bd.T).reshape(ad.shape)
            db = ad.reshape(-1, k).T @ g2
            return da, db

        return _make_node(out, "matmul", (a, b), back_nd2d)

    if ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(
            f"matmul: stacked dims disagree for shapes {a.shape} and {b.shape}"
        )
    out = np.matmul(ad, bd)
    if _active_counter is not None:
        lead = int(np.prod(ad.shape[:-2], dtype=np.int64))
        _active_counter.add(lead * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def back_ndnd(g: np.ndarray) -> tuple:
        da = np.matmul(g, np.swapaxes(bd, -1, -2))
        db = np.matmul(np.swapaxes(ad, -1, -2), g)
        return da, db

    return _make_node(out, "matmul", (a, b), back_ndnd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs >=2D, got {a.shape}")
    return _make_node(
        np.swapaxes(a.data, -1, -2), "transpose", (a,),
        lambda g: (np.swapaxes(g, -1, -2),),
    )


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make_node(
        np.swapaxes(a.data, ax1, ax2), "swap_axes", (a,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _make_node(
        a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),)
    )


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along the row axis (second to last)."""
    parts = list(parts)
    sizes = [p.shape[-2] for p in parts]
    offs = np.cumsum([0] + sizes)

    def back(g: np.ndarray) -> tuple:
        return tuple(
            g[..., offs[i]:offs[i + 1], :] for i in range(len(parts))
        )

    return _make_node(
        np.concatenate([p.data for p in parts], axis=-2),
        "concat_rows", tuple(parts), back,
    )


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the second-to-last axis."""
    if a.ndim < 2:
        raise ShapeError(f"slice_rows: needs >=2D, got {a.shape}")

    def back(g: np.ndarray) -> tuple:
        full = np.zeros_like(a.data)
        full[..., start:stop, :] = g
        return (full,)

    return _make_node(a.data[..., start:stop, :].copy(), "slice_rows", (a,), back)


# ---------------------------------------------------------------------------
# Nonlinear primitives

def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g: np.ndarray) -> tuple:
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make_node(s, "softmax_rows", (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function, output strictly inside (0, 1)."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, 1e-300, np.nextafter(1.0, 0.0), out=out)

    def back(g: np.ndarray) -> tuple:
        return (g * out * (1.0 - out),)

    return _make_node(out, "sigmoid", (a,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g: np.ndarray) -> tuple:
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3*0.044715 x^2)
        d = 1.0 - t * t
        d *= 0.5 * _GELU_C * x
        d *= 1.0 + 0.134145 * x2
        d += 0.5 * (1.0 + t)
        d *= g
        return (d,)

    return _make_node(out, "gelu", (a,), back)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _make_node(
        np.maximum(x, 0.0), "relu", (a,), lambda g: (g * (x > 0),)
    )


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply learnable gain and bias."""
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({n},), got "
            f"{gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc
    xhat *= inv
    out = gain.data * xhat + bias.data

    def back(g: np.ndarray) -> tuple:
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        da = gx - gx.mean(axis=-1, keepdims=True)
        da -= xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
        da *= inv
        return (da, dgain, dbias)

    return _make_node(out, "layer_norm", (a, gain, bias), back)


# ---------------------------------------------------------------------------
# Reductions and loss

def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g: np.ndarray) -> tuple:
        return (np.full_like(a.data, float(g) / n),)

    return _make_node(np.asarray(a.data.mean()), "mean", (a,), back)


def total_sum(a: Tensor) -> Tensor:
    def back(g: np.ndarray) -> tuple:
        return (np.full_like(a.data, float(g)),)

    return _make_node(np.asarray(a.data.sum()), "sum", (a,), back)


_BCE_EPS = 1e-12


def binary_cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean bitwise BCE of predictions in (0,1) against constant 0/1 targets.

    Targets take no gradient. Predictions are clamped to [1e-12, 1-1e-12]
    before the log, so exact-hit predictions give a loss near zero instead
    of -log(0).
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(
            f"binary_cross_entropy: target shape {t.shape} != pred shape {pred.shape}"
        )
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    n = p.size
    val = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()

    def back(g: np.ndarray) -> tuple:
        return (float(g) * (p - t) / (p * (1.0 - p) * n),)

    return _make_node(np.asarray(val), "bce", (pred,), back)
