"""Dense float64 tensors with a reverse-mode gradient tape.

Everything downstream (layers, losses, the optimizer) is built from the
primitives in this module. Values are computed eagerly on numpy arrays;
while a :class:`GradTape` is active, each primitive also appends a
vector-Jacobian callback so that the gradient of a scalar loss can be
pulled back to any parameter tensor. Tapes are rebuilt per mini-batch and
are confined to the thread that created them.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DimensionError

# Lower clamp applied before every log inside a loss term.
LOG_EPS = 1e-8

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


class stop_recording:
    """Context manager: primitives applied inside are never taped.

    Used for eval-mode forwards and for stop-gradient teacher views.
    """

    def __enter__(self):
        _STATE.muted = getattr(_STATE, "muted", 0) + 1
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.muted -= 1
        return False


class Tensor:
    """A dense multi-dimensional real array (row-major, 64-bit)."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A stop-gradient view sharing this tensor's values."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __pow__(self, exponent):
        return pow_const(self, float(exponent))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class GradTape:
    """Ordered record of primitive applications for reverse-mode gradients.

    Used as a context manager::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    Only operations whose inputs are (transitively) connected to a tensor
    with ``requires_grad=True`` are recorded.
    """

    def __init__(self):
        self._records = []  # (out, inputs, vjp)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def gradient(self, target: Tensor, sources: list[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar `target` with respect to each source tensor.

        Sources not reached by the tape get a zero gradient of their own
        shape. Replays the records in reverse order exactly once.
        """
        if target.size != 1:
            raise ContractError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"gradient shape {gi.shape} does not match parameter shape {t.data.shape}"
                    )
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _apply(out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap an eager result, recording the op if a tape is listening."""
    stack = _tape_stack()
    needs = (
        bool(stack)
        and not getattr(_STATE, "muted", 0)
        and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    )
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        stack[-1]._records.append((out, inputs, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# primitive ops --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _apply(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _apply(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _apply(out, (a, b), vjp)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _apply(out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _apply(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _apply(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _apply(out, (a,), vjp)


def log_clamped(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(a, eps)); the derivative is zero on the clamped region."""
    clamped = np.maximum(a.data, eps)
    out = np.log(clamped)

    def vjp(g):
        return (np.where(a.data > eps, g / clamped, 0.0),)

    return _apply(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _apply(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _apply(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    return _apply(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _apply(out, (a,), vjp)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _apply(out, (a,), vjp)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


# probability ops ------------------------------------------------------


def softmax(logits: Tensor | np.ndarray) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    t = as_tensor(logits)
    shift = Tensor(t.data.max(axis=-1, keepdims=True))  # constant: softmax is shift-invariant
    e = exp(sub(t, shift))
    return div(e, reduce_sum(e, axis=-1, keepdims=True))


def _check_probability(p: np.ndarray, name: str = "p"):
    if p.ndim != 1:
        raise ContractError(f"{name} must be a 1-D probability vector, got shape {p.shape}")
    if p.min() < -1e-12:
        raise ContractError(f"{name} has negative entries (min={p.min()})")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise ContractError(f"{name} must sum to 1 within 1e-6, got {total}")


def entropy(p: Tensor | np.ndarray) -> Tensor:
    """Shannon entropy -sum p_i log p_i of a probability vector.

    Uses the 0*log(0) = 0 convention (via the log clamp); the result lies
    in [0, log K].
    """
    t = as_tensor(p)
    _check_probability(t.data)
    return neg(reduce_sum(mul(t, log_clamped(t))))


def kl_div(p: Tensor | np.ndarray, q: Tensor | np.ndarray) -> Tensor:
    """KL divergence sum p_i (log p_i - log q_i) between probability vectors.

    `q` is clamped below by 1e-8 before the log, so the value is finite for
    any valid inputs and nonnegative by Gibbs' inequality. When `p` is a
    constant teacher row, the gradient flows to `q` alone.
    """
    tp = as_tensor(p)
    tq = as_tensor(q)
    if tp.data.shape != tq.data.shape:
        raise DimensionError(f"kl_div shapes disagree: {tp.data.shape} vs {tq.data.shape}")
    _check_probability(tp.data, "p")
    _check_probability(tq.data, "q")
    return reduce_sum(mul(tp, sub(log_clamped(tp), log_clamped(tq))))


# verification oracle --------------------------------------------------


def grad_check(f, theta: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradient and central differences.

    `f` must map `theta` to a scalar Tensor using primitives from this
    module. The finite-difference sweep perturbs `theta.data` in place
    (restoring it afterwards), so `f` may simply close over a model that
    holds `theta`. The relative error uses a unit floor:
    |g_tape - g_fd| / max(1, |g_tape|, |g_fd|).
    """
    with GradTape() as tape:
        out = f(theta)
    (g_tape,) = tape.gradient(out, [theta])

    flat = theta.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        f_plus = float(f(theta).data)
        flat[i] = keep - h
        f_minus = float(f(theta).data)
        flat[i] = keep
        fd[i] = (f_plus - f_minus) / (2.0 * h)
    fd = fd.reshape(theta.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(g_tape), np.abs(fd)))
    return float(np.max(np.abs(g_tape - fd) / denom))
