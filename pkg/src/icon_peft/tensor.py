"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every op is a plain function that computes its result with numpy and, when a
:class:`Tape` is active and some input requires a gradient, records a backward
rule on that tape.  ``Tape.backward`` replays the records in reverse order.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.], dtype=float32)
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, DimensionError, NumericalError, UsageError

DEFAULT_DTYPE = np.float32

_local = threading.local()
_verify_finite = False

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate ops without recording, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextlib.contextmanager
def verification(enabled: bool = True) -> Iterator[None]:
    """Scan every op result for NaN/Inf and raise ``NumericalError``."""
    global _verify_finite
    previous = _verify_finite
    _verify_finite = enabled
    try:
        yield
    finally:
        _verify_finite = previous


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._recorded = False

    @property
    def shape(self) -> tuple:
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
        return not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops executed inside the ``with`` block on tensors
    that require gradients are recorded.  A tape can be replayed once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, output: Tensor, inputs: tuple, backward) -> None:
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        output.requires_grad = True
        output._recorded = True
        self.nodes.append(_Node(op, output, inputs, backward))

    def backward(self, loss: Tensor, on_visit: Callable[[str, int], None] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise UsageError("tape already consumed by backward()")
        if loss.is_leaf:
            if not loss.requires_grad:
                raise UsageError("loss is not on the tape and does not require grad")
            _accumulate(loss, np.ones_like(loss.data))
            self.consumed = True
            return
        if not any(node.output is loss for node in self.nodes):
            raise UsageError("loss was not produced by an op recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for index in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[index]
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            if on_visit is not None:
                on_visit(node.op, index)
            input_grads = node.backward(grad)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    _accumulate(tensor, g)
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + g if key in pending else g
        self.nodes.clear()
        self.consumed = True


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


def _emit(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    if _verify_finite and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward)
    return out


def _lift(value: ArrayLike, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape: tuple) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", np.transpose(x.data, axes), (x,), bw)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold batch axes into rows: one GEMM instead of a batched one plus a sum
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation and activations


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(f"layer_norm: input last extent {dim} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _emit("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GeLU: ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        return (g * _gelu_grad(x.data, cdf),)

    return _emit("gelu", y, (x,), bw)


# ---------------------------------------------------------------------------
# per-sample depthwise convolution


def conv2d_depthwise_dynamic(x: Tensor, kernels: Tensor) -> Tensor:
    """Channel-wise 2-D cross-correlation with a separate kernel per sample.

    ``x`` is ``[B, C, H, W]`` and ``kernels`` is ``[B, C, K, K]`` with odd ``K``.
    Stride 1, zero padding ``(K - 1) // 2``, so the output keeps ``H x W``.
    """
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d_depthwise_dynamic: expected 4-D inputs, got {x.shape} and {kernels.shape}")
    B, C, H, W = x.shape
    kb, kc, K, K2 = kernels.shape
    if K != K2:
        raise ConfigError(f"conv2d_depthwise_dynamic: kernels must be square, got {K}x{K2}")
    if K % 2 == 0:
        raise ConfigError(f"conv2d_depthwise_dynamic: kernel size must be odd, got {K}")
    if (kb, kc) != (B, C):
        raise DimensionError(
            f"conv2d_depthwise_dynamic: kernels {kernels.shape} do not match input batch/channels {x.shape}"
        )
    pad = K // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = kernels.data
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, kernels.dtype))
    for i in range(K):
        for j in range(K):
            out += k[:, :, i, j, None, None] * xp[:, :, i : i + H, j : j + W]

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp, dtype=out.dtype)
            for i in range(K):
                for j in range(K):
                    gxp[:, :, i : i + H, j : j + W] += k[:, :, i, j, None, None] * g
            gx = gxp[:, :, pad : pad + H, pad : pad + W]
        if kernels.requires_grad:
            gk = np.empty((B, C, K, K), dtype=out.dtype)
            for i in range(K):
                for j in range(K):
                    gk[:, :, i, j] = (g * xp[:, :, i : i + H, j : j + W]).sum(axis=(2, 3))
        return gx, gk

    return _emit("conv2d_depthwise_dynamic", out, (x, kernels), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [B, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for a batch of {batch}")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at index {i} is outside [0, {classes})")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    rows = np.arange(batch)
    loss = np.asarray(-log_probs[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (d * (g / batch),)

    return _emit("cross_entropy", loss, (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


_FD_ROUNDOFF = 64 * np.finfo(np.float64).eps


def gradient_errors(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads the parameters it closes over.  When
    ``analytic`` is given it replaces the backward pass, which lets a 32-bit
    gradient be compared against a 64-bit numeric reference.  Coordinates where
    both gradients sit below the rounding floor of the central difference
    (structurally zero ones, such as attention key biases) count as agreeing.
    """
    if h <= 0:
        raise ConfigError("finite-difference step h must be positive")
    named = _as_named(params)
    if analytic is None:
        for p in named.values():
            p.grad = None
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape, dtype=p.dtype))
            for name, p in named.items()
        }

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    with no_tape():
        for name, p in named.items():
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise UsageError(f"parameter {name} is not contiguous")
            grad = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst = 0.0
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + h
                f_plus = float(f().data)
                flat[idx] = orig - h
                f_minus = float(f().data)
                flat[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = grad[idx]
                # below the rounding floor of the difference quotient the two sides cannot disagree measurably
                floor = _FD_ROUNDOFF * max(abs(f_plus), abs(f_minus)) / h
                if abs(a) <= floor and abs(numeric) <= floor:
                    continue
                worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric)))
            errors[name] = worst
    return errors


def finite_diff_check(f: Callable[[], Tensor], params, h: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error of the analytic gradient over sampled coordinates of ``params``."""
    errors = gradient_errors(f, params, h=h, max_coords=max_coords, seed=seed)
    return max(errors.values(), default=0.0)
