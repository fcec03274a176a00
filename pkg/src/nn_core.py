"""
Minimal tensor arithmetic with reverse-mode automatic differentiation.

Provides just enough machinery to define, evaluate and train the small
convolutional operators used by the lifting transform, the posterior
synthesizer and the context model:

- Tensor: float64 array with optional gradient tracking
- Parameter: named, trainable Tensor with a gradient buffer
- Tape: ordered record of primitive operations, replayed by backward()
- conv2d / activation / affine plus the element-wise primitives
- adam_step: bias-corrected Adam update

Operations only build a graph while a Tape is active; outside a tape they
are plain numpy computations (inference mode).
"""

import contextvars
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

from codec_errors import ContractViolation, InvalidShapeError

logger = logging.getLogger(__name__)

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

Scalar = Union[int, float]


class Tape:
    """Ordered record of taped operations for one forward pass."""

    def __init__(self):
        self.nodes: List["Tensor"] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    """Return the tape operations are currently recorded on, if any."""
    return _ACTIVE_TAPE.get()


class Tensor:
    """Float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward_fn: Optional[Callable] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Trainable tensor with a stable identifier."""

    __slots__ = ("identifier", "frozen")

    def __init__(self, identifier: str, data, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.identifier = identifier
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    @property
    def gradient(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.identifier!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(value) -> Tensor:
    """Wrap constants (arrays, scalars) into non-differentiable tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward_fn = None
    out._tape = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._tape = tape
        tape.record(out)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    if isinstance(b, (int, float)):
        return _result(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    if isinstance(b, (int, float)):
        return _result(a.data - b, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    if isinstance(b, (int, float)):
        return _result(a.data * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    if isinstance(b, (int, float)):
        return _result(a.data / b, (a,), lambda g: (g / b,))
    b = as_tensor(b)
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a: Tensor) -> Tensor:
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF, element-wise."""
    return _result(
        ndtr(a.data), (a,),
        lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data),)
    )


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    keep = a.data > floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def lower_bound(a: Tensor, bound: float) -> Tensor:
    """
    max(a, bound), letting the gradient through below the bound whenever
    descent would push the value up.
    """
    keep = a.data >= bound
    return _result(
        np.maximum(a.data, bound), (a,),
        lambda g: (g * (keep | (g < 0)),)
    )


def activation(a: Tensor, kind: str = "tanh") -> Tensor:
    """Element-wise non-linearity. Only tanh is supported."""
    if kind != "tanh":
        raise ValueError(f"Unsupported activation '{kind}'")
    return tanh(a)


# ---------------------------------------------------------------------------
# Reductions and layout
# ---------------------------------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def channel_sum(a: Tensor) -> Tensor:
    """Sum over axis 0, keeping it as a singleton: (C, H, W) -> (1, H, W)."""
    count = a.shape[0]
    return _result(
        a.data.sum(axis=0, keepdims=True), (a,),
        lambda g: (np.repeat(g, count, axis=0),)
    )


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Flat entries of `a` picked by an integer index array (result takes its shape)."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward_fn(g):
        flat = np.zeros(int(np.prod(shape)) if shape else 1)
        np.add.at(flat, index.reshape(-1), g.reshape(-1))
        return (flat.reshape(shape),)

    return _result(a.data.reshape(-1)[index], (a,), backward_fn)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def select(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels [start, stop) of a (C, H, W) tensor."""
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), (a,), backward_fn)


def repeat_channels(a: Tensor, count: int) -> Tensor:
    """Tile a single-channel (1, H, W) tensor into (count, H, W)."""
    if a.shape[0] != 1:
        raise InvalidShapeError(f"repeat_channels expects one channel, got {a.shape}")
    return _result(
        np.repeat(a.data, count, axis=0), (a,),
        lambda g: (g.sum(axis=0, keepdims=True),)
    )


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose_hw(a: Tensor) -> Tensor:
    """Swap the two spatial axes of a (C, H, W) tensor."""
    return _result(
        np.ascontiguousarray(a.data.transpose(0, 2, 1)), (a,),
        lambda g: (g.transpose(0, 2, 1),)
    )


def take_phase(a: Tensor, axis: int, phase: int) -> Tensor:
    """Every other slice along a spatial axis, starting at `phase` (0 or 1)."""
    shape = a.shape
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(phase, None, 2)
    index = tuple(index)

    def backward_fn(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _result(a.data[index].copy(), (a,), backward_fn)


def interleave(even: Tensor, odd: Tensor, axis: int) -> Tensor:
    """Inverse of take_phase: merge two halves along a spatial axis."""
    _check_same_shape(even, odd, "interleave")
    shape = list(even.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    even_index = [slice(None)] * len(shape)
    odd_index = [slice(None)] * len(shape)
    even_index[axis] = slice(0, None, 2)
    odd_index[axis] = slice(1, None, 2)
    even_index, odd_index = tuple(even_index), tuple(odd_index)
    out[even_index] = even.data
    out[odd_index] = odd.data
    return _result(out, (even, odd), lambda g: (g[even_index], g[odd_index]))


def neighbor_sum(a: Tensor, axis: int, direction: str) -> Tensor:
    """
    a[n] + a[n+1] ("next") or a[n-1] + a[n] ("prev") along `axis`,
    with the edge sample replicated past the border.
    """
    n = a.shape[axis]
    if direction == "next":
        partner = np.minimum(np.arange(n) + 1, n - 1)
    elif direction == "prev":
        partner = np.maximum(np.arange(n) - 1, 0)
    else:
        raise ValueError(f"Unknown neighbour direction '{direction}'")

    def backward_fn(g):
        grad = g.copy()
        index = [slice(None)] * g.ndim
        index[axis] = partner
        np.add.at(grad, tuple(index), g)
        return (grad,)

    return _result(a.data + np.take(a.data, partner, axis=axis), (a,), backward_fn)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _pad(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    rows = _reflect_index(x.shape[1], pad)
    cols = _reflect_index(x.shape[2], pad)
    return np.take(np.take(x, rows, axis=1), cols, axis=2)


def _unpad(g: np.ndarray, shape: Tuple[int, int, int], pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return g
    channels, height, width = shape
    if mode == "zero":
        return g[:, pad:pad + height, pad:pad + width]
    cols = _reflect_index(width, pad)
    rows = _reflect_index(height, pad)
    folded_cols = np.zeros((channels, g.shape[1], width))
    np.add.at(folded_cols, (slice(None), slice(None), cols), g)
    folded = np.zeros(shape)
    np.add.at(folded, (slice(None), rows), folded_cols)
    return folded


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           padding: str = "reflect", mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Same-size 2-D convolution (cross-correlation) of a (C_in, H, W) tensor.

    Args:
        x: input tensor (C_in, H, W)
        weight: (C_out, C_in, k, k), k odd
        bias: (C_out,) or None
        padding: "reflect" (default) or "zero"
        mask: optional fixed (k, k) or (C_out, C_in, k, k) 0/1 mask applied to the kernel
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise InvalidShapeError(f"conv2d expects (C,H,W) input and 4-D weight, got {x.shape} / {weight.shape}")
    out_channels, in_channels, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise InvalidShapeError(f"conv2d kernel must be square and odd-sized, got {kh}x{kw}")
    if x.shape[0] != in_channels:
        raise InvalidShapeError(f"conv2d: input has {x.shape[0]} channels, weight expects {in_channels}")
    if padding not in ("reflect", "zero"):
        raise ValueError(f"Unknown padding mode '{padding}'")
    if bias is not None and bias.shape != (out_channels,):
        raise InvalidShapeError(f"conv2d: bias shape {bias.shape} does not match {out_channels} outputs")

    k = kh
    pad = k // 2
    _, height, width = x.shape
    kernel = weight.data if mask is None else weight.data * mask

    padded = _pad(x.data, pad, padding)
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    out = np.tensordot(kernel, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        grad_x = grad_w = grad_b = None
        if weight.requires_grad:
            grad_w = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
            if mask is not None:
                grad_w = grad_w * mask
        if x.requires_grad:
            cols = np.tensordot(kernel, g, axes=([0], [0]))  # (C, k, k, H, W)
            grad_padded = np.zeros(padded.shape)
            for i in range(k):
                for j in range(k):
                    grad_padded[:, i:i + height, j:j + width] += cols[:, i, j]
            grad_x = _unpad(grad_padded, x.shape, pad, padding)
        if bias is not None and bias.requires_grad:
            grad_b = g.sum(axis=(1, 2))
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, grad_b

    return _result(out, parents, backward_fn)


def affine(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """weight @ x + bias for a 1-D input vector."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise InvalidShapeError(f"affine: incompatible shapes {weight.shape} @ {x.shape}")
    out = weight.data @ x.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        grads = [weight.data.T @ g, np.outer(g, x.data)]
        if bias is not None:
            grads.append(g)
        return tuple(grads)

    return _result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# Differentiation and optimisation
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """
    Replay the loss's tape in reverse and write d(loss)/d(param) into every
    parameter's gradient buffer (previous gradients are discarded).
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractViolation("loss was not produced by a taped forward pass")

    on_tape = set(id(node) for node in tape.nodes)
    for node in tape.nodes:
        node.grad = None
        for parent in node._parents:
            if id(parent) not in on_tape and parent.requires_grad:
                if isinstance(parent, Parameter):
                    parent.zero_grad()
                else:
                    parent.grad = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, grad in zip(node._parents, grads):
            if grad is None or not parent.requires_grad:
                continue
            grad = np.asarray(grad, dtype=np.float64).reshape(parent.shape)
            if parent.grad is None:
                parent.grad = grad.copy()
            else:
                parent.grad += grad


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter identifier."""
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path: Path) -> None:
        arrays = {"__step__": np.array(self.step)}
        for key, value in self.first_moment.items():
            arrays[f"m::{key}"] = value
        for key, value in self.second_moment.items():
            arrays[f"v::{key}"] = value
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path: Path) -> "AdamState":
        state = cls()
        with np.load(path) as archive:
            for key in archive.files:
                if key == "__step__":
                    state.step = int(archive[key])
                elif key.startswith("m::"):
                    state.first_moment[key[3:]] = archive[key].copy()
                elif key.startswith("v::"):
                    state.second_moment[key[3:]] = archive[key].copy()
        return state


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update in place to every non-frozen parameter."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for p in params:
        if p.frozen:
            continue
        g = p.gradient
        m = state.first_moment.setdefault(p.identifier, np.zeros_like(p.data))
        v = state.second_moment.setdefault(p.identifier, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


def finite_difference_gradient(fn: Callable[[], float], tensor: Tensor,
                               step: float = 1e-5,
                               indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Central finite differences of a scalar function w.r.t. selected flat
    entries of `tensor` (all entries when indices is None).
    """
    flat = tensor.data.reshape(-1)
    indices = list(range(flat.size) if indices is None else indices)
    grads = np.zeros(len(indices))
    for n, i in enumerate(indices):
        original = flat[i]
        flat[i] = original + step
        upper = fn()
        flat[i] = original - step
        lower = fn()
        flat[i] = original
        grads[n] = (upper - lower) / (2.0 * step)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error between two gradient vectors."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                   step: float = 1e-5, samples: int = 8,
                   rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    Relative error between taped and finite-difference gradients, per parameter.

    `loss_fn` builds the scalar loss from the current parameter values; up to
    `samples` randomly chosen entries of each parameter are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    with Tape():
        loss = loss_fn()
    backward(loss, params)
    errors = {}
    for p in params:
        count = min(samples, p.size)
        indices = sorted(rng.choice(p.size, size=count, replace=False).tolist())
        numeric = finite_difference_gradient(lambda: loss_fn().item(), p, step, indices)
        analytic = p.gradient.reshape(-1)[indices]
        errors[p.identifier] = relative_error(analytic, numeric)
    return errors
