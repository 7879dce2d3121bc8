"""Dense arrays with reverse-mode differentiation.

Every value in the model is a :class:`Tensor`. Operations record their
parents and a closure that pushes the upstream gradient back; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order.

Data is stored as 32-bit floats by default. Reductions (matmul, mean,
variance, pooling windows) accumulate in 64-bit and cast back. Passing
float64 arrays keeps everything in float64, which is what the gradient
checker uses.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by tensor op")
    return out


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.dtype for t in ts))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    dt = _result_dtype(a, b)
    out = (a.data + b.data).astype(dt, copy=False)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    dt = _result_dtype(a, b)
    out = (a.data - b.data).astype(dt, copy=False)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    dt = _result_dtype(a, b)
    out = (a.data * b.data).astype(dt, copy=False)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data.astype(np.float64)
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = s.astype(x.dtype)

    def backward(g):
        return ((g * s * (1.0 - s)).astype(x.dtype),)

    return _result(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def backward(g):
        return (2.0 * g * x.data,)

    return _result(out, (x,), backward)


# -- reductions and shape ---------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(out, (x,), backward)


def index(x: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    dt = _result_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis).astype(dt, copy=False)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``b`` and 2-D or batched 3-D ``a``, or 2-D @ 2-D."""
    a, b = _lift(a), _lift(b)
    dt = _result_dtype(a, b)
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (a64 @ b64).astype(dt)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = g64 @ np.swapaxes(b64, -1, -2)
        gb = np.swapaxes(a64, -1, -2) @ g64
        if gb.ndim > b.ndim:
            gb = gb.reshape((-1,) + b.shape).sum(axis=0)
        if ga.ndim > a.ndim:
            ga = ga.reshape((-1,) + a.shape).sum(axis=0)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W + b, with W stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation / probability --------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s64 = e / e.sum(axis=axis, keepdims=True)
    out = s64.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        dot = (g64 * s64).sum(axis=axis, keepdims=True)
        return ((s64 * (g64 - dot)).astype(x.dtype),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * inv

    def backward(g):
        g64 = g.astype(np.float64)
        gx = inv * (g64 - g64.mean(axis=-1, keepdims=True) - xhat64 * (g64 * xhat64).mean(axis=-1, keepdims=True))
        return (gx.astype(x.dtype),)

    normed = _result(xhat64.astype(x.dtype), (x,), backward)
    if gamma is not None:
        normed = mul(normed, gamma)
    if beta is not None:
        normed = add(normed, beta)
    return normed


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(keep / (1.0 - rate), dtype=x.dtype)
    return mul(x, Tensor(scale, dtype=x.dtype))


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss length mismatch: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


# -- convolution and pooling ------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :ho, :wo]
    # (C, Ho, Wo, kh, kw) -> (C*kh*kw, Ho*Wo)
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple[int, int, int], kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Single-sample cross-correlation: (C_in, H, W) * (C_out, C_in, kh, kw) -> (C_out, H', W')."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d expects C×H×W input and 4-D weights, got {x.shape} and {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc, kh, kw = weight.shape
    if wc != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, kernel expects {wc}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")

    cols, ho, wo = _im2col(x.data.astype(np.float64), kh, kw, stride, padding)
    w2 = weight.data.astype(np.float64).reshape(c_out, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data.astype(np.float64).reshape(c_out, 1)
    out = out.reshape(c_out, ho, wo).astype(x.dtype)

    def backward(g):
        g2 = g.astype(np.float64).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape).astype(weight.dtype)
        gx = None
        if x.requires_grad:
            gx = _col2im(w2.T @ g2, x.shape, kh, kw, stride, padding, ho, wo).astype(x.dtype)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1).astype(bias.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None, ceil_mode: bool = True) -> Tensor:
    """Max pooling over C×H×W; in ceil mode partial windows at the border are kept."""
    stride = stride or kernel
    c, h, w = x.shape
    if ceil_mode:
        ho = -(-max(h - kernel, 0) // stride) + 1
        wo = -(-max(w - kernel, 0) // stride) + 1
    else:
        ho = (h - kernel) // stride + 1
        wo = (w - kernel) // stride + 1
    ph = max((ho - 1) * stride + kernel - h, 0)
    pw = max((wo - 1) * stride + kernel - w, 0)
    padded = np.pad(x.data, ((0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo].reshape(c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(padded.shape, dtype=x.dtype)
        di, dj = np.divmod(arg, kernel)
        ci, oi, oj = np.indices(arg.shape)
        np.add.at(gp, (ci, oi * stride + di, oj * stride + dj), g)
        return (gp[:, :h, :w],)

    return _result(np.ascontiguousarray(out), (x,), backward)


def adaptive_pool_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i averages inputs [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"adaptive pooling needs positive sizes, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Adaptive average pooling of C×H×W to C×H'×W'.

    Window means over rectangles are separable, so the op is ``A_h @ X @ A_w^T``
    per channel with the row-averaging matrices from :func:`adaptive_pool_matrix`.
    """
    ht, wt = target
    if ht < 1 or wt < 1:
        raise ValueError(f"adaptive_avg_pool2d target must be positive, got {target}")
    _, h, w = x.shape
    ah = adaptive_pool_matrix(h, ht)
    aw = adaptive_pool_matrix(w, wt)
    out = (ah @ x.data.astype(np.float64) @ aw.T).astype(x.dtype)

    def backward(g):
        return ((ah.T @ g.astype(np.float64) @ aw).astype(x.dtype),)

    return _result(out, (x,), backward)


def adaptive_avg_pool1d_rows(x: Tensor, n_out: int) -> Tensor:
    """Adaptive average pooling along the first axis of a 2-D tensor."""
    return reshape(adaptive_avg_pool2d(reshape(x, (1,) + x.shape), (n_out, x.shape[1])), (n_out, x.shape[1]))


# -- gradient checking ------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float, positions: Iterable[tuple] | None = None):
    """Central differences of scalar ``f()`` with respect to entries of ``x`` (mutated in place)."""
    flat_positions = list(np.ndindex(x.shape)) if positions is None else list(positions)
    out = {}
    with no_grad():
        for pos in flat_positions:
            orig = x.data[pos].copy()
            x.data[pos] = orig + h
            fp = float(f().data.astype(np.float64).sum())
            x.data[pos] = orig - h
            fm = float(f().data.astype(np.float64).sum())
            x.data[pos] = orig
            out[pos] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float | None = None,
               floor: float = 1e-6, positions: dict[int, list[tuple]] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f(*inputs)`` must return a scalar tensor. Inputs are leaf tensors and
    should be float64 for tight checks; ``h`` defaults to 1e-5 for float64
    and 1e-3 for float32.
    """
    inputs = list(inputs)
    if h is None:
        h = 1e-5 if all(t.dtype == np.float64 for t in inputs) else 1e-3
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar function")
    loss.backward()
    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        pos = None if positions is None else positions.get(i)
        numeric = numerical_grad(lambda: f(*inputs), t, h, pos)
        for p, n in numeric.items():
            worst = max(worst, relative_error(float(analytic[p]), n, floor))
    return worst


def xavier_uniform(shape: tuple[int, int], rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
