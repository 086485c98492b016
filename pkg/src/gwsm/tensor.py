"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every operation executed while gradient recording is
enabled produces a node that remembers its differentiable inputs and a
closure propagating the upstream gradient to them.  ``Tensor.backward``
replays the nodes reachable from the loss in reverse execution order, which
is a valid reverse topological order because an output is always created
after its inputs.

Everything is float64.  Gradient checking against central finite differences
(``check_gradients``) is the correctness oracle for every op here, so
numerically fragile formulas (softmax, sigmoid, sigmoid cross entropy) are
written in their stable forms.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    ``data`` is row-major and immutable by convention once the tensor has
    entered a graph; the optimizer is the single sanctioned writer.  After
    ``backward`` ran from a loss, ``grad`` holds an array of the same shape
    on every tensor that required gradients and was reachable from it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_seq",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._grad_fn: Callable | None = None
        self._seq = next(_seq_counter)
        self._backward_done = False

    # -- construction of op outputs -------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 grad_fn: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled:
            grad_parents = tuple(p for p in parents if p.requires_grad)
            if grad_parents:
                out.requires_grad = True
                out._parents = grad_parents
                out._grad_fn = grad_fn
        return out

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse accumulation from this scalar into every grad leaf."""
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss, got shape "
                                f"{self.data.shape}")
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that "
                                "requires gradients")
        if self._backward_done:
            raise ContractError("backward already ran for this loss; rebuild "
                                "the graph before calling it again")
        self._backward_done = True

        nodes = Tape.trace(self).nodes
        self.grad = np.ones_like(self.data)
        for node in nodes:
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


class Tape:
    """Execution-ordered record of the ops reachable from a root tensor.

    Replaying ``nodes`` (already reversed) calls each node's gradient closure
    after all of its consumers, i.e. reverse topological order.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        seen = {id(root)}
        stack = [root]
        collected = []
        while stack:
            node = stack.pop()
            collected.append(node)
            for p in node._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        collected.sort(key=lambda t: t._seq, reverse=True)
        return Tape(collected)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops -----------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accum(a, -g)

    return Tensor._from_op(-a.data, (a,), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands, got "
                         f"{a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: "
                         f"{a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.data.shape}")

    def grad_fn(g):
        _accum(a, g.T)

    return Tensor._from_op(a.data.T.copy(), (a,), grad_fn)


def reshape(a: Tensor, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def grad_fn(g):
        _accum(a, g.reshape(a.data.shape))

    return Tensor._from_op(a.data.reshape(shape), (a,), grad_fn)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def grad_fn(g):
        off = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad:
                _accum(p, g[off:off + c])
            off += c

    return Tensor._from_op(out_data, parts, grad_fn)


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def grad_fn(g):
        _accum(a, np.full_like(a.data, g.reshape(())))

    return Tensor._from_op(np.asarray(a.data.sum()), (a,), grad_fn)


def tmean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def grad_fn(g):
        _accum(a, np.full_like(a.data, g.reshape(()) / n))

    return Tensor._from_op(np.asarray(a.data.mean()), (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def grad_fn(g):
        _accum(a, g * (a.data > 0.0))

    return Tensor._from_op(out_data, (a,), grad_fn)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid_data(a.data)

    def grad_fn(g):
        _accum(a, g * y * (1.0 - y))

    return Tensor._from_op(y, (a,), grad_fn)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def grad_fn(g):
        _accum(a, g * (1.0 - y * y))

    return Tensor._from_op(y, (a,), grad_fn)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis of a 2-D tensor; rows sum to one.

    Stable under per-row constant shifts: the row maximum is subtracted
    before exponentiation.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D tensor, got {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(a, y * (g - dot))

    return Tensor._from_op(y, (a,), grad_fn)


# -- reductions over feature maps -------------------------------------------


def global_average_pool(a: Tensor) -> Tensor:
    """(C, H, W) -> (C,) spatial mean per channel."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"global_average_pool expects (C, H, W), got {a.data.shape}")
    _, h, w = a.data.shape
    out_data = a.data.mean(axis=(1, 2))

    def grad_fn(g):
        _accum(a, np.broadcast_to(g[:, None, None] / (h * w), a.data.shape))

    return Tensor._from_op(out_data, (a,), grad_fn)


def mean_over_channels(a: Tensor) -> Tensor:
    """(C, H, W) -> (H, W) mean across channels."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"mean_over_channels expects (C, H, W), got {a.data.shape}")
    c = a.data.shape[0]
    out_data = a.data.mean(axis=0)

    def grad_fn(g):
        _accum(a, np.broadcast_to(g[None] / c, a.data.shape))

    return Tensor._from_op(out_data, (a,), grad_fn)


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on (C, H, W); H and W must be even."""
    a = _as_tensor(a)
    c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {(h, w)}")
    out_data = a.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        _accum(a, gx)

    return Tensor._from_op(out_data, (a,), grad_fn)


def max_pool2(a: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (C, H, W); H and W must be even.

    The gradient routes to the first maximal element of each window.
    """
    a = _as_tensor(a)
    c, h, w = a.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial dims, got {(h, w)}")
    blocks = a.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=3)
    out_data = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]

    def grad_fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=3)
        gx = (gflat.reshape(c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 3, 2, 4).reshape(c, h, w))
        _accum(a, gx)

    return Tensor._from_op(out_data.copy(), (a,), grad_fn)


# -- convolution --------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int,
             hout: int, wout: int) -> np.ndarray:
    """Strided view (C, Hout, Wout, k, k) over the padded input."""
    c, _, _ = xp.shape
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, hout, wout, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1 * dilation, s2 * dilation),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation of (C_in, H, W) with (C_out, C_in, k, k).

    Zero padding; odd square kernels only.  Gradients flow to the input,
    the kernel, and the bias.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects x (C_in, H, W) and weight "
                         f"(C_out, C_in, k, k), got {x.data.shape} and "
                         f"{weight.data.shape}")
    cin, h, w = x.data.shape
    cout, cin_w, k, k2 = weight.data.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"kernel must be square with odd size, got {k}x{k2}")
    if cin_w != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {cin_w}")
    hout = conv_output_size(h, k, stride, padding, dilation)
    wout = conv_output_size(w, k, stride, padding, dilation)
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"empty conv output for input {(h, w)} with k={k}, "
                         f"stride={stride}, padding={padding}, dilation={dilation}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _windows(xp, k, stride, dilation, hout, wout)
    # out[co,i,j] = sum_{ci,ki,kj} w[co,ci,ki,kj] * win[ci,i,j,ki,kj]
    out_data = np.tensordot(weight.data, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {bias.data.shape}")
        out_data = out_data + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        if weight.requires_grad:
            dw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            _accum(weight, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            # gk[ci,ki,kj,i,j] = sum_co w[co,ci,ki,kj] * g[co,i,j]
            gk = np.tensordot(weight.data, g, axes=([0], [0]))
            dxp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
            for ki in range(k):
                hi = ki * dilation
                for kj in range(k):
                    wj = kj * dilation
                    dxp[:, hi:hi + hout * stride:stride,
                        wj:wj + wout * stride:stride] += gk[:, ki, kj]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding]
            _accum(x, dxp)

    return Tensor._from_op(out_data, parents, grad_fn)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Six-loop reference convolution; the oracle conv2d is tested against."""
    cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    hout = conv_output_size(h, k, stride, padding, dilation)
    wout = conv_output_size(w, k, stride, padding, dilation)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, hout, wout))
    for co in range(cout):
        for i in range(hout):
            for j in range(wout):
                acc = 0.0
                for ci in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            acc += (weight[co, ci, ki, kj]
                                    * xp[ci, i * stride + ki * dilation,
                                         j * stride + kj * dilation])
                out[co, i, j] = acc + (0.0 if bias is None else bias[co])
    return out


# -- losses -------------------------------------------------------------------


def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over classes of the stable sigmoid cross entropy.

    Per class: max(x, 0) - x*t + log(1 + exp(-|x|)), the standard
    overflow-free form of -[t*log(sigmoid(x)) + (1-t)*log(1-sigmoid(x))].
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.data.shape != t.shape:
        raise ShapeError(f"logits {logits.data.shape} vs targets {t.shape}")
    x = logits.data
    per_class = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def grad_fn(g):
        _accum(logits, g.reshape(()) * (_sigmoid_data(x) - t) / n)

    return Tensor._from_op(np.asarray(per_class.mean()), (logits,), grad_fn)


# -- gradient checking --------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor,
                    eps: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic map from a tensor to a scalar tensor.  The
    error per coordinate is |analytic - numeric| / max(1e-8, |analytic| +
    |numeric|).  With ``max_coords`` set, a deterministic random subset of
    coordinates is probed instead of all of them.
    """
    base = x.data.copy()
    xt = Tensor(base.copy(), requires_grad=True)
    loss = f(xt)
    loss.backward()
    if xt.grad is None:
        raise ContractError("f did not propagate gradients to x")
    analytic = xt.grad

    coords = list(np.ndindex(*base.shape)) if base.shape else [()]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    probe = base.copy()
    max_err = 0.0
    with no_grad():
        for idx in coords:
            orig = probe[idx]
            probe[idx] = orig + eps
            f_plus = f(Tensor(probe)).item()
            probe[idx] = orig - eps
            f_minus = f(Tensor(probe)).item()
            probe[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
