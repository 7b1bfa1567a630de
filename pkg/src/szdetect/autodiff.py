"""Minimal dense tensor engine with reverse-mode differentiation.

Tensors wrap row-major numpy arrays (float32 by default; float64 passes
through untouched, which is what the finite-difference checks use).  Every
op records its inputs and a closure that pushes the output gradient onto
them; ``backward`` on a scalar walks that record once in reverse topological
order, summing gradients where a tensor is reused.  Parallelism is across
independent graphs, never within one.
"""

from __future__ import annotations

import numpy as np

from .errors import SzDetectError


class ShapeMismatch(SzDetectError):
    pass


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate .grad of every requires_grad tensor reachable from here."""
        if self.data.ndim != 0:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def backward(loss: Tensor) -> None:
    loss.backward()


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; recursion would overflow on long LSTM chains
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward_fn is None:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.reshape(t.data.shape).copy()
    else:
        t.grad += g.reshape(t.data.shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward_fn is not None
                             for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# --- elementwise and linear ops -------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands: {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a single vector, or row-wise for a (batch, d) matrix."""
    if w.data.ndim != 2 or b.data.ndim != 1 or w.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatch(f"dense params: w {w.shape}, b {b.shape}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeMismatch(f"dense input {x.shape} vs w {w.shape}")
    batched = x.data.ndim == 2

    def bwd(g):
        if batched:
            _accumulate(x, g @ w.data)
            _accumulate(w, g.T @ x.data)
            _accumulate(b, g.sum(axis=0))
        else:
            _accumulate(x, g @ w.data)
            _accumulate(w, np.outer(g, x.data))
            _accumulate(b, g)

    return _make(x.data @ w.data.T + b.data, (x, w, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype)

    def bwd(g):
        _accumulate(x, g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bwd(g):
        _accumulate(x, g * (1.0 - t * t))

    return _make(t, (x,), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), bwd)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to (C, H, W) or (N, C, H, W) feature maps."""
    single = x.data.ndim == 3
    c_axis = 0 if single else 1
    if b.data.ndim != 1 or x.data.shape[c_axis] != b.data.shape[0]:
        raise ShapeMismatch(f"channel bias {b.shape} vs input {x.shape}")
    shape = [1] * x.data.ndim
    shape[c_axis] = b.data.shape[0]

    def bwd(g):
        _accumulate(x, g)
        axes = tuple(i for i in range(g.ndim) if i != c_axis)
        _accumulate(b, g.sum(axis=axes))

    return _make(x.data + b.data.reshape(shape), (x, b), bwd)


def stack_rows(xs: list[Tensor]) -> Tensor:
    """Concatenate tensors along axis 0 (n-ary, single copy)."""
    sizes = [x.data.shape[0] for x in xs]

    def bwd(g):
        off = 0
        for x, s in zip(xs, sizes):
            _accumulate(x, g[off:off + s])
            off += s

    return _make(np.concatenate([x.data for x in xs], axis=0), tuple(xs), bwd)


def split_rows(x: Tensor, parts: int) -> list[Tensor]:
    """Split axis 0 into equal parts; inverse of stack_rows."""
    rows = x.data.shape[0]
    if rows % parts:
        raise ShapeMismatch(f"cannot split {rows} rows into {parts} parts")
    step = rows // parts
    outs = []
    for i in range(parts):
        lo = i * step

        def bwd(g, lo=lo):
            full = np.zeros_like(x.data)
            full[lo:lo + step] = g
            _accumulate(x, full)

        outs.append(_make(x.data[lo:lo + step].copy(), (x,), bwd))
    return outs


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ShapeMismatch(f"concat: ranks differ, {a.shape} vs {b.shape}")
    split = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    try:
        data = np.concatenate([a.data, b.data], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: {a.shape} vs {b.shape} on axis {axis}") from None
    return _make(data, (a, b), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        _accumulate(x, np.full_like(x.data, g / n))

    return _make(np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype),
                 (x,), bwd)


# --- spatial ops ------------------------------------------------------------

def _conv_raw(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Cross-correlation of (N, Ci, H, W) with (Co, Ci, k, k)."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, ci * k * k, ho * wo)
    out = np.einsum("ok,nkp->nop", w.reshape(co, ci * k * k), cols,
                    optimize=True)
    return out.reshape(n, co, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), unit stride.

    Input is (C_in, H, W) or batched (N, C_in, H, W); kernels are
    (C_out, C_in, k, k) with odd k.
    """
    single = x.data.ndim == 3
    xd = x.data[np.newaxis] if single else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernels {w.shape}")
    if w.data.shape[2] != w.data.shape[3] or w.data.shape[2] % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernels must be square with odd side, "
                            f"got {w.shape}")
    if xd.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"conv2d: {xd.shape[1]} input channels vs "
                            f"kernels for {w.data.shape[1]}")
    k = w.data.shape[2]
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel {k}")

    out, _ = _conv_raw(xd, w.data, padding)
    co = w.data.shape[0]

    def bwd(g):
        gd = g[np.newaxis] if single else g
        n = xd.shape[0]
        ho, wo = gd.shape[2], gd.shape[3]
        _, cols = _conv_raw(xd, w.data, padding)  # recomputed, not cached
        gw = np.einsum("nop,nkp->ok", gd.reshape(n, co, ho * wo), cols,
                       optimize=True)
        _accumulate(w, gw.reshape(w.data.shape))
        # dL/dx is the full correlation of the output grad with flipped,
        # in/out-swapped kernels
        w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx, _ = _conv_raw(gd, np.ascontiguousarray(w_flip), k - 1 - padding)
        _accumulate(x, gx[0] if single else gx)

    return _make(out[0] if single else out, (x, w), bwd)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties give the gradient to the first
    (row-major) maximum of each cell."""
    single = x.data.ndim == 3
    xd = x.data[np.newaxis] if single else x.data
    if xd.ndim != 4 or xd.shape[2] % 2 or xd.shape[3] % 2:
        raise ShapeMismatch(f"maxpool2d: need even spatial dims, got {x.shape}")
    n, c, h, wd = xd.shape
    cells = xd.reshape(n, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    cells = cells.reshape(n, c, h // 2, wd // 2, 4)
    idx = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, idx[..., np.newaxis], axis=-1)[..., 0]

    def bwd(g):
        gd = g[np.newaxis] if single else g
        scattered = np.zeros((n, c, h // 2, wd // 2, 4), dtype=gd.dtype)
        np.put_along_axis(scattered, idx[..., np.newaxis],
                          gd[..., np.newaxis], axis=-1)
        gx = scattered.reshape(n, c, h // 2, wd // 2, 2, 2)
        gx = gx.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, wd)
        _accumulate(x, gx[0] if single else gx)

    return _make(out[0] if single else out, (x,), bwd)


def flatten_rows(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod); plain reshape with a reshape adjoint."""
    shape = x.data.shape
    out = x.data.reshape(shape[0], -1)

    def bwd(g):
        _accumulate(x, g.reshape(shape))

    return _make(out, (x,), bwd)


# --- recurrent cell ---------------------------------------------------------

def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, params) -> tuple[Tensor, Tensor]:
    """One LSTM step over [x_t, h_prev] with four sigmoid/tanh gates.

    ``params`` carries w_i/w_f/w_g/w_o over the concatenated input and
    b_i/b_f/b_g/b_o.  Built from primitive ops, so the adjoint is free.
    """
    z = concat(x_t, h_prev, axis=x_t.data.ndim - 1)
    i = sigmoid(dense(z, params.w_i, params.b_i))
    f = sigmoid(dense(z, params.w_f, params.b_f))
    g = tanh(dense(z, params.w_g, params.b_g))
    o = sigmoid(dense(z, params.w_o, params.b_o))
    c_t = add(mul(f, c_prev), mul(i, g))
    h_t = mul(o, tanh(c_t))
    return h_t, c_t


# --- loss -------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (C,) or (batch, C) logits against int labels.

    Stabilized by max subtraction; the scalar is accumulated in 64-bit.
    """
    single = logits.data.ndim == 1
    z = logits.data[np.newaxis] if single else logits.data
    if z.ndim != 2:
        raise ShapeMismatch(f"logits must be (C,) or (batch, C), got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ShapeMismatch(f"labels {y.shape} vs logits {logits.shape}")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ShapeMismatch("label out of range")

    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(z.shape[0]), y]
    loss = np.asarray((log_norm - picked).mean())

    def bwd(g):
        p = np.exp(shifted - log_norm[:, np.newaxis])
        p[np.arange(z.shape[0]), y] -= 1.0
        p *= float(g) / z.shape[0]
        _accumulate(logits, p[0] if single else p)

    return _make(loss, (logits,), bwd)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain (non-recording) softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- optimizer --------------------------------------------------------------

def rmsprop_step(params, grads, state, lr: float = 0.001, rho: float = 0.9,
                 eps: float = 1e-8):
    """One RMSprop update on a list of arrays.

    E <- rho*E + (1-rho)*g^2;  theta <- theta - lr*g/sqrt(E + eps).
    Returns (new_params, new_state); passing state=None starts from E = 0.
    """
    if state is None:
        state = [np.zeros_like(p) for p in params]
    new_params, new_state = [], []
    for p, g, e in zip(params, grads, state):
        e_new = rho * e + (1.0 - rho) * g * g
        new_state.append(e_new)
        new_params.append(p - lr * g / np.sqrt(e_new + eps))
    return new_params, new_state


class RmsProp:
    """In-place RMSprop over a list of parameter Tensors."""

    def __init__(self, tensors: list[Tensor], lr: float = 0.001,
                 rho: float = 0.9, eps: float = 1e-8):
        self.tensors = tensors
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state = [np.zeros_like(t.data) for t in tensors]

    def step(self) -> None:
        grads = []
        for t in self.tensors:
            grads.append(np.zeros_like(t.data) if t.grad is None else t.grad)
        values, self.state = rmsprop_step(
            [t.data for t in self.tensors], grads, self.state,
            lr=self.lr, rho=self.rho, eps=self.eps)
        for t, v in zip(self.tensors, values):
            t.data = v.astype(t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None
