"""Minimal dense-tensor engine with reverse-mode differentiation.

Design constraints:
  * explicit shapes everywhere -- no broadcasting except the dedicated
    bias ops (`add_row_bias`, `add_col_bias`, `add_channel_bias`);
  * deterministic: identical inputs give bit-identical outputs, and
    `reduce_max` routes gradients to the first argmax on ties;
  * every op checks its output for NaN/Inf (disable via `set_check_finite`
    only if you know the graph is safe);
  * float64 for verification, float32 allowed for training.

The graph is define-by-run: each op returns a new Tensor holding a
backward closure over its parents.  `Tensor.backward()` walks the graph
once in reverse topological order; calling it twice on the same root is
an error because closures capture forward activations.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/Inf checking on op outputs; returns the previous value."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


def _checked(arr: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by tensor op")
    return arr


class Tensor:
    """Dense n-d array with optional gradient.

    `grad` is populated (same shape as `data`) only when
    `requires_grad` is true and a backward pass has reached this node.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn", "_op", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = _parents
        self._backward_fn = _backward
        self._op = _op
        self._done = False

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def backward(self):
        """Reverse-mode pass from a scalar root; each node visited once."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        if self._done:
            raise ContractError("backward() already ran on this graph; rebuild it first")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node._grad is not None:
                node._backward_fn(node._grad)
            node._done = True

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}, op={self._op})"


def tensor(data, requires_grad=False, dtype=np.float64) -> Tensor:
    """Create a leaf tensor with an explicit dtype."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def constant(data, like: Tensor | None = None, dtype=None) -> Tensor:
    """Non-differentiable tensor, dtype-matched to `like` when given."""
    if dtype is None:
        dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(data, dtype=dtype))


def _unary(x: Tensor, out_data, grad_fn, op: str) -> Tensor:
    out = Tensor(_checked(out_data), requires_grad=x.requires_grad,
                 _parents=(x,), _op=op)
    if x.requires_grad:
        def _bwd(g):
            x._accumulate(grad_fn(g))
        out._backward_fn = _bwd
    return out


def _binary(a: Tensor, b: Tensor, out_data, grad_a, grad_b, op: str) -> Tensor:
    rg = a.requires_grad or b.requires_grad
    out = Tensor(_checked(out_data), requires_grad=rg, _parents=(a, b), _op=op)
    if rg:
        def _bwd(g):
            if a.requires_grad:
                a._accumulate(grad_a(g))
            if b.requires_grad:
                b._accumulate(grad_b(g))
        out._backward_fn = _bwd
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- arithmetic ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data, lambda g: g * a.data, "mul")


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g, "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.data * c, lambda g: g * c, "scale")


def add_const(x: Tensor, c: float) -> Tensor:
    return _unary(x, x.data + float(c), lambda g: g, "add_const")


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., j] + b[j]; the only broadcast allowed on the last axis."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_row_bias: {x.shape} with bias {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _binary(x, b, x.data + b.data, lambda g: g,
                   lambda g: g.sum(axis=axes), "add_row_bias")


def add_col_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[i, :] + b[i] for a 2-d tensor (per-row scalar offset)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ShapeError(f"add_col_bias: {x.shape} with bias {b.shape}")
    return _binary(x, b, x.data + b.data[:, None], lambda g: g,
                   lambda g: g.sum(axis=1), "add_col_bias")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[c, :, :] + b[c] for a CHW tensor."""
    if x.data.ndim != 3 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.shape} with bias {b.shape}")
    return _binary(x, b, x.data + b.data[:, None, None], lambda g: g,
                   lambda g: g.sum(axis=(1, 2)), "add_channel_bias")


# -- elementwise nonlinearities ------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # stable two-branch form, exact at 0
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _unary(x, s, lambda g: g * s * (1.0 - s), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _unary(x, e, lambda g: g * e, "exp")


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data, "log")


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = x.data ** p
    return _unary(x, out, lambda g: g * p * x.data ** (p - 1.0), "power")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes through strictly inside (lo, hi)."""
    mask = (x.data > lo) & (x.data < hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda g: g * mask, "clamp")


def huber(x: Tensor, beta: float) -> Tensor:
    """Smooth-L1 applied elementwise: quadratic inside |x| < beta."""
    beta = float(beta)
    a = np.abs(x.data)
    inside = a < beta
    out = np.where(inside, 0.5 * x.data * x.data / beta, a - 0.5 * beta)
    dv = np.where(inside, x.data / beta, np.sign(x.data))
    return _unary(x, out, lambda g: g * dv, "huber")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul: operands must be 2-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    return _binary(a, b, a.data @ b.data,
                   lambda g: g @ b.data.T, lambda g: a.data.T @ g, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose: 2-d only")
    return _unary(x, x.data.T.copy(), lambda g: g.T, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(old), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    return _unary(x, np.ascontiguousarray(x.data.transpose(axes)),
                  lambda g: g.transpose(inv), "permute")


# -- structure ------------------------------------------------------------

def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    rg = any(t.requires_grad for t in tensors)
    out = Tensor(_checked(out_data), requires_grad=rg, _parents=tuple(tensors), _op="concat")
    if rg:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _bwd(g):
            for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(s, e)
                    t._accumulate(g[tuple(idx)])
        out._backward_fn = _bwd
    return out


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis; gradient is zero-padded back."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def _grad(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return full

    return _unary(x, x.data[idx].copy(), _grad, "narrow")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Pick rows of a 2-d tensor; adjoint of scatter_add_rows."""
    if x.data.ndim != 2:
        raise ShapeError("gather_rows: 2-d input required")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows: index out of range")

    def _grad(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return full

    return _unary(x, x.data[idx].copy(), _grad, "gather_rows")


def scatter_add_rows(src: Tensor, indices, num_rows: int) -> Tensor:
    """Accumulate src rows into a zero (num_rows, C) tensor; adjoint of gather_rows."""
    if src.data.ndim != 2:
        raise ShapeError("scatter_add_rows: 2-d input required")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != src.shape[0]:
        raise ShapeError("scatter_add_rows: one index per source row")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError("scatter_add_rows: index out of range")
    out_data = np.zeros((num_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out_data, idx, src.data)
    return _unary(src, out_data, lambda g: g[idx], "scatter_add_rows")


# -- reductions -----------------------------------------------------------

def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = x.data.sum().reshape(())
        return _unary(x, out, lambda g: np.full_like(x.data, float(g)), "sum")
    out = x.data.sum(axis=axis)
    return _unary(x, out, lambda g: np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = (x.data.sum() / n).reshape(())
    return _unary(x, out, lambda g: np.full_like(x.data, float(g) / n), "mean")


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along an axis; gradient goes to the first argmax on ties."""
    out = x.data.max(axis=axis)
    arg = np.argmax(x.data, axis=axis)

    def _grad(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, axis),
                          np.expand_dims(g, axis), axis=axis)
        return full

    return _unary(x, out, _grad, "reduce_max")


def softmax(x: Tensor, axis: int) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError("softmax: axis length must be >= 1")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _grad(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _unary(x, s, _grad, "softmax")


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable per-row log-sum-exp of a 2-d tensor, composed from primitives."""
    if x.data.ndim != 2:
        raise ShapeError("logsumexp_rows: 2-d input required")
    m = reduce_max(x, axis=1)
    shifted = add_col_bias(x, neg(m))
    return add(m, log(reduce_sum(exp(shifted), axis=1)))


# -- spatial ops ------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a CHW image with OIkk kernels plus channel bias.

    k must be odd (1 or 3 in this pipeline), stride in {1, 2}, pad in {0, 1}.
    Output extent is floor((H + 2*pad - k) / stride) + 1; a window walk that
    cannot fit the kernel at all is a shape error.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d: expects CHW input and OIkk weights")
    ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: kernel must be square and odd")
    if ci != ci_w:
        raise ShapeError(f"conv2d: input channels {ci} != kernel channels {ci_w}")
    if stride not in (1, 2) or pad not in (0, 1):
        raise ShapeError("conv2d: stride must be 1 or 2, pad 0 or 1")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError("conv2d: input smaller than kernel")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if b is not None and (b.data.ndim != 1 or b.shape[0] != co):
        raise ShapeError("conv2d: bias must be (C_out,)")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # (Ci, Ho, Wo, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(ci * kh * kw, ho * wo)
    w2 = w.data.reshape(co, ci * kh * kw)
    out_data = (w2 @ cols).reshape(co, ho, wo)
    if b is not None:
        out_data = out_data + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)
    rg = any(p.requires_grad for p in parents)
    out = Tensor(_checked(out_data), requires_grad=rg, _parents=parents, _op="conv2d")
    if rg:
        def _bwd(g):
            g2 = g.reshape(co, ho * wo)
            if w.requires_grad:
                w._accumulate((g2 @ cols.T).reshape(w.shape))
            if b is not None and b.requires_grad:
                b._accumulate(g2.sum(axis=1))
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(ci, kh, kw, ho, wo)
                dxp = np.zeros((ci, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                x._accumulate(dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp)
        out._backward_fn = _bwd
    return out


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of a CHW map; adjoint is block-sum."""
    if x.data.ndim != 3:
        raise ShapeError("upsample_nearest: CHW input required")
    f = int(factor)
    c, h, w = x.shape
    out = x.data.repeat(f, axis=1).repeat(f, axis=2)

    def _grad(g):
        return g.reshape(c, h, f, w, f).sum(axis=(2, 4))

    return _unary(x, out, _grad, "upsample_nearest")


# -- parameter initialization -------------------------------------------

def he_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> Tensor:
    """Kaiming-uniform leaf parameter."""
    bound = float(np.sqrt(6.0 / max(1, fan_in)))
    return tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=True) -> Tensor:
    return tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)
