"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is stored as row-major float64; shapes are explicit and the only
implicit broadcasting allowed is scalar-vs-tensor.  Operations record
themselves on the innermost active :class:`Tape` whenever an input requires
gradients; ``Tape.backward`` then walks the records in reverse to accumulate
gradients on the leaves.  The op set is deliberately small: exactly what an
encoder/decoder conv stack and a single-block attention denoiser need.

Gradient correctness is checked against central differences via
:func:`finite_diff_check`; ``REGISTERED_OPS`` lists every op that records on
the tape so the test suite can prove coverage.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


REGISTERED_OPS: set[str] = set()


def _register(name: str) -> str:
    REGISTERED_OPS.add(name)
    return name


_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations for one backward pass.

    Parents always precede children in ``nodes``, so a single reverse sweep
    is a valid reverse-topological traversal.  A tape that has run backward
    refuses further recording until ``reset()``.
    """

    def __init__(self):
        self.nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def record(self, name, out, parents, vjp):
        if self._consumed:
            raise RuntimeError(
                f"tape already consumed by backward; call reset() before recording '{name}'"
            )
        self.nodes.append((out, parents, vjp))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every recorded tensor."""
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ShapeError("backward requires a scalar loss tensor")
        if self._consumed:
            raise RuntimeError("tape already consumed by backward; call reset() first")
        loss.grad = np.ones_like(loss.data)
        for out, parents, vjp in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
        self._consumed = True

    def reset(self):
        self.nodes.clear()
        self._consumed = False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_out(name, data, parents, vjp):
    tape = _active_tape()
    req = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        tape.record(name, out, parents, vjp)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _reduce_like(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.data.shape:
        return grad
    return np.asarray(grad.sum()).reshape(t.data.shape)


def _check_same_or_scalar(name, a: Tensor, b: Tensor):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops

ADD = _register("add")
SUB = _register("sub")
MUL = _register("mul")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar("add", a, b)
    data = a.data + b.data

    def vjp(g):
        return _reduce_like(g, a), _reduce_like(g, b)

    return _make_out(ADD, data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar("sub", a, b)
    data = a.data - b.data

    def vjp(g):
        return _reduce_like(g, a), _reduce_like(-g, b)

    return _make_out(SUB, data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar("mul", a, b)
    data = a.data * b.data

    def vjp(g):
        return _reduce_like(g * b.data, a), _reduce_like(g * a.data, b)

    return _make_out(MUL, data, (a, b), vjp)


MATMUL = _register("matmul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make_out(MATMUL, data, (a, b), vjp)


LEAKY_RELU = _register("leaky_relu")


def leaky_relu(x, alpha: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    data = np.where(pos, x.data, alpha * x.data)

    def vjp(g):
        return (np.where(pos, g, alpha * g),)

    return _make_out(LEAKY_RELU, data, (x,), vjp)


SOFTMAX = _register("softmax")


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make_out(SOFTMAX, data, (x,), vjp)


RESHAPE = _register("reshape")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make_out(RESHAPE, data, (x,), vjp)


TRANSPOSE = _register("transpose")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = np.argsort(axes)
    data = x.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make_out(TRANSPOSE, data, (x,), vjp)


CONCAT = _register("concat")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make_out(CONCAT, data, tuple(tensors), vjp)


SLICE0 = _register("slice0")


def slice0(x, start: int, stop: int) -> Tensor:
    """Slice along the leading axis."""
    x = _as_tensor(x)
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice0: range [{start}, {stop}) invalid for shape {x.shape}")
    data = x.data[start:stop]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make_out(SLICE0, data, (x,), vjp)


BIAS_ADD = _register("bias_add")


def bias_add(x, b) -> Tensor:
    """Add a vector over the last axis of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    data = x.data + b.data

    def vjp(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return _make_out(BIAS_ADD, data, (x, b), vjp)


EMBEDDING = _register("embedding")


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.shape[0]}) in lookup"
        )
    data = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make_out(EMBEDDING, data, (table,), vjp)


SUM = _register("sum")


def tensor_sum(x) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make_out(SUM, data, (x,), vjp)


def stop_gradient(x) -> Tensor:
    """Forward the value, block the gradient.  Never records on the tape."""
    x = _as_tensor(x)
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# losses

MSE = _register("mse")


def mse(pred, target) -> Tensor:
    """Mean squared error over all entries."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = max(pred.size, 1)
    data = np.asarray((diff * diff).sum() / n)

    def vjp(g):
        scale = 2.0 * float(g) / n
        return scale * diff, -scale * diff

    return _make_out(MSE, data, (pred, target), vjp)


CROSS_ENTROPY = _register("cross_entropy")


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean categorical cross-entropy from raw logits.

    ``logits`` is (N, K), ``targets`` an integer vector of length N, and
    ``weights`` an optional nonnegative vector of length N (e.g. an indicator
    of which positions contribute).  The result is
    sum_i w_i * nll_i / sum_i w_i, or exactly 0 when all weights vanish.
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets)
    if logits.ndim != 2 or tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}"
        )
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: target class out of range")
    n, k = logits.shape
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise ShapeError(f"cross_entropy: weights shape {w.shape} != ({n},)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), tgt]
    wsum = w.sum()
    if wsum <= 0.0:
        data = np.asarray(0.0)

        def vjp_zero(g):
            return (np.zeros_like(logits.data),)

        return _make_out(CROSS_ENTROPY, data, (logits,), vjp_zero)
    data = np.asarray(float((w * nll).sum() / wsum))
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def vjp(g):
        gl = probs.copy()
        gl[np.arange(n), tgt] -= 1.0
        gl *= (w / wsum)[:, None] * float(g)
        return (gl,)

    return _make_out(CROSS_ENTROPY, data, (logits,), vjp)


# ---------------------------------------------------------------------------
# 3-D convolution machinery (im2col with cached index maps)

_COL_CACHE: dict = {}


def _conv_geometry(in_shape, kshape, stride, padding):
    cin, d, h, w = in_shape
    kd, kh, kw = kshape
    dp, hp, wp = d + 2 * padding, h + 2 * padding, w + 2 * padding
    if dp < kd or hp < kh or wp < kw:
        raise ShapeError(
            f"conv3d: kernel {kshape} larger than padded input {(dp, hp, wp)}"
        )
    do = (dp - kd) // stride + 1
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return (dp, hp, wp), (do, ho, wo)


def _col_index(in_shape, kshape, stride, padding):
    """Flat indices into the padded input for every im2col column entry."""
    key = (in_shape, kshape, stride, padding)
    cached = _COL_CACHE.get(key)
    if cached is not None:
        return cached
    cin = in_shape[0]
    kd, kh, kw = kshape
    (dp, hp, wp), (do, ho, wo) = _conv_geometry(in_shape, kshape, stride, padding)
    flat = np.arange(cin * dp * hp * wp, dtype=np.int64).reshape(cin, dp, hp, wp)
    s = flat.strides
    view = np.lib.stride_tricks.as_strided(
        flat,
        shape=(cin, kd, kh, kw, do, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[1] * stride, s[2] * stride, s[3] * stride),
        writeable=False,
    )
    idx = view.reshape(cin * kd * kh * kw, do * ho * wo).copy()
    _COL_CACHE[key] = idx
    return idx


def _pad3(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def _im2col(x, kshape, stride, padding):
    xp = _pad3(x, padding)
    idx = _col_index(x.shape, kshape, stride, padding)
    return xp.reshape(-1)[idx], xp.shape


def _conv_forward(x, w, stride, padding):
    cout = w.shape[0]
    cols, _ = _im2col(x, w.shape[2:], stride, padding)
    _, out_sp = _conv_geometry(x.shape, w.shape[2:], stride, padding)
    y = w.reshape(cout, -1) @ cols
    return y.reshape(cout, *out_sp)


def _conv_input_grad(g, w, stride, padding, in_shape):
    cout = w.shape[0]
    idx = _col_index(in_shape, w.shape[2:], stride, padding)
    gcols = w.reshape(cout, -1).T @ g.reshape(cout, -1)
    p = padding
    cin, d, h, w_ = in_shape
    padded_size = cin * (d + 2 * p) * (h + 2 * p) * (w_ + 2 * p)
    gflat = np.bincount(idx.reshape(-1), weights=gcols.reshape(-1), minlength=padded_size)
    gx = gflat.reshape(cin, d + 2 * p, h + 2 * p, w_ + 2 * p)
    if p:
        gx = gx[:, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(gx)


def _conv_weight_grad(x, g, kshape, stride, padding):
    cout = g.shape[0]
    cols, _ = _im2col(x, kshape, stride, padding)
    gw = g.reshape(cout, -1) @ cols.T
    return gw.reshape(cout, x.shape[0], *kshape)


CONV3D = _register("conv3d")


def conv3d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation of x:(Cin,D,H,W) with w:(Cout,Cin,kd,kh,kw).

    Valid padding by default; pass ``padding`` explicitly for anything else.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: need x (Cin,D,H,W) and w (Cout,Cin,kd,kh,kw), got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(
            f"conv3d: input channels {x.shape[0]} != kernel channels {w.shape[1]}"
        )
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    data = _conv_forward(x.data, w.data, stride, padding)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias {b.shape} != ({w.shape[0]},)")
        data = data + b.data[:, None, None, None]
        parents.append(b)

    def vjp(g):
        gx = _conv_input_grad(g, w.data, stride, padding, x.data.shape)
        gw = _conv_weight_grad(x.data, g, w.data.shape[2:], stride, padding)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    return _make_out(CONV3D, data, tuple(parents), vjp)


CONV3D_TRANSPOSE = _register("conv3d_transpose")


def conv3d_transpose(
    x, w, b=None, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Transposed 3-D convolution; x:(Cin,d,h,w), w:(Cin,Cout,kd,kh,kw).

    Output extent per axis is (in-1)*stride - 2*padding + k + output_padding,
    i.e. the adjoint of conv3d with the same stride/padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d_transpose: need x (Cin,d,h,w) and w (Cin,Cout,kd,kh,kw), got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[0]:
        raise ShapeError(
            f"conv3d_transpose: input channels {x.shape[0]} != kernel channels {w.shape[0]}"
        )
    if not (0 <= output_padding < stride):
        raise ShapeError(
            f"conv3d_transpose: output_padding {output_padding} must be in [0, stride)"
        )
    cin, cout = w.shape[0], w.shape[1]
    kshape = w.shape[2:]
    out_sp = tuple(
        (x.shape[1 + i] - 1) * stride - 2 * padding + kshape[i] + output_padding
        for i in range(3)
    )
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d_transpose: output extents {out_sp} collapse")
    big_shape = (cout,) + out_sp
    data = _conv_input_grad(x.data, w.data, stride, padding, big_shape)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv3d_transpose: bias {b.shape} != ({cout},)")
        data = data + b.data[:, None, None, None]
        parents.append(b)

    def vjp(g):
        gx = _conv_forward(g, w.data, stride, padding)
        gw = _conv_weight_grad(g, x.data, kshape, stride, padding)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2, 3)))
        return tuple(grads)

    return _make_out(CONV3D_TRANSPOSE, data, tuple(parents), vjp)


# ---------------------------------------------------------------------------
# gradient verification and optimization

def finite_diff_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between taped gradients and central differences.

    ``f`` maps a tensor to a scalar tensor.  The analytic gradient is taken
    on a private tape; numeric derivatives perturb each entry of ``x`` by
    +/- eps with no tape active.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x_work = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(x_work)
    if y.size != 1:
        raise ShapeError("finite_diff_check requires a scalar-valued function")
    tape.backward(y)
    analytic = (
        x_work.grad.copy() if x_work.grad is not None else np.zeros_like(x_work.data)
    )
    flat = x_work.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x_work).item()
        flat[i] = orig - eps
        lo = f(x_work).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x_work.data.shape)
    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))


class Adam:
    """Adam with bias correction; state is per-parameter and deterministic."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= scale * m / (np.sqrt(v) + self.eps)
