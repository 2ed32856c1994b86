"""Dense float64 tensors with a dynamic reverse-mode differentiation tape.

Values are immutable after creation.  Ops executed while a Tape is active
record themselves on it; without an active tape they are plain numpy
evaluations.  The tape is an append-only list of nodes in execution order,
so operands always precede their consumers and one reverse sweep visits
each node exactly once.  Every op output is checked for NaN/Inf; a
non-finite value anywhere is a hard error naming the op.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(ValueError):
    """Invalid tensor operation (shape, domain, or tape misuse)."""


class NonFiniteError(TensorError):
    """An op or gradient produced NaN or Inf."""


_ACTIVE_TAPE: "Tape | None" = None


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _ensure_finite(name: str, data: np.ndarray) -> None:
    # single-pass screen: any NaN/Inf poisons the sum (desk-scale values
    # cannot overflow a finite sum); the precise check only runs to confirm
    if math.isfinite(float(np.sum(data))):
        return
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{name}' produced non-finite values")


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_f64(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def tracked(self) -> bool:
        return self.tape is not None and self.tape is _ACTIVE_TAPE

    def __repr__(self) -> str:
        tag = "" if not self.tracked() else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar ----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def flip_h(self) -> "Tensor":
        return flip_h(self)


class Tape:
    """Append-only record of recorded operations, consumed by `backward`.

    Rebuilt on every iteration (dynamic); one tape per logical training
    stream.  `watch` registers a leaf; `backward` returns d(loss)/d(leaf)
    for every watched leaf, zeros for leaves the loss never touched.
    """

    def __init__(self):
        self._names: list[str] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[Callable | None] = []
        self._leaf_shapes: list[tuple[int, ...] | None] = []
        self._watched: dict[str, int] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TensorError("a tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._names)

    def _append(self, name, parents, vjp, leaf_shape=None) -> int:
        self._names.append(name)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._leaf_shapes.append(leaf_shape)
        return len(self._names) - 1

    def watch(self, value, name: str) -> Tensor:
        """Register a leaf tensor whose gradient `backward` will report."""
        if self._consumed:
            raise TensorError("tape already consumed")
        if name in self._watched:
            raise TensorError(f"leaf '{name}' watched twice")
        data = _as_f64(value)
        node = self._append(f"leaf:{name}", (), None, leaf_shape=data.shape)
        self._watched[name] = node
        return Tensor(data, self, node)

    def backward(self, loss: Tensor) -> dict[str, Tensor]:
        """Reverse sweep from a scalar loss; consumes the tape.

        Returns d(loss)/d(leaf) for every watched leaf.  NaN/Inf in any
        propagated gradient raises naming the producing node.
        """
        if self._consumed:
            raise TensorError("tape already consumed")
        if loss.tape is not self or loss.node is None:
            raise TensorError("loss was not produced under this tape")
        if loss.shape != ():
            raise TensorError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
        for nid in range(loss.node, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            vjp = self._vjps[nid]
            if vjp is None:  # leaf
                grads[nid] = g
                continue
            parent_grads = vjp(g)
            for pid, pg in zip(self._parents[nid], parent_grads):
                if pid is None or pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteError(
                        f"non-finite gradient from node {nid} ('{self._names[nid]}')"
                    )
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg

        out = {}
        for name, nid in self._watched.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros(self._leaf_shapes[nid], dtype=np.float64)
            out[name] = Tensor(np.ascontiguousarray(g))
        return out


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


# ---------------------------------------------------------------------------
# op recording machinery
# ---------------------------------------------------------------------------


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result; register on the active tape if any input is tracked.

    `vjp(g)` must return one gradient array (or None) per input, in order.
    """
    _ensure_finite(name, out)
    tape = _ACTIVE_TAPE
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node if t.tracked() else None for t in inputs)
    if all(p is None for p in parents):
        return Tensor(out)
    node = tape._append(name, parents, vjp)
    return Tensor(out, tape, node)


def custom_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Register a hand-written differentiable op on the active tape.

    `vjp(g)` must return one gradient array (or None) per input, in input
    order; callers own its correctness and should back it with a
    finite-difference test.
    """
    return _record(name, np.asarray(out_data, dtype=np.float64), tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting allowed)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data
    return _record(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data
    return _record(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if np.any(b.data == 0.0):
        raise TensorError("div by exact zero")
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _record(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _coerce(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise TensorError("log domain: input must be strictly positive")
    out = np.log(a.data)
    ad = a.data
    return _record("log", out, (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise TensorError("sqrt domain: input must be nonnegative")
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    # subgradient 0 at 0 (np.sign(0) == 0)
    a = _coerce(a)
    sgn = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sgn,))


def sin(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    return _record("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    return _record("cos", np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    # ln(1+e^x) = max(x,0) + log1p(e^-|x|), stable for large |x|
    a = _coerce(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 1.0 / (1.0 + np.exp(-np.abs(ad)))
    deriv = np.where(ad >= 0, sig, 1.0 - sig)
    return _record("softplus", out, (a,), lambda g: (g * deriv,))


def relu(a) -> Tensor:
    # subgradient 0 at 0
    a = _coerce(a)
    gate = (a.data > 0).astype(np.float64)
    return _record("relu", a.data * gate, (a,), lambda g: (g * gate,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _coerce(a)
    neg = a.data <= 0
    out = a.data.copy()
    out[neg] *= slope

    def vjp(g):
        gx = g.copy()
        gx[neg] *= slope
        return (gx,)

    return _record("leaky_relu", out, (a,), vjp)


def maximum(a, scalar: float) -> Tensor:
    """max(a, scalar) with subgradient 0 on the clamped side and at ties."""
    a = _coerce(a)
    c = float(scalar)
    gate = (a.data > c).astype(np.float64)
    return _record("maximum", np.maximum(a.data, c), (a,), lambda g: (g * gate,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    out = a.data.reshape(shape)
    in_shape = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(in_shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, ts, vjp)


def slice_(a, key) -> Tensor:
    """Basic numpy indexing (ints/slices); gradient scatters into zeros."""
    a = _coerce(a)
    out = a.data[key]
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _record("slice", np.ascontiguousarray(out), (a,), vjp)


def flip_h(a) -> Tensor:
    """Horizontal flip: reverse the last (width) axis."""
    a = _coerce(a)
    out = np.ascontiguousarray(a.data[..., ::-1])
    return _record("flip_h", out, (a,), lambda g: (np.ascontiguousarray(g[..., ::-1]),))


def stack_scalars(scalars) -> Tensor:
    """[] -> [n] assembly, composed from reshape+concat."""
    return concat([reshape(s, (1,)) for s in scalars], axis=0)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    in_shape = a.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, in_shape).copy(),)

    return _record("mean", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2D @ 2D or 2D @ 1D (matrix-vector)."""
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise TensorError(f"matmul shapes {ad.shape} @ {bd.shape}")
        out = ad @ bd
        return _record(
            "matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g)
        )
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise TensorError(f"matmul shapes {ad.shape} @ {bd.shape}")
        out = ad @ bd
        return _record(
            "matvec", out, (a, b), lambda g: (np.outer(g, bd), ad.T @ g)
        )
    raise TensorError(f"matmul supports 2D@2D or 2D@1D, got {ad.shape} @ {bd.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """[C,H,W] -> [C*k*k, Ho*Wo] patch matrix (copy), plus output dims."""
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[1], x.shape[2]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # [C, Ho, Wo, k, k]
    cols = view.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,k,k], zero padding.

    Requires odd k and an exactly integral output size
    (H + 2*pad - k) / stride + 1.  Differentiable w.r.t. both operands;
    patch matrices are recomputed in the backward pass rather than cached.
    """
    x, kernel = _coerce(x), _coerce(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise TensorError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape}, {kernel.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise TensorError(f"conv2d kernel must be square with odd k, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise TensorError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {c_in}")
    h, w = x.shape[1], x.shape[2]
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise TensorError(
            f"conv2d output size not integral for H,W={h},{w} k={k} stride={stride} pad={pad}"
        )
    xd, kd = x.data, kernel.data
    cols, ho, wo = _im2col(xd, k, stride, pad)
    out = (kd.reshape(c_out, c_in * k * k) @ cols).reshape(c_out, ho, wo)

    def vjp(g):
        gf = g.reshape(c_out, ho * wo)
        # kernel gradient: correlate grad with the forward pass's patches
        # (the closure keeps them alive only while the tape does)
        gk = (gf @ cols.T).reshape(c_out, c_in, k, k)
        if stride == 1:
            # input gradient is a full correlation of the output gradient
            # with the 180-degree-rotated, channel-transposed kernel
            rot = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * k * k)
            gcols, gh, gw = _im2col(g, k, 1, k - 1)
            gx_pad = (rot @ gcols).reshape(c_in, gh, gw)
            gx = gx_pad[:, pad : pad + h, pad : pad + w] if pad else gx_pad
            return (np.ascontiguousarray(gx), gk)
        # strided path: one GEMM to per-tap patch grads, then scatter the
        # k*k taps back onto the padded grid
        gcols = (kd.reshape(c_out, c_in * k * k).T @ gf).reshape(c_in, k, k, ho, wo)
        gx_pad = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=np.float64)
        for di in range(k):
            for dj in range(k):
                gx_pad[
                    :,
                    di : di + stride * (ho - 1) + 1 : stride,
                    dj : dj + stride * (wo - 1) + 1 : stride,
                ] += gcols[:, di, dj]
        gx = gx_pad[:, pad : pad + h, pad : pad + w] if pad else gx_pad
        return (np.ascontiguousarray(gx), gk)

    return _record("conv2d", out, (x, kernel), vjp)


# ---------------------------------------------------------------------------
# sampling / gather / scatter
# ---------------------------------------------------------------------------


def grid_sample_bilinear(image, grid) -> Tensor:
    """Sample [C,H,W] at continuous pixel coordinates, bilinear, border clamp.

    `grid` has shape [..., 2] holding (u, v) in pixel units; the output is
    [C, ...].  Coordinates outside [0,W-1]x[0,H-1] clamp to the border and
    receive zero coordinate gradient there.  Differentiable w.r.t. both the
    image values and the coordinates.
    """
    image, grid = _coerce(image), _coerce(grid)
    if image.ndim != 3 or grid.shape[-1] != 2:
        raise TensorError(f"grid_sample expects [C,H,W] and [...,2], got {image.shape}, {grid.shape}")
    c, h, w = image.shape
    u = grid.data[..., 0]
    v = grid.data[..., 1]
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(uc), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(vc), 0, h - 2).astype(np.int64)
    fu = uc - u0
    fv = vc - v0
    flat = image.data.reshape(c, h * w)
    i00 = v0 * w + u0
    i01 = i00 + 1
    i10 = i00 + w
    i11 = i10 + 1
    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv
    out = (
        flat[:, i00] * w00 + flat[:, i01] * w01 + flat[:, i10] * w10 + flat[:, i11] * w11
    )
    # derivative of the clamp: zero outside the open interior
    du_gate = ((u > 0.0) & (u < w - 1.0)).astype(np.float64)
    dv_gate = ((v > 0.0) & (v < h - 1.0)).astype(np.float64)

    def vjp(g):
        # g: [C, ...]; image gradient scatters into the 4 corners
        gimg = np.zeros((c, h * w), dtype=np.float64)
        gl = g.reshape(c, -1)
        for idx, wt in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
            idx_f = idx.ravel()
            wt_f = wt.ravel()
            for ch in range(c):
                gimg[ch] += np.bincount(idx_f, weights=gl[ch] * wt_f, minlength=h * w)
        dval_du = (
            (flat[:, i01] - flat[:, i00]) * (1 - fv) + (flat[:, i11] - flat[:, i10]) * fv
        )
        dval_dv = (
            (flat[:, i10] - flat[:, i00]) * (1 - fu) + (flat[:, i11] - flat[:, i01]) * fu
        )
        gu = (g * dval_du).sum(axis=0) * du_gate
        gv = (g * dval_dv).sum(axis=0) * dv_gate
        ggrid = np.stack([gu, gv], axis=-1)
        return (gimg.reshape(c, h, w), ggrid)

    return _record("grid_sample", out, (image, grid), vjp)


def take(a, indices: np.ndarray) -> Tensor:
    """Gather from a 1D tensor; repeated indices accumulate in the gradient."""
    a = _coerce(a)
    if a.ndim != 1:
        raise TensorError(f"take expects a 1D tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]
    n = a.shape[0]

    def vjp(g):
        return (np.bincount(idx.ravel(), weights=g.ravel(), minlength=n),)

    return _record("take", out, (a,), vjp)


def scatter_cols(values, col_index: np.ndarray, total_cols: int) -> Tensor:
    """Place [C,P] columns at unique positions in a zero [C,total_cols]."""
    values = _coerce(values)
    if values.ndim != 2:
        raise TensorError(f"scatter_cols expects [C,P], got {values.shape}")
    idx = np.asarray(col_index, dtype=np.int64)
    out = np.zeros((values.shape[0], total_cols), dtype=np.float64)
    out[:, idx] = values.data
    return _record("scatter_cols", out, (values,), lambda g: (np.ascontiguousarray(g[:, idx]),))


def upsample2x(a) -> Tensor:
    """Nearest-neighbour x2 upsampling of [C,H,W]."""
    a = _coerce(a)
    if a.ndim != 3:
        raise TensorError(f"upsample2x expects [C,H,W], got {a.shape}")
    c, h, w = a.shape
    out = a.data.repeat(2, axis=1).repeat(2, axis=2)

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _record("upsample2x", out, (a,), vjp)


def channel_norm(a, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization per channel over spatial dims.

    The instance-norm core: y = (x - mean) / sqrt(var + eps) with moments
    over axes (1, 2) of a [C,H,W] input.  Fused with the closed-form
    gradient (1/s) * (g - mean(g) - y * mean(g*y)) to keep the tape short.
    """
    a = _coerce(a)
    if a.ndim != 3:
        raise TensorError(f"channel_norm expects [C,H,W], got {a.shape}")
    x = a.data
    mu = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    s = np.sqrt(var + eps)
    y = centered / s

    def vjp(g):
        g_mean = g.mean(axis=(1, 2), keepdims=True)
        gy_mean = (g * y).mean(axis=(1, 2), keepdims=True)
        return ((g - g_mean - y * gy_mean) / s,)

    return _record("channel_norm", y, (a,), vjp)


# ---------------------------------------------------------------------------
# composed helpers (no new backward rules)
# ---------------------------------------------------------------------------


def avg_pool2(a) -> Tensor:
    """2x2 average pooling of [C,H,W] (even H, W), built from reshape+mean."""
    a = _coerce(a)
    c, h, w = a.shape
    if h % 2 or w % 2:
        raise TensorError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    x = reshape(a, (c, h // 2, 2, w // 2, 2))
    return mean(x, axis=(2, 4))


# ---------------------------------------------------------------------------
# finite-difference verification oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element.

    `f` maps a numpy array to a float and must not use the tape; this keeps
    the oracle independent of the analytic path it checks.
    """
    if eps <= 0:
        raise TensorError("eps must be positive")
    x = _as_f64(x)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.copy().reshape(-1)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + eps
        hi = float(f(base.reshape(x.shape)))
        base[i] = orig - eps
        lo = float(f(base.reshape(x.shape)))
        base[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFiniteError("finite_diff_gradient: non-finite function value")
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def gradient_of(f, x: np.ndarray, name: str = "x") -> np.ndarray:
    """Analytic gradient of a Tensor-valued scalar function via the tape."""
    with Tape() as tape:
        leaf = tape.watch(x, name)
        loss = f(leaf)
    return tape.backward(loss)[name].data
