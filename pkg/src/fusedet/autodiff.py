"""Dense float64 tensors on a define-by-run reverse-mode differentiation tape.

A :class:`Tape` records one forward computation and is rebuilt for every
new one.  Values are plain C-contiguous float64 numpy arrays; wrapping a
value in a :class:`Var` ties it to a tape node so exact reverse-mode
gradients can be pulled out of any scalar result.  Tensors are treated as
immutable once recorded.

Broadcasting is limited to scalar-with-tensor; anything fancier must be
spelled out with explicit ops.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _shp(a: np.ndarray) -> str:
    return "x".join(str(d) for d in a.shape) if a.ndim else "scalar"


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return np.ascontiguousarray(a)


class _Node:
    __slots__ = ("backward_fn",)

    def __init__(self, backward_fn):
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def _record(self, value: np.ndarray, backward_fn, requires_grad: bool) -> "Var":
        v = Var(self, len(self._nodes), value, requires_grad)
        self._nodes.append(_Node(backward_fn))
        return v

    def leaf(self, value, requires_grad: bool = False) -> "Var":
        return self._record(_as_array(value), None, requires_grad)

    def constant(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def __len__(self) -> int:
        return len(self._nodes)


class Var:
    """Tensor value bound to a tape node."""

    __slots__ = ("tape", "idx", "value", "requires_grad")

    def __init__(self, tape: Tape, idx: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; everything funnels into the module-level ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _find_tape(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _reduce_like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Collapse a broadcast gradient back to the shape of the operand."""
    if g.shape == ref.shape:
        return g
    return np.sum(g).reshape(ref.shape) if ref.size == 1 else g.reshape(ref.shape)


def _pair_shapes(op: str, a: Var, b: Var) -> None:
    if a.value.shape == b.value.shape:
        return
    if a.value.size == 1 or b.value.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {_shp(a.value)} and {_shp(b.value)}")


def add(a, b) -> Var:
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _pair_shapes("add", a, b)
    out = a.value + b.value

    def backward(g):
        return [(a, _reduce_like(g, a.value)), (b, _reduce_like(g, b.value))]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def sub(a, b) -> Var:
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _pair_shapes("sub", a, b)
    out = a.value - b.value

    def backward(g):
        return [(a, _reduce_like(g, a.value)), (b, _reduce_like(-g, b.value))]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def mul(a, b) -> Var:
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _pair_shapes("mul", a, b)
    out = a.value * b.value

    def backward(g):
        return [(a, _reduce_like(g * b.value, a.value)), (b, _reduce_like(g * a.value, b.value))]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def div(a, b) -> Var:
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _pair_shapes("div", a, b)
    if np.any(b.value == 0.0):
        raise ValueError("div: division by zero")
    out = a.value / b.value

    def backward(g):
        ga = _reduce_like(g / b.value, a.value)
        gb = _reduce_like(-g * a.value / (b.value * b.value), b.value)
        return [(a, ga), (b, gb)]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def matmul(a, b) -> Var:
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {_shp(a.value)} and {_shp(b.value)}")
    out = a.value @ b.value

    def backward(g):
        return [(a, g @ b.value.T), (b, a.value.T @ g)]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def relu(x: Var) -> Var:
    out = np.maximum(x.value, 0.0)
    mask = x.value > 0.0

    def backward(g):
        return [(x, g * mask)]

    return x.tape._record(out, backward, x.requires_grad)


def sigmoid(x: Var) -> Var:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def backward(g):
        return [(x, g * out * (1.0 - out))]

    return x.tape._record(out, backward, x.requires_grad)


def maximum(a, b) -> Var:
    """Elementwise max; gradient routes to the larger input, ties to the first."""
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"maximum: incompatible shapes {_shp(a.value)} and {_shp(b.value)}")
    take_a = a.value >= b.value
    out = np.where(take_a, a.value, b.value)

    def backward(g):
        return [(a, g * take_a), (b, g * ~take_a)]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def tsum(x: Var, axis=None) -> Var:
    out = np.sum(x.value, axis=axis)
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return [(x, np.broadcast_to(g, shape).copy())]
        ge = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(ge, shape).copy())]

    return x.tape._record(np.asarray(out, dtype=np.float64), backward, x.requires_grad)


def mean(x: Var, axis=None) -> Var:
    count = x.value.size if axis is None else np.prod(
        [x.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = np.mean(x.value, axis=axis)
    shape = x.value.shape

    def backward(g):
        if axis is None:
            return [(x, np.broadcast_to(g / count, shape).copy())]
        ge = np.expand_dims(g, axis) / count
        return [(x, np.broadcast_to(ge, shape).copy())]

    return x.tape._record(np.asarray(out, dtype=np.float64), backward, x.requires_grad)


def absolute(x: Var) -> Var:
    out = np.abs(x.value)
    sgn = np.sign(x.value)  # subgradient 0 at exact zeros

    def backward(g):
        return [(x, g * sgn)]

    return x.tape._record(out, backward, x.requires_grad)


def square(x: Var) -> Var:
    out = x.value * x.value

    def backward(g):
        return [(x, 2.0 * g * x.value)]

    return x.tape._record(out, backward, x.requires_grad)


def sqrt(x: Var) -> Var:
    if np.any(x.value < 0.0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.value)

    def backward(g):
        return [(x, g / (2.0 * out))]

    return x.tape._record(out, backward, x.requires_grad)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Padded sliding windows as a (C*kh*kw, Ho*Wo) column matrix."""
    c_in, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w + 2 * pw - kw) // stride + 1
    xp = np.zeros((c_in, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, Ho, Wo, kh, kw)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    return np.ascontiguousarray(cols), h_out, w_out


def _col2im(gcols: np.ndarray, shape: tuple[int, int, int], kh: int, kw: int, stride: int,
            h_out: int, w_out: int) -> np.ndarray:
    """Adjoint of _im2col: scatter column gradients back onto the image."""
    c_in, h, w = shape
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((c_in, h + 2 * ph, w + 2 * pw))
    g5 = gcols.reshape(c_in, kh, kw, h_out, w_out)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += g5[:, i, j]
    return gxp[:, ph:ph + h, pw:pw + w]


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1) -> Var:
    """2-D convolution, CHW layout, symmetric zero padding of kh//2, kw//2.

    Stride 1 preserves the spatial size; stride 2 halves it (ceil).
    """
    tape = x.tape
    w = _lift(tape, w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.value.ndim != 3 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: expected CHW input and OIKK kernel, got {_shp(x.value)} and {_shp(w.value)}")
    c_in, h, width = x.value.shape
    c_out, c_k, kh, kw = w.value.shape
    if c_k != c_in:
        raise ShapeError(f"conv2d: kernel expects {c_k} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if b is not None:
        b = _lift(tape, b)
        if b.value.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {_shp(b.value)} != ({c_out},)")
    cols, h_out, w_out = _im2col(x.value, kh, kw, stride)
    wm = w.value.reshape(c_out, c_in * kh * kw)
    out = (wm @ cols).reshape(c_out, h_out, w_out)
    if b is not None:
        out += b.value[:, None, None]

    def backward(g):
        gf = g.reshape(c_out, h_out * w_out)
        grads = []
        if x.requires_grad:
            gcols = wm.T @ gf
            grads.append((x, _col2im(gcols, x.value.shape, kh, kw, stride, h_out, w_out)))
        if w.requires_grad:
            grads.append((w, (gf @ cols.T).reshape(w.value.shape)))
        if b is not None and b.requires_grad:
            grads.append((b, g.sum(axis=(1, 2))))
        return grads

    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    return tape._record(out, backward, req)


def _corr1(img: np.ndarray, vec: np.ndarray, axis: int) -> np.ndarray:
    """1-D same-size correlation along one axis with zero padding."""
    k = vec.size
    p = k // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (p, p)
    xp = np.pad(img, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=axis)
    return win @ vec


_SEP_CACHE: dict[bytes, tuple[np.ndarray, np.ndarray] | None] = {}


def _separate_kernel(kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Rank-1 factor (col, row) of a separable kernel, else None."""
    key = kernel.tobytes() + bytes(kernel.shape)
    if key not in _SEP_CACHE:
        u, s, vt = np.linalg.svd(kernel)
        if s.size > 1 and s[1] > 1e-12 * s[0]:
            _SEP_CACHE[key] = None
        else:
            r = np.sqrt(s[0])
            _SEP_CACHE[key] = (u[:, 0] * r, vt[0] * r)
    return _SEP_CACHE[key]


def _corr2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size correlation of an HxW image with symmetric zero padding."""
    sep = _separate_kernel(kernel)
    if sep is not None:
        col, row = sep
        return _corr1(_corr1(img, row, axis=1), col, axis=0)
    kh, kw = kernel.shape
    cols, h_out, w_out = _im2col(img[None], kh, kw, 1)
    return (kernel.reshape(1, -1) @ cols).reshape(h_out, w_out)


def blur(x: Var, kernel: np.ndarray) -> Var:
    """Fixed-kernel 2-D blur of an HxW image, symmetric zero padding."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.value.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"blur: expected HxW image and 2-D kernel, got {_shp(x.value)} and {_shp(kernel)}")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"blur: kernel dims must be odd, got {kh}x{kw}")
    out = _corr2(x.value, kernel)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])

    def backward(g):
        # adjoint of same-zero-pad correlation is correlation with the flipped kernel
        return [(x, _corr2(g, flipped))]

    return x.tape._record(out, backward, x.requires_grad)


def upsample_nearest(x: Var, factor: int) -> Var:
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"upsample_nearest: factor must be a positive integer, got {factor}")
    if x.value.ndim not in (2, 3):
        raise ShapeError(f"upsample_nearest: expected HxW or CxHxW, got {_shp(x.value)}")
    out = np.repeat(np.repeat(x.value, factor, axis=-2), factor, axis=-1)

    def backward(g):
        if x.value.ndim == 2:
            h, w = x.value.shape
            gx = g.reshape(h, factor, w, factor).sum(axis=(1, 3))
        else:
            c, h, w = x.value.shape
            gx = g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
        return [(x, gx)]

    return x.tape._record(out, backward, x.requires_grad)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    if not parts:
        raise ValueError("concat: no inputs")
    tape = _find_tape(*parts)
    parts = [_lift(tape, p) for p in parts]
    nd = parts[0].value.ndim
    for p in parts[1:]:
        if p.value.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        for ax in range(nd):
            if ax != (axis % nd) and p.value.shape[ax] != parts[0].value.shape[ax]:
                raise ShapeError(
                    f"concat: shapes {_shp(parts[0].value)} and {_shp(p.value)} differ off-axis"
                )
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis % nd] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * nd
            sl[axis % nd] = slice(lo, hi)
            grads.append((p, g[tuple(sl)]))
        return grads

    return tape._record(out, backward, any(p.requires_grad for p in parts))


def reshape(x: Var, shape) -> Var:
    out = x.value.reshape(shape)
    orig = x.value.shape

    def backward(g):
        return [(x, g.reshape(orig))]

    return x.tape._record(out, backward, x.requires_grad)


def spatial_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Per-channel normalization over spatial positions with learned affine.

    Input is CxHxW; each channel is standardized by its own spatial mean
    and variance.  A single spatial location has no statistics: the
    normalized value is defined as 0 there, so the output is the affine
    bias alone.
    """
    tape = x.tape
    gamma, beta = _lift(tape, gamma), _lift(tape, beta)
    if x.value.ndim != 3:
        raise ShapeError(f"spatial_norm: expected CxHxW, got {_shp(x.value)}")
    c = x.value.shape[0]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"spatial_norm: affine shapes must be ({c},)")
    n = x.value.shape[1] * x.value.shape[2]
    if n == 1:
        xhat = np.zeros_like(x.value)
        istd = np.zeros(c)
    else:
        mu = x.value.mean(axis=(1, 2), keepdims=True)
        var = x.value.var(axis=(1, 2), keepdims=True)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.value - mu) * istd
        istd = istd.reshape(c)
    out = gamma.value[:, None, None] * xhat + beta.value[:, None, None]

    def backward(g):
        grads = []
        if x.requires_grad:
            if n == 1:
                grads.append((x, np.zeros_like(x.value)))
            else:
                gxhat = g * gamma.value[:, None, None]
                m1 = gxhat.mean(axis=(1, 2), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(1, 2), keepdims=True)
                grads.append((x, istd[:, None, None] * (gxhat - m1 - xhat * m2)))
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=(1, 2))))
        if beta.requires_grad:
            grads.append((beta, g.sum(axis=(1, 2))))
        return grads

    req = x.requires_grad or gamma.requires_grad or beta.requires_grad
    return tape._record(out, backward, req)


def rowwise_outer(a: Var, b: Var) -> Var:
    """All pairwise elementwise row products: (M,K),(C,K) -> (M*C,K).

    Row m*C+c of the output is a[m] * b[c]; this is the mask-weighting of
    feature rows used by the region branches.
    """
    tape = _find_tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(f"rowwise_outer: incompatible shapes {_shp(a.value)} and {_shp(b.value)}")
    m, k = a.value.shape
    c = b.value.shape[0]
    out = (a.value[:, None, :] * b.value[None, :, :]).reshape(m * c, k)

    def backward(g):
        g3 = g.reshape(m, c, k)
        return [(a, (g3 * b.value[None, :, :]).sum(axis=1)),
                (b, (g3 * a.value[:, None, :]).sum(axis=0))]

    return tape._record(out, backward, a.requires_grad or b.requires_grad)


def gather_pixels(x: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
    """Pick feature vectors at integer pixel locations: (C,H,W) -> (N,C)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if x.value.ndim != 3:
        raise ShapeError(f"gather_pixels: expected CxHxW, got {_shp(x.value)}")
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("gather_pixels: rows and cols must be equal-length 1-D")
    _, h, w = x.value.shape
    if np.any(rows < 0) or np.any(rows >= h) or np.any(cols < 0) or np.any(cols >= w):
        raise ValueError("gather_pixels: index out of bounds")
    out = x.value[:, rows, cols].T.copy()

    def backward(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (slice(None), rows, cols), g.T)
        return [(x, gx)]

    return x.tape._record(out, backward, x.requires_grad)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """Row-wise affine map: (N,Ci) @ (Ci,Co) + b."""
    tape = _find_tape(x, w)
    x, w = _lift(tape, x), _lift(tape, w)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {_shp(x.value)} and {_shp(w.value)}")
    if b is not None:
        b = _lift(tape, b)
        if b.value.shape != (w.value.shape[1],):
            raise ShapeError(f"linear: bias shape {_shp(b.value)} != ({w.value.shape[1]},)")
    out = x.value @ w.value
    if b is not None:
        out = out + b.value[None, :]

    def backward(g):
        grads = [(x, g @ w.value.T), (w, x.value.T @ g)]
        if b is not None:
            grads.append((b, g.sum(axis=0)))
        return grads

    req = x.requires_grad or w.requires_grad or (b is not None and b.requires_grad)
    return tape._record(out, backward, req)


OP_TABLE: dict[str, Callable[..., Var]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "maximum": maximum,
    "mean": mean,
    "sum": tsum,
    "abs": absolute,
    "square": square,
    "sqrt": sqrt,
    "blur": blur,
    "upsample_nearest": upsample_nearest,
    "concat": concat,
    "reshape": reshape,
    "spatial_norm": spatial_norm,
    "rowwise_outer": rowwise_outer,
    "gather_pixels": gather_pixels,
    "linear": linear,
}


def forward_op(kind: str, *args, **kwargs) -> Var:
    """Dispatch an op by name; the registered set is the tape's whole vocabulary."""
    try:
        fn = OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"forward_op: unknown op kind {kind!r}") from None
    return fn(*args, **kwargs)


def gradients(root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar root for each requested var.

    Vars the root does not depend on get zero gradients of their own shape.
    """
    if root.value.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {_shp(root.value)}")
    tape = root.tape
    for v in wrt:
        if v.tape is not tape:
            raise ValueError("backward: wrt var lives on a different tape")
    wanted: dict[int, np.ndarray | None] = {v.idx: None for v in wrt}
    acc: dict[int, np.ndarray] = {root.idx: np.ones_like(root.value)}
    for idx in range(root.idx, -1, -1):
        g = acc.pop(idx, None)
        if g is None:
            continue
        if idx in wanted:
            wanted[idx] = g if wanted[idx] is None else wanted[idx] + g
        fn = tape._nodes[idx].backward_fn
        if fn is None:
            continue
        for parent, pg in fn(g):
            if not parent.requires_grad:
                continue
            prev = acc.get(parent.idx)
            acc[parent.idx] = pg if prev is None else prev + pg
    return [wanted[v.idx] if wanted[v.idx] is not None else np.zeros_like(v.value) for v in wrt]


class ParamSet:
    """Named parameters with a mask of names shared between the two tasks.

    The float64 value arrays live here across iterations; ``place`` binds
    them onto a fresh tape as gradient-tracked leaves for one forward pass.
    Updates replace value arrays, never mutate recorded ones.
    """

    def __init__(self, values: Mapping[str, np.ndarray], shared: Iterable[str] = ()):
        self.values: dict[str, np.ndarray] = {k: _as_array(v) for k, v in values.items()}
        self.shared = frozenset(shared)
        missing = self.shared - set(self.values)
        if missing:
            raise ValueError(f"shared mask names missing from params: {sorted(missing)}")
        self.vars: dict[str, Var] = {}

    def place(self, tape: Tape) -> dict[str, Var]:
        self.vars = {k: tape.leaf(v, requires_grad=True) for k, v in self.values.items()}
        return self.vars

    def names(self) -> list[str]:
        return list(self.values)

    def shared_names(self) -> list[str]:
        return sorted(self.shared)

    def private_names(self) -> list[str]:
        return [n for n in self.values if n not in self.shared]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.values.items()}


def backward(root: Var, params: ParamSet) -> dict[str, np.ndarray]:
    """Gradient of a scalar root for every parameter; unreached ones are zero."""
    if not params.vars:
        raise ValueError("backward: params were never placed on a tape")
    names = params.names()
    gs = gradients(root, [params.vars[n] for n in names])
    return dict(zip(names, gs))


def flatten_grads(grads: Mapping[str, np.ndarray], shared: Iterable[str]) -> np.ndarray:
    """Concatenate per-name arrays, lexicographic by name then row-major."""
    names = sorted(shared)
    missing = [n for n in names if n not in grads]
    if missing:
        raise KeyError(f"flatten_grads: missing gradients for {missing}")
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])


def unflatten(vec: np.ndarray, shapes: Mapping[str, tuple[int, ...]], shared: Iterable[str]) -> dict[str, np.ndarray]:
    """Inverse of flatten_grads given the per-name shapes."""
    names = sorted(shared)
    total = sum(int(np.prod(shapes[n])) for n in names)
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size != total:
        raise ValueError(f"unflatten: vector length {vec.size} != expected {total}")
    out = {}
    pos = 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = vec[pos:pos + size].reshape(shapes[n]).copy()
        pos += size
    return out


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"gaussian_kernel: size must be odd positive, got {size}")
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()
