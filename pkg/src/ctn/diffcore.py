"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

The operator set is closed: exactly what the contour model and losses need,
each op carrying a hand-verified backward rule. No broadcasting beyond
per-channel/last-axis bias and scalar scaling. Tapes are plain DAGs of
``Tensor`` nodes; ``backward`` seeds a scalar and accumulates ``.grad`` on
every reachable node built with ``requires_grad=True``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "smul",
    "matmul",
    "conv2d",
    "relu",
    "max_with_zero",
    "channel_norm",
    "upsample2x_nearest",
    "ring_mean",
    "row_l2_normalize",
    "reduce_sum",
    "reduce_mean",
    "l1_norm",
    "l2_norm",
    "sqrt",
    "log",
    "gather_rows",
    "concat",
    "bilinear_sample",
    "backward",
    "check_gradient",
    "dump_tape",
    "set_debug",
]

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable forward-pass finiteness checks on every op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, op="leaf", parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64 if np.asarray(value).dtype.kind != "f" else None)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = backward_fn
        self.name = name
        if _DEBUG and not np.all(np.isfinite(self.value)):
            raise NumericError(f"non-finite values after op '{op}'")

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value, name=None) -> Tensor:
    """Leaf tensor without gradient; float dtypes preserved, ints become float64."""
    return Tensor(value, name=name)


def parameter(value, name=None) -> Tensor:
    """Leaf tensor that receives a gradient."""
    return Tensor(np.asarray(value), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``. ``own=True`` promises ``g`` is a fresh,
    writable array the caller will not reuse, so it may be adopted directly."""
    if t.grad is None:
        if own and isinstance(g, np.ndarray) and g.dtype == t.value.dtype and g.flags.writeable:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


def _shape_check(op: str, ok: bool, *shapes):
    if not ok:
        raise ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def add(a, b) -> Tensor:
    """Elementwise sum; also (M,K)+(K,) bias rows and scalar+tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    bias = av.ndim >= 1 and bv.ndim == 1 and av.shape[-1:] == bv.shape and av.shape != bv.shape
    scalar = bv.ndim == 0 or av.ndim == 0
    _shape_check("add", av.shape == bv.shape or bias or scalar, av.shape, bv.shape)
    out = Tensor(av + bv, op="add", parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g if av.shape == out.value.shape else np.sum(g) if av.ndim == 0 else g)
        if b.requires_grad:
            if bv.shape == out.value.shape:
                _accum(b, g)
            elif bv.ndim == 0:
                _accum(b, np.sum(g), own=True)
            else:  # bias: reduce all leading axes
                _accum(b, g.reshape(-1, bv.shape[0]).sum(axis=0), own=True)

    out._backward = backward_fn
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _shape_check("sub", a.value.shape == b.value.shape or b.value.ndim == 0, a.value.shape, b.value.shape)
    out = Tensor(a.value - b.value, op="sub", parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g if b.value.shape == out.value.shape else -np.sum(g), own=True)

    out._backward = backward_fn
    return out


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _shape_check("mul", a.value.shape == b.value.shape, a.value.shape, b.value.shape)
    out = Tensor(a.value * b.value, op="mul", parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g * b.value, own=True)
        if b.requires_grad:
            _accum(b, g * a.value, own=True)

    out._backward = backward_fn
    return out


def smul(a, s: float) -> Tensor:
    """Multiply by a python scalar."""
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.value * s, op="smul", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g * s, own=True)

    out._backward = backward_fn
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _shape_check(
        "matmul",
        a.value.ndim == 2 and b.value.ndim == 2 and a.value.shape[1] == b.value.shape[0],
        a.value.shape,
        b.value.shape,
    )
    out = Tensor(a.value @ b.value, op="matmul", parents=(a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g @ b.value.T, own=True)
        if b.requires_grad:
            _accum(b, a.value.T @ g, own=True)

    out._backward = backward_fn
    return out


def relu(a) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is 0 (subgradient choice)."""
    a = _as_tensor(a)
    mask = a.value > 0
    out = Tensor(np.where(mask, a.value, 0.0), op="relu", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g * mask, own=True)

    out._backward = backward_fn
    return out


max_with_zero = relu


def channel_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial dims of one (C,H,W) sample.

    No cross-batch statistics, so single-image inference matches batched
    inference exactly. ``gamma``/``beta`` are per-channel affine parameters.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xv = x.value
    _shape_check("channel_norm", xv.ndim == 3 and gamma.value.shape == (xv.shape[0],) == beta.value.shape,
                 xv.shape, gamma.value.shape, beta.value.shape)
    c = xv.shape[0]
    m = xv.shape[1] * xv.shape[2]
    mu = xv.mean(axis=(1, 2), keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    out = Tensor(gamma.value[:, None, None] * xhat + beta.value[:, None, None],
                 op="channel_norm", parents=(x, gamma, beta))

    def backward_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(1, 2)), own=True)
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(1, 2)), own=True)
        if x.requires_grad:
            dxhat = g * gamma.value[:, None, None]
            # standard instance-norm backward, fused form
            dx = (dxhat - dxhat.mean(axis=(1, 2), keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=(1, 2), keepdims=True)) * istd
            _accum(x, dx, own=True)

    out._backward = backward_fn
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # xp: (C, Hp, Wp) -> (OH*OW, C*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, oh, ow = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw), oh, ow


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) of (C,H,W) with (OC,C,KH,KW), zero padding."""
    x, w = _as_tensor(x), _as_tensor(w)
    xv, wv = x.value, w.value
    _shape_check("conv2d", xv.ndim == 3 and wv.ndim == 4 and xv.shape[0] == wv.shape[1],
                 xv.shape, wv.shape)
    oc, c, kh, kw = wv.shape
    if padding:
        xp = np.zeros((c, xv.shape[1] + 2 * padding, xv.shape[2] + 2 * padding), dtype=xv.dtype)
        xp[:, padding:-padding, padding:-padding] = xv
    else:
        xp = xv
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = wv.reshape(oc, -1)
    y = (wmat @ cols.T).reshape(oc, oh, ow)
    out = Tensor(y, op="conv2d", parents=(x, w))

    def backward_fn(g):
        gmat = g.reshape(oc, -1).T  # (OH*OW, OC)
        if w.requires_grad:
            _accum(w, (gmat.T @ cols).reshape(wv.shape), own=True)
        if x.requires_grad:
            dcols = gmat @ wmat  # (OH*OW, C*KH*KW)
            dxp = np.zeros_like(xp)
            dwin = dcols.reshape(oh, ow, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        dwin[:, :, :, i, j].transpose(2, 0, 1)
                    )
            _accum(x, dxp[:, padding : padding + xv.shape[1], padding : padding + xv.shape[2]]
                   if padding else dxp, own=True)

    out._backward = backward_fn
    return out


def upsample2x_nearest(x) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of a (C,H,W) tensor."""
    x = _as_tensor(x)
    _shape_check("upsample2x_nearest", x.value.ndim == 3, x.value.shape)
    out = Tensor(x.value.repeat(2, axis=1).repeat(2, axis=2), op="upsample2x", parents=(x,))

    def backward_fn(g):
        if x.requires_grad:
            c, h2, w2 = g.shape
            _accum(x, g.reshape(c, h2 // 2, 2, w2 // 2, 2).sum(axis=(2, 4)), own=True)

    out._backward = backward_fn
    return out


def row_l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm (rows below eps pass through)."""
    a = _as_tensor(a)
    _shape_check("row_l2_normalize", a.value.ndim == 2, a.value.shape)
    norms = np.sqrt((a.value ** 2).sum(axis=1, keepdims=True))
    safe = np.maximum(norms, eps)
    y = a.value / safe
    out = Tensor(y, op="row_l2_normalize", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accum(a, (g - y * dot) / safe, own=True)

    out._backward = backward_fn
    return out


def ring_mean(a, offsets: tuple[int, ...] = (-2, -1, 1, 2)) -> Tensor:
    """Mean over cyclically shifted copies of the rows of a 2-D tensor.

    This is the contour-graph neighbor aggregation: row i of the output is
    the mean of rows i+d for d in ``offsets``. The aggregation matrix is
    symmetric for symmetric offset sets, so the backward rule is the same
    ring mean applied to the incoming gradient.
    """
    a = _as_tensor(a)
    _shape_check("ring_mean", a.value.ndim == 2, a.value.shape)
    scale = 1.0 / len(offsets)

    def apply(v: np.ndarray) -> np.ndarray:
        acc = np.roll(v, -offsets[0], axis=0)
        for d in offsets[1:]:
            acc += np.roll(v, -d, axis=0)
        acc *= scale
        return acc

    out = Tensor(apply(a.value), op="ring_mean", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, apply(g), own=True)

    out._backward = backward_fn
    return out


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.value.sum(axis=axis), op="reduce_sum", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.value.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    out._backward = backward_fn
    return out


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return smul(reduce_sum(a, axis=axis), 1.0 / count)


def l1_norm(a) -> Tensor:
    """Sum of absolute values; subgradient 0 at exact zeros."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.value).sum(), op="l1_norm", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g * np.sign(a.value), own=True)

    out._backward = backward_fn
    return out


def l2_norm(a) -> Tensor:
    """Euclidean norm of the flattened tensor; gradient 0 at the origin."""
    a = _as_tensor(a)
    norm = float(np.sqrt((a.value ** 2).sum()))
    out = Tensor(norm, op="l2_norm", parents=(a,))

    def backward_fn(g):
        if a.requires_grad and norm > 0.0:
            _accum(a, g * a.value / norm, own=True)

    out._backward = backward_fn
    return out


def sqrt(a) -> Tensor:
    """Elementwise square root; gradient defined 0 at exact zeros."""
    a = _as_tensor(a)
    root = np.sqrt(a.value)
    out = Tensor(root, op="sqrt", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(root > 0, 0.5 / np.where(root > 0, root, 1.0), 0.0)
            _accum(a, g * d, own=True)

    out._backward = backward_fn
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.value), op="log", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, g / a.value, own=True)

    out._backward = backward_fn
    return out


def gather_rows(a, indices, unique: bool = False) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate on backward.

    Pass ``unique=True`` when the indices are known collision-free (e.g. a
    permutation) to take the fast scatter path.
    """
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    _shape_check("gather_rows", a.value.ndim == 2, a.value.shape)
    out = Tensor(a.value[idx], op="gather_rows", parents=(a,))

    def backward_fn(g):
        if a.requires_grad:
            da = np.zeros_like(a.value)
            if unique:
                da[idx] = g
            else:
                np.add.at(da, idx, g)
            _accum(a, da, own=True)

    out._backward = backward_fn
    return out


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.value for p in parts], axis=axis), op="concat", parents=tuple(parts))
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.concatenate(([0], np.cumsum(sizes)))

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(p, g[tuple(sl)])

    out._backward = backward_fn
    return out


def bilinear_sample(fmap, coords) -> Tensor:
    """Bilinearly sample a (C,H,W) map at (N,2) xy coordinates -> (N,C).

    Differentiable with respect to both the map values and the coordinates.
    Out-of-bounds coordinates are clamped to the valid rectangle and get zero
    gradient along the clamped axis, so off-image vertices feel no spurious pull.
    """
    fmap, coords = _as_tensor(fmap), _as_tensor(coords)
    mv, cv = fmap.value, coords.value
    _shape_check("bilinear_sample", mv.ndim == 3 and cv.ndim == 2 and cv.shape[1] == 2,
                 mv.shape, cv.shape)
    c, h, w = mv.shape
    x = cv[:, 0]
    y = cv[:, 1]
    in_x = (x >= 0.0) & (x <= w - 1)
    in_y = (y >= 0.0) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp) if w > 1 else np.zeros_like(xc, dtype=np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp) if h > 1 else np.zeros_like(yc, dtype=np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xc - x0.astype(cv.dtype)
    ty = yc - y0.astype(cv.dtype)
    f00 = mv[:, y0, x0]  # (C,N)
    f01 = mv[:, y0, x1]
    f10 = mv[:, y1, x0]
    f11 = mv[:, y1, x1]
    top = f00 + (f01 - f00) * tx
    bot = f10 + (f11 - f10) * tx
    out_v = (top + (bot - top) * ty).T  # (N,C)
    out = Tensor(out_v, op="bilinear_sample", parents=(fmap, coords))

    def backward_fn(g):
        gt = g.T  # (C,N)
        if coords.requires_grad:
            dx = ((f01 - f00) * (1 - ty) + (f11 - f10) * ty)  # (C,N)
            dy = (bot - top)
            gx = (gt * dx).sum(axis=0) * in_x
            gy = (gt * dy).sum(axis=0) * in_y
            _accum(coords, np.stack([gx, gy], axis=1), own=True)
        if fmap.requires_grad:
            dm = np.zeros_like(mv)
            w00 = (1 - tx) * (1 - ty)
            w01 = tx * (1 - ty)
            w10 = (1 - tx) * ty
            w11 = tx * ty
            flat = dm.reshape(c, -1)
            for wgt, yy, xx in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
                np.add.at(flat, (slice(None), yy * w + xx), gt * wgt)
            _accum(fmap, dm, own=True)

    out._backward = backward_fn
    return out


def backward(seed: Tensor) -> None:
    """Reverse-mode pass from a scalar seed; accumulates into ``.grad`` fields."""
    if seed.value.ndim != 0:
        raise ValueError(f"backward seed must be scalar, got shape {seed.value.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    seed.grad = np.ones((), dtype=seed.value.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def check_gradient(scalar_fn: Callable[[Tensor], Tensor], x: np.ndarray, epsilon: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    Falls back to absolute error where the reference magnitude is below 1e-8.
    """
    x = np.array(x, dtype=np.float64)  # private writable copy for the probes
    xt = parameter(x.copy())
    out = scalar_fn(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(scalar_fn(constant(x.copy())).value)
        flat[i] = orig - epsilon
        fm = float(scalar_fn(constant(x.copy())).value)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * epsilon)
        ana = float(analytic.reshape(-1)[i])
        scale = max(abs(numeric), abs(ana))
        err = abs(ana - numeric) if scale < 1e-8 else abs(ana - numeric) / scale
        worst = max(worst, err)
    return worst


def dump_tape(seed: Tensor) -> str:
    """Text rendering of the tape reachable from ``seed`` (debug aid)."""
    lines: list[str] = []
    seen: set[int] = set()

    def visit(node: Tensor, depth: int):
        tag = f"#{len(seen)}"
        label = node.name or node.op
        lines.append(f"{'  ' * depth}{tag} {label} {node.value.shape}")
        if id(node) in seen:
            return
        seen.add(id(node))
        for p in node._parents:
            visit(p, depth + 1)

    visit(seed, 0)
    return "\n".join(lines)
