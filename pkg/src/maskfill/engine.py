"""Dense-tensor numeric core: reverse-mode autodiff over numpy buffers, plus Adam.

Values live in `Tensor` objects (contiguous float32 or float64 numpy arrays).
While a `Tape` is active, every primitive that touches a grad-requiring tensor
appends one record in execution order, so the tape is topologically sorted by
construction and `backward` is a single reverse sweep.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was invoked outside its documented contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class TapeOp:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple["Tensor", ...], output: "Tensor",
                 backward: Callable[[np.ndarray], tuple]):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; use as a context manager around forwards."""

    def __init__(self):
        self.ops: list[TapeOp] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, order="C")
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)   # noop for 0-d; keeps ndim otherwise
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the other operand may be a Tensor, an ndarray constant
    # or a python scalar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


def _register(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward: Callable[[np.ndarray], tuple]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _current_tape()
    if requires and tape is not None:
        tape.ops.append(TapeOp(name, tuple(inputs), out, backward))
    return out


def _as_const(x, like: Tensor) -> np.ndarray:
    """Coerce a non-Tensor operand to an ndarray constant (no gradient)."""
    arr = np.asarray(x, dtype=like.dtype)
    if arr.shape not in ((), like.data.shape):
        raise ContractViolation(
            f"operand shape {arr.shape} does not match tensor shape {like.data.shape} "
            "(general broadcasting is unsupported)")
    return arr


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ContractViolation(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
        return _register("add", (a, b), a.data + b.data, lambda g: (g, g))
    c = _as_const(b, a)
    return _register("add_const", (a,), a.data + c, lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ContractViolation(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
        return _register("sub", (a, b), a.data - b.data, lambda g: (g, -g))
    c = _as_const(b, a)
    return _register("sub_const", (a,), a.data - c, lambda g: (g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ContractViolation(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
        ad, bd = a.data, b.data
        return _register("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))
    c = _as_const(b, a)
    return _register("mul_const", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _register("neg", (a,), -a.data, lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _register("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype

    def bwd(g):
        return (np.full(shape, g, dtype=dtype),)

    return _register("sum", (a,), np.asarray(a.data.sum(), dtype=dtype), bwd)


def tensor_mean(a: Tensor) -> Tensor:
    shape, dtype = a.data.shape, a.data.dtype
    inv = 1.0 / a.data.size

    def bwd(g):
        return (np.full(shape, g * inv, dtype=dtype),)

    return _register("mean", (a,), np.asarray(a.data.mean(), dtype=dtype), bwd)


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ContractViolation(f"leaky_relu: slope {slope} outside [0, 1)")
    ad = a.data
    nonneg = ad >= 0  # the subgradient at 0 takes the positive branch
    out = np.where(nonneg, ad, ad * slope).astype(ad.dtype, copy=False)

    def bwd(g):
        return (np.where(nonneg, g, g * slope).astype(ad.dtype, copy=False),)

    return _register("leaky_relu", (a,), out, bwd)


# ---------------------------------------------------------------------------
# Spatial primitives (NCHW layout)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Return (cols, padded_shape): cols has shape (N, Cin*kh*kw, Ho*Wo)."""
    n, cin, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * (ho - 1) + 1:stride,
                                 j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, cin * kh * kw, ho * wo), (hp, wp, ho, wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add column gradients back to the (unpadded) input layout."""
    n, cin, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, cin, kh, kw, ho, wo)
    xg = np.zeros((n, cin, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i:i + stride * (ho - 1) + 1:stride,
               j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    if pad:
        xg = xg[:, :, pad:pad + h, pad:pad + w]
    return xg


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    Output spatial extent: floor((H + 2*pad - kh)/stride) + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-d input and weight")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ContractViolation(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation("conv2d: kernel extents must be odd")
    if stride < 1 or pad < 0:
        raise ContractViolation("conv2d: stride must be >= 1 and pad >= 0")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ContractViolation("conv2d: kernel larger than padded input")

    cols, (_, _, ho, wo) = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat[None], cols)          # (N, Cout, Ho*Wo)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    x_shape = x.data.shape

    def bwd(g):
        gmat = g.reshape(n, cout, ho * wo)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gcols = np.matmul(wmat.T[None], gmat)
        gx = _col2im(gcols, x_shape, kh, kw, stride, pad)
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=(0, 2))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _register("conv2d", inputs, out, bwd)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block; backward block-sums."""
    if factor < 1:
        raise ContractViolation(f"upsample_nearest: factor {factor} < 1")
    if x.data.ndim != 4:
        raise ContractViolation("upsample_nearest expects NCHW input")
    if factor == 1:
        return _register("upsample_nearest", (x,), x.data.copy(), lambda g: (g,))
    n, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _register("upsample_nearest", (x,), out, bwd)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [t.data.shape[1] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=1)
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _register("concat_channels", tuple(parts), out, bwd)


def reflect_pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Reflect-pad the two trailing axes; pads = (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ContractViolation("reflect_pad2d: negative pad")
    h, w = x.data.shape[-2:]
    if max(top, bottom) > h - 1 or max(left, right) > w - 1:
        raise ContractViolation("reflect_pad2d: pad exceeds input extent - 1")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)), mode="reflect")
    row_map = np.pad(np.arange(h), (top, bottom), mode="reflect")
    col_map = np.pad(np.arange(w), (left, right), mode="reflect")

    def bwd(g):
        tmp = np.zeros(g.shape[:2] + (h, g.shape[3]), dtype=g.dtype)
        np.add.at(tmp, (slice(None), slice(None), row_map), g)
        gx = np.zeros(g.shape[:2] + (h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), col_map), tmp)
        return (gx,)

    return _register("reflect_pad2d", (x,), out, bwd)


def crop2d(x: Tensor, crops: tuple[int, int, int, int]) -> Tensor:
    """Remove (top, bottom, left, right) border rows/cols; backward zero-pads."""
    top, bottom, left, right = crops
    n, c, h, w = x.data.shape
    if top + bottom >= h or left + right >= w:
        raise ContractViolation("crop2d: crop removes the whole extent")
    out = x.data[:, :, top:h - bottom, left:w - right].copy()

    def bwd(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, top:h - bottom, left:w - right] = g
        return (gx,)

    return _register("crop2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Reverse-sweep the tape from a scalar loss.

    Returns gradients keyed by tensor (identity), covering every grad-requiring
    tensor reachable from the loss. Tensors not on the loss path are absent;
    use `collect_grads` to zero-fill a parameter set.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        by_id.pop(id(op.output), None)
        if g is None:
            continue
        if g.shape != op.output.data.shape:
            g = np.broadcast_to(g, op.output.data.shape)
        in_grads = op.backward(g)
        for t, gi in zip(op.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                by_id[key] = t
    return {by_id[k]: (v if v.flags.c_contiguous else np.ascontiguousarray(v))
            for k, v in grads.items()}


def collect_grads(gradmap: Mapping[Tensor, np.ndarray],
                  params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Name-keyed view of `backward` output; absent parameters get zeros."""
    return {name: gradmap[p] if p in gradmap else np.zeros_like(p.data)
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.9, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter buffers."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractViolation(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. every element of t."""
    base = t.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f().data)
        flat[i] = keep - h
        fm = float(f().data)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_check(f: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                   h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between taped gradients of f() and central differences.

    Relative error per element is |a - n| / max(floor, |a|, |n|). Use float64
    tensors for meaningful tolerances.
    """
    with Tape() as tape:
        loss = f()
    gradmap = backward(loss, tape)
    named = collect_grads(gradmap, tensors)
    worst = 0.0
    for name, t in tensors.items():
        analytic = named[name]
        numeric = finite_difference_grad(f, t, h=h)
        denom = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom)) if t.size else 0.0
        worst = max(worst, err)
    return worst
