"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap numpy arrays. Every differentiable op goes through the
``PRIMITIVES`` registry, which pairs a forward rule with a backward rule;
``Graph.backward`` replays those rules in reverse creation order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    def __init__(self, data, name: Optional[str] = None, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.name = name
        self.kind: Optional[str] = None
        self.parents: Tuple["Tensor", ...] = ()
        self.ctx = None
        self.attrs: dict = {}
        self.id = next(_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = self.name or self.kind or "const"
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return subtract(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def tensor(data, name=None, dtype=np.float64) -> Tensor:
    return Tensor(data, name=name, dtype=dtype)


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -------------------------------------------------------

def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _check_broadcast("subtract", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_fwd(a, b):
    _check_broadcast("multiply", a, b)
    return a * b, (a, b)


def _mul_bwd(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, factor):
    return a * factor, factor


def _scale_bwd(factor, g):
    return (g * factor,)


# --- elementwise unary --------------------------------------------------------

def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def _tanh_bwd(y, g):
    return (g * (1.0 - y * y),)


def _relu_fwd(a):
    mask = a > 0
    return a * mask, mask


def _relu_bwd(mask, g):
    return (g * mask,)


def _abs_fwd(a):
    # np.sign gives 0 at exactly 0: the subgradient we want.
    return np.abs(a), np.sign(a)


def _abs_bwd(sign, g):
    return (g * sign,)


def _log_fwd(a, floor=0.0):
    if floor > 0:
        clamped = a < floor
        safe = np.where(clamped, floor, a)
    else:
        if np.any(a <= 0):
            raise NonFiniteError("log: non-positive input")
        clamped = np.zeros(a.shape, dtype=bool)
        safe = a
    return np.log(safe), (safe, clamped)


def _log_bwd(ctx, g):
    safe, clamped = ctx
    return (np.where(clamped, 0.0, g / safe),)


# --- linear algebra -----------------------------------------------------------

def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        # a may carry leading batch dims; fold them into the row axis
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, k * k * c), (ho, wo)


def _col2im(dcols, xshape, k, stride, pad, ho, wo):
    n, h, w, c = xshape
    dx = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcols.dtype)
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:pad + h, pad:pad + w, :]
    return dx


def _conv2d_fwd(x, w, stride=1):
    """x: (N, H, W, Cin); w: (k, k, Cin, Cout); zero padding k // 2."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and (k,k,Cin,Cout) kernel, got {x.shape} and {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel must be 1x1 or 3x3, got {w.shape}")
    if w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} do not match kernel {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    pad = k // 2
    cols, (ho, wo) = _im2col(x, k, stride, pad)
    wmat = w.reshape(-1, w.shape[3])
    out = (cols @ wmat).reshape(x.shape[0], ho, wo, w.shape[3])
    return out, (cols, wmat, x.shape, w.shape, k, stride, pad, ho, wo)


def _conv2d_bwd(ctx, g):
    cols, wmat, xshape, wshape, k, stride, pad, ho, wo = ctx
    g2 = g.reshape(-1, wshape[3])
    gw = (cols.T @ g2).reshape(wshape)
    dcols = g2 @ wmat.T
    return _col2im(dcols, xshape, k, stride, pad, ho, wo), gw


# --- reductions and pooling ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sum_fwd(a, axis=None):
    axes = _norm_axis(axis, a.ndim)
    return a.sum(axis=axes), (a.shape, axes)


def _sum_bwd(ctx, g):
    shape, axes = ctx
    return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)


def _mean_fwd(a, axis=None):
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return a.sum(axis=axes) / count, (a.shape, axes, count)


def _mean_bwd(ctx, g):
    shape, axes, count = ctx
    return (np.broadcast_to(np.expand_dims(g / count, axes), shape).copy(),)


def _maxpool_fwd(a):
    n, h, w, c = a.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"max-pool2x2: input too small {a.shape}")
    win = a[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, 4)
    idx = win.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (a.shape, idx)


def _maxpool_bwd(ctx, g):
    shape, idx = ctx
    n, h, w, c = shape
    ho, wo = idx.shape[1], idx.shape[2]
    win = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
    win = win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
    dx = np.zeros(shape, dtype=g.dtype)
    dx[:, :2 * ho, :2 * wo, :] = win
    return (dx,)


def _gap_fwd(a):
    if a.ndim != 4:
        raise ShapeError(f"global-average-pool: expected NHWC, got {a.shape}")
    return a.mean(axis=(1, 2)), a.shape


def _gap_bwd(shape, g):
    n, h, w, c = shape
    return (np.broadcast_to(g[:, None, None, :] / (h * w), shape).copy(),)


def _softmax_fwd(a):
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(y, g):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


# --- structural ---------------------------------------------------------------

def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


def _reshape_bwd(shape, g):
    return (g.reshape(shape),)


def _transpose_fwd(a, axes):
    return np.transpose(a, axes), axes


def _transpose_bwd(axes, g):
    return (np.transpose(g, np.argsort(axes)),)


PRIMITIVES: Dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_bwd),
    "conv2d": Primitive(_conv2d_fwd, _conv2d_bwd),
    "add": Primitive(_add_fwd, _add_bwd),
    "subtract": Primitive(_sub_fwd, _sub_bwd),
    "scale": Primitive(_scale_fwd, _scale_bwd),
    "tanh": Primitive(_tanh_fwd, _tanh_bwd),
    "relu": Primitive(_relu_fwd, _relu_bwd),
    "abs": Primitive(_abs_fwd, _abs_bwd),
    "sum-reduce": Primitive(_sum_fwd, _sum_bwd),
    "mean-reduce": Primitive(_mean_fwd, _mean_bwd),
    "max-pool2x2": Primitive(_maxpool_fwd, _maxpool_bwd),
    "global-average-pool": Primitive(_gap_fwd, _gap_bwd),
    "softmax-over-channel": Primitive(_softmax_fwd, _softmax_bwd),
    "log": Primitive(_log_fwd, _log_bwd),
    "elementwise-multiply": Primitive(_mul_fwd, _mul_bwd),
    "reshape": Primitive(_reshape_fwd, _reshape_bwd),
    "transpose": Primitive(_transpose_fwd, _transpose_bwd),
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply primitive ``kind`` to ``inputs`` and record it for backward."""
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    attrs = attrs or {}
    inputs = tuple(inputs)
    arrays = []
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: non-finite input {t!r}")
        arrays.append(t.data)
    out, ctx = PRIMITIVES[kind].forward(*arrays, **attrs)
    result = Tensor(out, dtype=inputs[0].dtype)
    result.kind = kind
    result.parents = inputs
    result.ctx = ctx
    result.attrs = attrs
    return result


def matmul(a, b):
    return forward_primitive("matmul", (a, b))


def conv2d(x, w, stride=1):
    return forward_primitive("conv2d", (x, w), {"stride": stride})


def add(a, b):
    return forward_primitive("add", (a, b))


def subtract(a, b):
    return forward_primitive("subtract", (a, b))


def scale(a, factor: float):
    return forward_primitive("scale", (a,), {"factor": factor})


def multiply(a, b):
    return forward_primitive("elementwise-multiply", (a, b))


def tanh(a):
    return forward_primitive("tanh", (a,))


def relu(a):
    return forward_primitive("relu", (a,))


def abs_(a):
    return forward_primitive("abs", (a,))


def log(a, floor: float = 0.0):
    return forward_primitive("log", (a,), {"floor": floor})


def sum_(a, axis=None):
    return forward_primitive("sum-reduce", (a,), {"axis": axis})


def mean(a, axis=None):
    return forward_primitive("mean-reduce", (a,), {"axis": axis})


def max_pool2x2(a):
    return forward_primitive("max-pool2x2", (a,))


def global_avg_pool(a):
    return forward_primitive("global-average-pool", (a,))


def softmax(a):
    return forward_primitive("softmax-over-channel", (a,))


def reshape(a, shape):
    return forward_primitive("reshape", (a,), {"shape": tuple(shape)})


def transpose(a, axes):
    return forward_primitive("transpose", (a,), {"axes": tuple(axes)})


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Graph:
    """Named parameters, their gradients and momentum buffers.

    Ops are recorded on the tensors themselves; ``backward`` collects the
    nodes reachable from the loss, orders them by creation id and walks
    that order in reverse.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.velocity: Dict[str, np.ndarray] = {}
        self.nodes: List[Tensor] = []

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), name=name, dtype=self.dtype)
        self.params[name] = t
        self.velocity[name] = np.zeros_like(t.data)
        return t

    def const(self, value) -> Tensor:
        return Tensor(value, dtype=self.dtype)

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        seen = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.id in seen:
                continue
            seen[t.id] = t
            stack.extend(t.parents)
        self.nodes = [seen[i] for i in sorted(seen)]

        grads = {loss.id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None) if node.parents else grads.get(node.id)
            if g is None or not node.parents:
                continue
            in_grads = PRIMITIVES[node.kind].backward(node.ctx, g)
            for parent, pg in zip(node.parents, in_grads):
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

        self.grads = {}
        for name, p in self.params.items():
            g = grads.get(p.id)
            self.grads[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=self.dtype).reshape(p.shape)
        return self.grads

    def sgd_step(self, lr: float, momentum: float = 0.0) -> None:
        if not self.grads:
            raise RuntimeError("sgd_step called before backward")
        if lr < 0 or not 0 <= momentum < 1:
            raise ValueError(f"invalid lr={lr} or momentum={momentum}")
        for name, p in self.params.items():
            v = momentum * self.velocity[name] + self.grads[name]
            self.velocity[name] = v
            p.data = p.data - lr * v
        self.grads = {}

    def state(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, value in state.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if value.shape != self.params[name].shape:
                raise ShapeError(f"parameter {name!r}: expected {self.params[name].shape}, got {value.shape}")
            self.params[name].data = np.array(value, dtype=self.dtype)


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool
    detail: str = ""


@dataclass
class GradCheckReport:
    tolerance: float
    results: List[GradCheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[str]:
        return [r.name for r in self.results if not r.passed]

    def summary(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"{status} {r.name:30s} max_rel_err={r.max_rel_error:.3e} {r.detail}".rstrip())
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


# central-difference stencils: offsets (in steps) and weights, divided by step
STENCILS = {2: ((1, -1), (0.5, -0.5)),
            4: ((2, 1, -1, -2), (-1 / 12, 8 / 12, -8 / 12, 1 / 12))}


def grad_check(graph: Graph, loss_fn: Callable[[], Tensor], tolerance: float, step: float = 1e-5,
               names: Optional[Sequence[str]] = None, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, points: int = 2) -> GradCheckReport:
    """Compare ``backward`` gradients with central differences.

    ``loss_fn`` rebuilds the loss from the graph's current parameters.
    ``max_entries`` caps the number of coordinates probed per parameter
    (sampled with ``rng``); by default every coordinate is checked.
    ``points`` picks the 2- or 4-point central stencil; the 4-point one
    tolerates a larger ``step`` and so loses less to cancellation.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if points not in STENCILS:
        raise ValueError(f"points must be one of {sorted(STENCILS)}")
    offsets, weights = STENCILS[points]
    report = GradCheckReport(tolerance)
    try:
        analytic = dict(graph.backward(loss_fn()))
    except NonFiniteError as exc:
        report.results.append(GradCheckResult("<forward>", float("inf"), False, str(exc)))
        return report
    rng = rng or np.random.default_rng(0)
    for name in names or list(graph.params):
        p = graph.params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        detail = ""
        for n, i in enumerate(idx):
            orig = flat[i]
            try:
                values = []
                for off in offsets:
                    flat[i] = orig + off * step
                    values.append(float(loss_fn().data))
            except NonFiniteError as exc:
                detail = f"non-finite at {exc}"
                numeric[n] = np.nan
                continue
            finally:
                flat[i] = orig
            numeric[n] = sum(w * v for w, v in zip(weights, values)) / step
        a = analytic[name].reshape(-1)[idx]
        if not np.all(np.isfinite(numeric)) or not np.all(np.isfinite(a)):
            report.results.append(GradCheckResult(name, float("inf"), False, detail or "non-finite gradient"))
            continue
        err = float(relative_error(a, numeric).max()) if idx.size else 0.0
        report.results.append(GradCheckResult(name, err, err <= tolerance))
    graph.grads = {}
    return report
