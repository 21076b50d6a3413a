"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives needed by the two-head CNN and its losses are provided.
Broadcasting is deliberately narrow: binary ops require equal shapes, except
that a bias of shape ``[C]`` may be added along axis 1 (``add_bias``) and a
python scalar may scale or shift any tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route to the primitives below
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,), "shift")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def elementwise(op_kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, scale."""
    table = {"relu": relu, "sigmoid": sigmoid, "add": add, "mul": mul, "scale": scale}
    try:
        fn = table[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands, **kwargs)


# ----------------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def sum_axes(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Sum over ``axes`` (all axes when None), dropping them."""
    src = a.shape
    if axes is None:
        axes = tuple(range(a.data.ndim))
    axes = tuple(ax % a.data.ndim for ax in axes)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum_axes(a), 1.0 / a.data.size)


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    """Select rows along axis 0."""
    idx = np.asarray(rows, dtype=np.int64)
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward, "take_rows")


def pick(a: Tensor, cols: Sequence[int]) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D tensor."""
    if a.data.ndim != 2 or len(cols) != a.shape[0]:
        raise DimensionError("pick expects [N,n] and N column ids")
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    src = a.shape

    def backward(g):
        full = np.zeros(src)
        full[rows, cols] = g
        return (full,)

    return _make(a.data[rows, cols], (a,), backward, "pick")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a ``[C]`` bias along axis 1 of an ``[N,C,...]`` tensor."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias {b.shape} incompatible with {x.shape}")
    bshape = (1, b.shape[0]) + (1,) * (x.data.ndim - 2)
    red = (0,) + tuple(range(2, x.data.ndim))
    return _make(x.data + b.data.reshape(bshape), (x, b), lambda g: (g, g.sum(axis=red)), "add_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape ``[out, in]``."""
    if w.data.ndim != 2 or x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} weight {w.shape}")
    xd, wd = x.data, w.data
    out = np.matmul(xd[:, None, :], wd.T)[:, 0, :] + b.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _make(out, (x, w, b), backward, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]``."""
    n, c, h, w = x.shape
    inv = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "gap")


def attention_pool(x: Tensor, a: Tensor, eps: float = 1e-8) -> Tensor:
    """Mask-weighted spatial mean: ``[N,C,H,W], [N,1,H,W] -> [N,C]``.

    ``out[n,c] = sum(x[n,c] * a[n,0]) / (sum(a[n,0]) + eps)``.
    """
    n, c, h, w = x.shape
    if a.shape != (n, 1, h, w):
        raise DimensionError(f"attention_pool: mask {a.shape} does not fit features {x.shape}")
    den = a.data.sum(axis=(2, 3)) + eps  # [N,1]
    out = (x.data * a.data).sum(axis=(2, 3)) / den

    def backward(g):
        gd = g / den  # [N,C]
        gx = gd[:, :, None, None] * a.data
        ga = (gd[:, :, None, None] * (x.data - out[:, :, None, None])).sum(axis=1, keepdims=True)
        return gx, ga

    return _make(out, (x, a), backward, "attention_pool")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k)
    out = blocks.max(axis=(3, 5))
    # first maximal position wins on ties so the gradient is routed once
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = flat.argmax(axis=-1)

    def backward(g):
        sel = np.zeros(flat.shape)
        np.put_along_axis(sel, arg[..., None], g[..., None], axis=-1)
        sel = sel.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (sel.reshape(n, c, h, w),)

    return _make(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every spatial entry into a ``factor x factor`` block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward, "upsample")


def softmax(logits: Tensor) -> Tensor:
    """Row softmax of an ``[N,n]`` tensor with max subtraction."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax expects [N,n>=2], got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[N,C,H,W]`` with ``[F,C,kh,kw]`` plus bias ``[F]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {f} filters")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    # channels-last copy so every kernel tap is a contiguous [.., C] slice
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # [N,ho,wo,C,kh,kw] -> [N,ho,wo,kh,kw,C]; per-sample GEMMs (stacked matmul)
    # keep each sample's result independent of N
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho * wo, kh * kw * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    out = np.matmul(cols, wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols.reshape(n * ho * wo, kh * kw * c)).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3))
        if not x.requires_grad:
            return None, gw, gb
        dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros((n, hp, wp, c))
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
        gx = dxp[:, padding : padding + h, padding : padding + w].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _make(out, (x, kernel, bias), backward, "conv2d")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), backward, "concat")


# ----------------------------------------------------------------------------
# graph and backward
# ----------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class Graph:
    """Recorded ops reachable from a root, in topological order."""

    nodes: list[Node] = field(default_factory=list)
    tensors: dict[int, Tensor] = field(default_factory=dict)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        graph = cls()
        seen: set[int] = set()
        # iterative post-order DFS; deep conv stacks would blow the recursion limit
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            tid = id(t)
            if expanded:
                graph.tensors[tid] = t
                graph.nodes.append(Node(t._op, tuple(id(p) for p in t._parents), tid))
                continue
            if tid in seen:
                continue
            seen.add(tid)
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return graph


def backward(root: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    if graph is None:
        graph = Graph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(graph.nodes):
        t = graph.tensors[node.output_id]
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            grads[pid] = grads[pid] + pg if pid in grads else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[str, int] | None
    checked: int


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` is re-evaluated with perturbed parameter values, so it must
    read the tensors in ``params`` rather than copies of them. When
    ``max_entries`` is set, that many entries per tensor are sampled.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            a = ga[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            checked += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (name, int(i))
    for p in params.values():
        p.grad = None
    return GradCheckReport(worst_err <= tol, worst_err, worst_at, checked)


__all__ = [
    "DimensionError",
    "NonFiniteError",
    "Tensor",
    "Graph",
    "GradCheckReport",
    "add",
    "add_bias",
    "attention_pool",
    "backward",
    "clamp_min",
    "concat_rows",
    "conv2d",
    "div",
    "elementwise",
    "finite_difference_check",
    "global_avg_pool",
    "linear",
    "log",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "pick",
    "relu",
    "reshape",
    "scale",
    "shift",
    "sigmoid",
    "softmax",
    "square",
    "sub",
    "sum_axes",
    "take_rows",
    "upsample_nearest",
    "zero_grads",
]
