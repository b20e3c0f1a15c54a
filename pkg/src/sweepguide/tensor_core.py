"""Minimal dense-tensor kernel with reverse-mode differentiation.

Everything here operates on numpy arrays wrapped in :class:`Tensor` nodes.
A fresh computation record is built on every forward pass (define-by-run);
calling :func:`backward` on a scalar loss walks that record once and
accumulates gradients into the leaves.  64-bit arithmetic is used by the
test suite; 32-bit is the runtime default for training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "UsageError",
    "ParamStore",
    "AdamConfig",
    "adam_step",
    "backward",
    "add",
    "mul",
    "matmul",
    "dense",
    "relu",
    "sigmoid",
    "tanh",
    "concat",
    "slice_cols",
    "gather_rows",
    "conv2d",
    "global_avg_pool",
    "lstm_step",
    "softmax",
    "softmax_cross_entropy",
    "softmax_cross_entropy_value_and_grad",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class UsageError(RuntimeError):
    """Raised when the forward/backward protocol is violated."""


class Tensor:
    """A dense array plus its place in the current computation record.

    ``data`` is row-major and owned by the node.  ``grad`` is lazily
    allocated during :func:`backward`.  Leaf tensors created with
    ``requires_grad=True`` (parameters, or inputs under gradient test)
    receive accumulated gradients; interior nodes are transient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Create an interior node; grad flows only if some parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear-algebra operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out_data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a Tensor, array or scalar."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        out_data = a.data * b.data

        def bw(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return _make(out_data, (a, b), bw)
    bv = np.asarray(b, dtype=a.data.dtype)

    def bw1(g):
        return (_unbroadcast(g * bv, a.data.shape),)

    return _make(a.data * bv, (a,), bw1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out_data, (a, b), bw)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` for x of shape [N, din] or [din]."""
    x = _as_tensor(x)
    squeeze = x.data.ndim == 1
    x2 = reshape(x, (1, -1)) if squeeze else x
    out = add(matmul(x2, w), b)
    return reshape(out, (-1,)) if squeeze else out


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out_data = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _make(out_data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def bw(g):
        return (g * mask,)

    return _make(out_data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # numerically stable logistic
    out_data = np.where(x.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(x.data))),
                        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bw(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.tanh(x.data)

    def bw(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (x,), bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    return _make(out_data, (x,), bw)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out_data, tuple(parts), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    x = _as_tensor(x)
    out_data = x.data[:, start:stop]

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(out_data, (x,), bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather with scatter-add gradient; index may repeat rows."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    out_data = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """View padded input [N,C,Hp,Wp] as columns [N, C*kh*kw, ho*wo]."""
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] (or [Cin,H,W]) with [Cout,Cin,kh,kw].

    Output spatial size is ``floor((H + 2*padding - kh)/stride) + 1`` per
    axis.  A channel-count mismatch between input and kernels is rejected.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,Cin,H,W] and [Cout,Cin,kh,kw], "
                         f"got {x.shape} and {kernels.shape}")
    n, cin, h, w = xd.shape
    cout, ck, kh, kw = kernels.data.shape
    if ck != cin:
        raise ShapeError(f"input has {cin} channels but kernels expect {ck}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({cout},)")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)          # [N, K, L]
    w2 = kernels.data.reshape(cout, cin * kh * kw)       # [Cout, K]
    out = np.matmul(w2, cols)                            # [N, Cout, L]
    out = out.reshape(n, cout, ho, wo) + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gd = np.ascontiguousarray(gd.reshape(n, cout, ho * wo))
        dbias = gd.sum(axis=(0, 2))
        # kernel gradient: sum_n g[n] @ cols[n].T
        dw2 = np.matmul(gd, cols.transpose(0, 2, 1)).sum(axis=0)
        dkernels = dw2.reshape(cout, cin, kh, kw)
        # input gradient: scatter columns back through the kernel windows
        dcols = np.matmul(w2.T, gd)                      # [N, K, L]
        dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if squeeze:
            dx = dx[0]
        return dx, dkernels, dbias

    return _make(out, (x, kernels, bias), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C] (or [C,H,W] -> [C])."""
    x = _as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        dx = np.broadcast_to(gd[:, :, None, None] / (h * w), xd.shape)
        dx = dx.astype(xd.dtype, copy=False)
        return (dx[0] if squeeze else dx.copy(),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------

def lstm_step(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor,
              b: Tensor):
    """One LSTM step with gate order (input, forget, candidate, output).

    ``x`` is [N,d] or [d]; ``h``/``c`` are [N,m] or [m]; ``wx`` is [d,4m],
    ``wh`` is [m,4m], ``b`` is [4m].  Gates i/f/o pass through the logistic
    sigmoid, the candidate through tanh; then ``c' = f*c + i*g`` and
    ``h' = o*tanh(c')``.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    squeeze = x.data.ndim == 1
    if squeeze:
        x, h, c = reshape(x, (1, -1)), reshape(h, (1, -1)), reshape(c, (1, -1))
    d = x.data.shape[1]
    m = h.data.shape[1]
    if wx.data.shape != (d, 4 * m) or wh.data.shape != (m, 4 * m) \
            or b.data.shape != (4 * m,):
        raise ShapeError(
            f"lstm weights inconsistent with d={d}, m={m}: "
            f"wx {wx.data.shape}, wh {wh.data.shape}, b {b.data.shape}")
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(slice_cols(z, 0, m))
    f = sigmoid(slice_cols(z, m, 2 * m))
    g = tanh(slice_cols(z, 2 * m, 3 * m))
    o = sigmoid(slice_cols(z, 3 * m, 4 * m))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    if squeeze:
        h2, c2 = reshape(h2, (-1,)), reshape(c2, (-1,))
    return h2, c2


# ---------------------------------------------------------------------------
# softmax cross-entropy against soft targets
# ---------------------------------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> np.ndarray:
    """Row softmax of an array or tensor (plain value, no graph node)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite logits")
    return _softmax_rows(z)


def softmax_cross_entropy(logits: Tensor, targets, weights=None,
                          reduction: str = "mean") -> Tensor:
    """Weighted cross-entropy of row softmax against soft target rows.

    ``targets`` rows are probability vectors; ``weights`` (optional, one per
    row) scale both loss and gradient.  Reduction is "mean" or "sum" over
    rows.  Non-finite logits are rejected.
    """
    logits = _as_tensor(logits)
    squeeze = logits.data.ndim == 1
    z = logits.data[None] if squeeze else logits.data
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_cross_entropy: non-finite logits")
    t = np.asarray(targets, dtype=z.dtype)
    t = t[None] if t.ndim == 1 else t
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {z.shape}")
    n = z.shape[0]
    if weights is None:
        w = np.ones(n, dtype=z.dtype)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=z.dtype), (n,)).copy()
        if np.any(w <= 0):
            raise ValueError("softmax_cross_entropy: weights must be positive")
    p = _softmax_rows(z)
    logp = z - z.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    per_row = -(t * logp).sum(axis=-1) * w
    if reduction == "mean":
        loss = per_row.mean()
        scale = 1.0 / n
    elif reduction == "sum":
        loss = per_row.sum()
        scale = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        dz = (p - t) * (w[:, None] * (float(g) * scale))
        dz = dz.astype(z.dtype, copy=False)
        return (dz[0] if squeeze else dz,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def softmax_cross_entropy_value_and_grad(logits, target, weight: float = 1.0):
    """Single-sample loss and logits gradient, as plain numbers.

    loss = -weight * sum_k target_k * log softmax(logits)_k
    grad = weight * (softmax(logits) - target)
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape or z.ndim != 1:
        raise ShapeError(f"logits {z.shape} and target {t.shape} must be equal 1-D")
    if weight <= 0:
        raise ValueError("weight must be positive")
    leaf = Tensor(z, requires_grad=True)
    loss = softmax_cross_entropy(leaf, t, weights=np.array([weight]), reduction="sum")
    backward(loss)
    return float(loss.data), leaf.grad


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through the recorded graph."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss._parents:
        raise UsageError("backward called on a tensor with no recorded forward pass")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


class ParamStore:
    """Named parameter leaves with their gradients and Adam moment buffers.

    The step counter ``t`` advances by exactly one per :func:`adam_step`.
    A store (and any graph built from its leaves) is confined to a single
    thread; independent stores may run on independent threads.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise UsageError(f"parameter {name!r} already registered")
        leaf = Tensor(np.asarray(value, dtype=self.dtype).copy(), requires_grad=True)
        self.params[name] = leaf
        self.m[name] = np.zeros_like(leaf.data)
        self.v[name] = np.zeros_like(leaf.data)
        return leaf

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def gradients(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def backward(self, loss: Tensor) -> None:
        """Graph backward, then zero-fill any parameter the loss never reached."""
        backward(loss)
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name])
            if src.shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {src.shape} "
                                 f"!= expected {p.data.shape}")
            p.data = src.astype(self.dtype).copy()
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


def adam_step(store: ParamStore, config: AdamConfig) -> None:
    """Adam with bias correction.  Gradients are left for the caller to clear."""
    for name, p in store.params.items():
        if p.grad is None:
            raise UsageError(f"adam_step: parameter {name!r} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"adam_step: non-finite gradient in {name!r}")
    store.t += 1
    t = store.t
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        p.data -= config.learning_rate * update.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.per_param.values())

    def __str__(self):
        lines = [f"grad check (tolerance {self.tolerance:g}):"]
        for name, err in sorted(self.per_param.items()):
            mark = "ok " if err < self.tolerance else "FAIL"
            lines.append(f"  [{mark}] {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, store: ParamStore, tolerance: float = 1e-5,
               h: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the forward pass from the store's parameter
    leaves and return a scalar Tensor.  Every parameter is reported; the
    check passes iff all relative errors are below ``tolerance``.  A failing
    check is a result, not an exception.
    """
    store.zero_grads()
    loss = loss_fn()
    store.backward(loss)
    analytic = {k: g.copy() for k, g in store.gradients.items()}
    store.zero_grads()

    per_param: dict[str, float] = {}
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn().data)
            flat[i] = orig - h
            lm = float(loss_fn().data)
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        per_param[name] = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
    return GradCheckReport(per_param=per_param, tolerance=tolerance)
