"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: float64 by default (float32 opt-in),
and only the operations the pipeline needs. Each differentiable op
records (output, backward_fn) on a global tape; ``backward`` walks the
tape in reverse, accumulating into ``Tensor.grad``, then clears it.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, NumericError, ShapeError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Numeric array that can participate in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag}{label})"


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self._nodes = []

    def record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        self._nodes.clear()


_TAPE = Tape()
_GRAD_ENABLED = True
_DEBUG_CHECKS = os.environ.get("GAMREID_DEBUG_CHECKS", "0").lower() not in ("0", "", "false")


def active_tape():
    return _TAPE


def set_debug_checks(flag):
    """Toggle per-op finite-value assertions (slow, off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(flag)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn, opname):
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in the output of {opname}")
    req = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        _TAPE.record(out, backward_fn)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Backpropagate from a scalar loss through the active tape, then clear it."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if len(_TAPE) == 0:
        raise UsageError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(_TAPE._nodes):
        if out.grad is not None:
            fn(out.grad)
    _TAPE.clear()


# ---------------------------------------------------------------------------
# convolution and linear algebra


def conv2d(x, w, b=None, *, groups=1, stride=1, padding=0):
    """Grouped 2-D cross-correlation over [N, C, H, W] input.

    w has shape [C_out, C_in // groups, k, k]; output spatial extent is
    (H + 2*padding - k) // stride + 1. Channels are block-diagonal across
    groups: output block g only reads input block g.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [N, C, H, W], got {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeError(f"conv2d weight must be [C_out, C_in/groups, k, k], got {w.data.shape}")
    if groups < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"bad conv2d settings: groups={groups} stride={stride} padding={padding}")
    n, cin, h, wd = x.data.shape
    cout, cing, k, _ = w.data.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cing != cin // groups:
        raise ShapeError(f"weight expects {cing * groups} input channels, input has {cin}")
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.data.shape}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"kernel {k} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    wc = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xp, wc, stride, groups)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        dxp, dw = kernels.conv2d_backward(
            xp, wc, g, stride, groups,
            need_dx=x.requires_grad, need_dw=w.requires_grad)
        if x.requires_grad:
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accum(x, dxp)
        if w.requires_grad:
            _accum(w, dw)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bwd, "conv2d")


def linear(x, w, b=None):
    """Affine map of row vectors: [N, D_in] @ w.T + b with w [D_out, D_in]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and w, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"linear input width {x.data.shape[1]} does not match weight width {w.data.shape[1]}")
    if b is not None and b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"linear bias must have shape ({w.data.shape[0]},), got {b.data.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bwd(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        if b is not None:
            _accum(b, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bwd, "linear")


# ---------------------------------------------------------------------------
# pooling


def global_avg_pool(x):
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.data.shape}")
    _, _, h, w = x.data.shape
    if h * w == 0:
        raise ShapeError("global_avg_pool on an empty spatial extent")
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return _make(out, (x,), bwd, "global_avg_pool")


def channel_avg_pool(x):
    """[N, C, H, W] -> [N, 1, H, W] per-pixel channel mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_avg_pool expects [N, C, H, W], got {x.data.shape}")
    c = x.data.shape[1]
    if c == 0:
        raise ShapeError("channel_avg_pool on zero channels")
    out = x.data.mean(axis=1, keepdims=True)

    def bwd(g):
        _accum(x, np.broadcast_to(g / c, x.data.shape))

    return _make(out, (x,), bwd, "channel_avg_pool")


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling; H and W must divide by k."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects [N, C, H, W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"avg_pool2d window {k} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        expanded = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (n, c, h // k, k, w // k, k))
        _accum(x, expanded.reshape(n, c, h, w))

    return _make(out, (x,), bwd, "avg_pool2d")


# ---------------------------------------------------------------------------
# elementwise


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def bwd(g):
        _accum(x, g * mask)

    return _make(out, (x,), bwd, "relu")


def sigmoid(x):
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), bwd, "sigmoid")


def log(x):
    out = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(out, (x,), bwd, "log")


def scale_shift(x, scale, shift=0.0):
    """Elementwise scale * x + shift with python-float coefficients."""
    out = scale * x.data + shift

    def bwd(g):
        _accum(x, g * scale)

    return _make(out, (x,), bwd, "scale_shift")


def add(a, b):
    """Elementwise sum; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out, (a, b), bwd, "add")


def _sum_to(g, shape):
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def mul(a, b):
    """Elementwise product.

    Shapes must be equal, or broadcast-compatible with one operand carrying
    singleton axes (the per-channel [N, C, 1, 1] and per-pixel [N, 1, H, W]
    gating patterns).
    """
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"mul ranks differ: {a.data.shape} vs {b.data.shape}")
    for da, db in zip(a.data.shape, b.data.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"mul shapes incompatible: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def bwd(g):
        _accum(a, _sum_to(g * b.data, a.data.shape))
        _accum(b, _sum_to(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd, "mul")


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(x, shape):
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {shape}") from e

    def bwd(g):
        _accum(x, g.reshape(old))

    return _make(out, (x,), bwd, "reshape")


def slice_rows(x, start, stop):
    """Contiguous row slice of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows expects a 2-D tensor, got {x.data.shape}")
    n = x.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise UsageError(f"slice_rows [{start}:{stop}] out of range for {n} rows")
    out = x.data[start:stop]

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[start:stop] = g
        _accum(x, buf)

    return _make(out, (x,), bwd, "slice_rows")


def gather_entries(x, rows, cols):
    """Pick x[rows[t], cols[t]] for each t; returns a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_entries expects a 2-D tensor, got {x.data.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("gather_entries needs matching 1-D row and column index arrays")
    n, m = x.data.shape
    if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m):
        raise UsageError("gather_entries index out of range")
    out = x.data[rows, cols]

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (rows, cols), g)
        _accum(x, buf)

    return _make(out, (x,), bwd, "gather_entries")


# ---------------------------------------------------------------------------
# reductions and row maps


def sum_all(x):
    out = x.data.sum()

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _make(out, (x,), bwd, "sum_all")


def mean_all(x):
    n = x.data.size
    if n == 0:
        raise ShapeError("mean_all on an empty tensor")
    out = x.data.mean()

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape))

    return _make(out, (x,), bwd, "mean_all")


def softmax_rows(x, tau=1.0):
    """Row-wise softmax of x / tau for a 2-D tensor; rows sum to one."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.data.shape}")
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    z = x.data / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        _accum(x, out * (g - inner) / tau)

    return _make(out, (x,), bwd, "softmax_rows")


def log_complement_softmax_entries(x, rows, cols, tau=1.0):
    """log(1 - softmax(x_row / tau)[col]) per (row, col) pair, computed stably.

    Equals logsumexp over the row excluding col, minus logsumexp over the
    full row, so it stays finite even when the picked probability rounds
    to 1 in floating point.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"log_complement_softmax_entries expects a 2-D tensor, got {x.data.shape}")
    if not tau > 0:
        raise ConfigError(f"softmax temperature must be positive, got {tau}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("matching 1-D row and column index arrays required")
    n, m = x.data.shape
    if m < 2:
        raise ShapeError("rows need at least 2 entries for a complement probability")
    if rows.size and (rows.min() < 0 or rows.max() >= n or cols.min() < 0 or cols.max() >= m):
        raise UsageError("index out of range")

    z = x.data[rows] / tau                                    # [T, m]
    hi = z.max(axis=1, keepdims=True)
    e = np.exp(z - hi)
    total = e.sum(axis=1)
    t = np.arange(rows.size)
    picked = e[t, cols]
    rest = total - picked
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(rest) - np.log(total)
        q = e / rest[:, None]
    q[t, cols] = 0.0
    # Rows whose mass sits almost entirely at the excluded column lose the
    # remainder to cancellation above; redo those with the column masked out
    # before exponentiation.
    mask = rest <= total * 1e-12
    if mask.any():
        zi = z[mask].copy()
        zi[np.arange(zi.shape[0]), cols[mask]] = -np.inf
        hi2 = zi.max(axis=1, keepdims=True)
        ei = np.exp(zi - hi2)
        resti = ei.sum(axis=1)
        out[mask] = np.log(resti) + hi2[:, 0] - (np.log(total[mask]) + hi[mask, 0])
        q[mask] = ei / resti[:, None]

    p = e / total[:, None]

    def bwd(g):
        contrib = (q - p) * (g[:, None] / tau)
        buf = np.zeros_like(x.data)
        np.add.at(buf, rows, contrib)
        _accum(x, buf)

    return _make(out, (x,), bwd, "log_complement_softmax_entries")


def l2_normalize_rows(x, eps=1e-12):
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    Rows with norm below eps are divided by eps instead, so the op never
    divides by zero and stays differentiable.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a 2-D tensor, got {x.data.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.data / denom
    safe = (norms >= eps).astype(x.data.dtype)

    def bwd(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        _accum(x, (g - safe * out * inner) / denom)

    return _make(out, (x,), bwd, "l2_normalize_rows")


def batchnorm2d(x, gamma, beta, running_mean, running_var, *,
                training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over [N, C, H, W].

    gamma and beta are learnable [C] tensors; running_mean and running_var
    are plain arrays updated in place (biased batch variance) when
    training is True and read as fixed statistics otherwise.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [N, C, H, W], got {x.data.shape}")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ShapeError(f"batchnorm2d {name} must have shape ({c},), got {t.data.shape}")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batchnorm2d running stats must have shape ({c},)")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gs = g * gamma.data[None, :, None, None]
        if training:
            m1 = gs.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (gs * xhat).mean(axis=(0, 2, 3), keepdims=True)
            _accum(x, inv[None, :, None, None] * (gs - m1 - xhat * m2))
        else:
            _accum(x, gs * inv[None, :, None, None])

    return _make(out, (x, gamma, beta), bwd, "batchnorm2d")


def kaiming_uniform(rng, shape, fan_in, dtype=np.float64):
    """Trainable tensor drawn from U(-b, b) with b = sqrt(6 / fan_in)."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    bound = float(np.sqrt(6.0 / fan_in))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float64):
    """Trainable tensor initialized to zero."""
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float64):
    """Trainable tensor initialized to one."""
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(fn, x, eps=1e-5):
    """Compare analytic and central-difference gradients of a scalar map.

    fn maps the tensor x to a scalar Tensor and must be deterministic; it
    is evaluated twice to verify that before gradients are trusted.
    Returns the maximum relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not isinstance(x, Tensor):
        raise UsageError("grad_check needs a Tensor input")
    x.requires_grad = True
    x.zero_grad()
    _TAPE.clear()

    out1 = fn(x)
    if not isinstance(out1, Tensor) or out1.data.size != 1:
        raise UsageError("grad_check requires fn to return a scalar Tensor")
    v1 = float(out1.data.reshape(()))
    _TAPE.clear()

    out2 = fn(x)
    v2 = float(out2.data.reshape(()))
    if v1 != v2:
        raise UsageError("grad_check requires a deterministic fn; two evaluations differed")
    backward(out2)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(x).data.reshape(()))
            flat[i] = orig - eps
            fm = float(fn(x).data.reshape(()))
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))
