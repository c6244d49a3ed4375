"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the operation set the interpolation network needs: matrix
products, pointwise activations, row-wise softmax/standardization, point
pooling, neighbor gathering and per-channel normalization, plus the shape
plumbing (concat, reshape, broadcast) to wire them together.  Two scalar
precisions are supported: float32 for training speed, float64 for gradient
checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_VALID_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Backward pass requested on a missing or already-replayed tape."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "parents", "backward_fn", "tape", "index")

    def __init__(self, out, parents, backward_fn, tape, index):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class GradientTape:
    """Append-only record of operations, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False


_active_tape: GradientTape | None = None
_grad_enabled: bool = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _recording_tape() -> GradientTape:
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = GradientTape()
    return _active_tape


class Tensor:
    """Dense n-dimensional value with an optional gradient-tape attachment."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _VALID_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small operator sugar; the heavy lifting stays in the module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out: Tensor, parents, backward_fn):
    """Attach `out` to the active tape if any parent participates in autodiff."""
    if not _grad_enabled:
        return out
    if not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    tape = _recording_tape()
    node = _Node(out, parents, backward_fn, tape, len(tape.nodes))
    out.node = node
    tape.nodes.append(node)
    return out


def make_op(out_data, parents, backward_fn) -> Tensor:
    """Build a tensor from a custom forward result and a backward closure.

    `backward_fn(grad)` must accumulate into each differentiable parent via
    `accumulate_grad`.  Used by domain modules to define ops (e.g. matched
    point distances) whose gradients are hand-derived.
    """
    out = Tensor(out_data)
    return _record(out, parents, backward_fn)


def accumulate_grad(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor):
    """Reverse-topological gradient accumulation from a scalar loss.

    Gradients sum into `.grad` of every requires_grad tensor reachable from
    `loss`, which lets callers accumulate over a batch before an optimizer
    step.  Replaying the same tape twice without a fresh forward pass is an
    error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.node is None:
        raise TapeError("loss is not attached to a gradient tape (no recorded forward pass)")
    tape = loss.node.tape
    if tape.consumed:
        raise TapeError("stale tape: backward was already called; run a fresh forward pass")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = node.out.grad
        if g is None:
            continue
        node.backward_fn(g)
    tape.consumed = True


def zero_grads(params):
    for p in (params.values() if isinstance(params, dict) else params):
        p.zero_grad()


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded, back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(s))

    def bwd(g):
        accumulate_grad(a, g * s)

    return _record(out, (a,), bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(c))

    def bwd(g):
        accumulate_grad(a, g)

    return _record(out, (a,), bwd)


def reciprocal(a: Tensor) -> Tensor:
    inv = 1.0 / a.data
    out = Tensor(inv)

    def bwd(g):
        accumulate_grad(a, -g * inv * inv)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with dA = dC.B^T, dB = A^T.dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def pointwise_activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        out_data = np.maximum(x.data, 0)
        dmask = (x.data > 0).astype(x.data.dtype)
    elif kind == "leaky_relu":
        if not np.isfinite(slope):
            raise ValueError(f"leaky_relu slope must be finite, got {slope}")
        out_data = np.where(x.data > 0, x.data, x.data * x.data.dtype.type(slope))
        # derivative at exactly 0 is the slope
        dmask = np.where(x.data > 0, x.data.dtype.type(1), x.data.dtype.type(slope))
    elif kind == "tanh":
        out_data = np.tanh(x.data)
        dmask = 1 - out_data * out_data
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    out = Tensor(out_data)

    def bwd(g):
        accumulate_grad(x, g * dmask)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return pointwise_activation(x, "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return pointwise_activation(x, "leaky_relu", slope)


def tanh(x: Tensor) -> Tensor:
    return pointwise_activation(x, "tanh")


# ---------------------------------------------------------------------------
# Row-wise normalizations
# ---------------------------------------------------------------------------

def row_softmax(x: Tensor) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_softmax expects a 2-D tensor, got shape {x.data.shape}")
    if np.isnan(x.data).any():
        raise FloatingPointError("row_softmax: NaN in input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return _record(out, (x,), bwd)


def row_standardize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-row (value - mean) / (population std + eps)."""
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise ShapeError(f"row_standardize needs at least 2 columns, got shape {x.data.shape}")
    n = x.data.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    sigma = np.sqrt(var)
    s = sigma + x.data.dtype.type(eps)
    y = centered / s
    out = Tensor(y)

    def bwd(g):
        # d var flows through sigma = sqrt(var); the term vanishes on
        # constant rows (centered == 0), where 1/sigma would blow up.
        gv = np.zeros_like(sigma)
        nz = sigma > 0
        num = -(g * centered).sum(axis=1, keepdims=True)
        gv[nz] = num[nz] / (2.0 * sigma[nz] * s[nz] * s[nz])
        gmu = -g.sum(axis=1, keepdims=True) / s
        gx = g / s + gv * 2.0 * centered / n + gmu / n
        accumulate_grad(x, gx)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Pooling / reductions
# ---------------------------------------------------------------------------

def pool_points(x: Tensor, kind: str) -> Tensor:
    """Max or mean over the point axis of an N x d matrix, keeping 1 x d."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"pool_points expects a non-empty 2-D tensor, got shape {x.data.shape}")
    n, d = x.data.shape
    if kind == "max":
        idx = np.argmax(x.data, axis=0)  # first argmax on ties
        out = Tensor(x.data[idx, np.arange(d)][None, :])

        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[idx, np.arange(d)] = g[0]
            accumulate_grad(x, gx)

    elif kind == "avg":
        out = Tensor(x.data.mean(axis=0, keepdims=True))

        def bwd(g):
            accumulate_grad(x, np.broadcast_to(g / n, x.data.shape).copy())

    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _record(out, (x,), bwd)


def neighbor_max(x: Tensor) -> Tensor:
    """Max over axis 1 of an N x k x d tensor (per-point neighborhood pooling)."""
    if x.data.ndim != 3:
        raise ShapeError(f"neighbor_max expects a 3-D tensor, got shape {x.data.shape}")
    am = np.argmax(x.data, axis=1)
    out = Tensor(np.take_along_axis(x.data, am[:, None, :], axis=1)[:, 0, :])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, am[:, None, :], g[:, None, :], axis=1)
        accumulate_grad(x, gx)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Indexing / shaping
# ---------------------------------------------------------------------------

def gather_neighbors(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i, j, :] = x[idx[i, j], :]; backward scatter-adds."""
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.ndim != 2:
        raise ShapeError(f"gather_neighbors expects 2-D inputs, got {x.data.shape} and {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_neighbors: index out of range [0, {n})")
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.ravel(), g.reshape(-1, x.data.shape[1]))
        accumulate_grad(x, gx)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        accumulate_grad(x, g.reshape(x.data.shape))

    return _record(out, (x,), bwd)


def concat_last(tensors) -> Tensor:
    """Concatenate along the last axis; backward splits."""
    tensors = [as_tensor(t) for t in tensors]
    widths = [t.data.shape[-1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=-1))
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            accumulate_grad(t, g[..., lo:hi])

    return _record(out, tuple(tensors), bwd)


def expand_mid(x: Tensor, k: int) -> Tensor:
    """N x c -> N x k x c by repetition; backward sums over the new axis."""
    n, c = x.data.shape
    out = Tensor(np.broadcast_to(x.data[:, None, :], (n, k, c)).copy())

    def bwd(g):
        accumulate_grad(x, g.sum(axis=1))

    return _record(out, (x,), bwd)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """1 x d -> n x d by repetition; backward sums over rows."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects a 1 x d tensor, got shape {x.data.shape}")
    out = Tensor(np.repeat(x.data, n, axis=0))

    def bwd(g):
        accumulate_grad(x, g.sum(axis=0, keepdims=True))

    return _record(out, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy())

    def bwd(g):
        accumulate_grad(x, g.T)

    return _record(out, (x,), bwd)


def row_sums(x: Tensor) -> Tensor:
    """Sum along axis 1 of a 2-D tensor, keeping an N x 1 column."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_sums expects a 2-D tensor, got shape {x.data.shape}")
    out = Tensor(x.data.sum(axis=1, keepdims=True))

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.data.shape).copy())

    return _record(out, (x,), bwd)


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance matrix D[i, j] = ||a_i - b_j||_2 for row sets.

    Forward runs blocked explicit differences so self-distances of identical
    rows are exactly zero; backward uses the closed matrix form.  Gradient of
    a coincident pair (D == 0) is defined as zero.
    """
    n, d = a.data.shape
    m, d2 = b.data.shape
    if d != d2:
        raise ShapeError(f"pairwise_distance: feature widths differ, {a.data.shape} vs {b.data.shape}")
    dist = np.empty((n, m), dtype=a.data.dtype)
    block = max(1, int(8e6) // max(1, m * d))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        diff = a.data[lo:hi, None, :] - b.data[None, :, :]
        dist[lo:hi] = np.sqrt((diff * diff).sum(axis=-1))
    out = Tensor(dist)

    def bwd(g):
        w = np.where(dist > 0, g / np.where(dist > 0, dist, 1), 0)
        accumulate_grad(a, w.sum(axis=1, keepdims=True) * a.data - w @ b.data)
        accumulate_grad(b, w.sum(axis=0)[:, None] * b.data - w.T @ a.data)

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Per-channel normalization
# ---------------------------------------------------------------------------

@dataclass
class NormState:
    """Learnable scale/shift plus running statistics for one channel_norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_updates: int = 0

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def channel_norm(x: Tensor, state: NormState, mode: str = "train") -> Tensor:
    """Normalize an N x d tensor per channel over the point axis.

    Train mode uses batch-of-points statistics and updates the running
    mean/var with the configured momentum; eval mode normalizes with the
    running statistics.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"channel_norm expects a 2-D tensor, got shape {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"channel_norm mode must be 'train' or 'eval', got {mode!r}")
    gamma, beta = state.gamma, state.beta
    eps = x.data.dtype.type(state.eps)

    if mode == "train":
        n = x.data.shape[0]
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        s = np.sqrt(var + eps)
        xhat = centered / s
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
        state.num_updates += 1
        out = Tensor(gamma.data * xhat + beta.data)

        def bwd(g):
            accumulate_grad(beta, g.sum(axis=0))
            accumulate_grad(gamma, (g * xhat).sum(axis=0))
            gxh = g * gamma.data
            gvar = (gxh * centered).sum(axis=0) * (-0.5) / (s ** 3)
            gmu = -gxh.sum(axis=0) / s
            gx = gxh / s + gvar * 2.0 * centered / n + gmu / n
            accumulate_grad(x, gx)

    else:
        s = np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) / s
        out = Tensor(gamma.data * xhat + beta.data)

        def bwd(g):
            accumulate_grad(beta, g.sum(axis=0))
            accumulate_grad(gamma, (g * xhat).sum(axis=0))
            accumulate_grad(x, g * gamma.data / s)

    return _record(out, (x, gamma, beta), bwd)
