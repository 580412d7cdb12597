"""Dense-tensor reverse-mode automatic differentiation.

Define-by-run: every operation records its inputs and a backward closure on
the output tensor, so each forward pass builds a fresh graph. ``backward``
walks reachable nodes in reverse construction order (a valid reverse
topological order, since inputs always exist before outputs).

Conventions:
  * float32 storage by default; pass float64 arrays for high-precision
    gradient checking.
  * No implicit broadcasting except bias addition over the last axis
    (``add_bias``). Everything else wants explicit ``reshape`` /
    ``repeat_leading``.
  * Repeated ``backward`` calls without zeroing grads accumulate into leaf
    ``grad`` arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "DimensionError",
    "ContractError",
    "tensor",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "shift",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "repeat_leading",
    "extract_patches",
    "softmax",
    "layer_norm",
    "gelu",
    "sqrt",
    "tsum",
    "tmean",
    "cross_entropy",
    "kl_divergence",
    "backward",
    "trace",
]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

_seq_counter = itertools.count()


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation precondition (beyond shapes) was violated."""


class Tensor:
    """An n-dimensional float array, optionally tracked by the graph.

    ``data`` is always a C-contiguous ndarray. ``grad`` is lazily created
    (same shape/dtype as ``data``) the first time a backward pass reaches
    this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        # ascontiguousarray would promote 0-d to 1-d; keep true scalars 0-d
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None          # name of the producing operation, None for leaves
        self.parents = ()       # input tensors of the producing operation
        self._backward = None   # closure: propagate self.grad into parents
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """A leaf tensor sharing this tensor's values (no graph history)."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        op = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{op})"

    # light operator sugar; scalars only where unambiguous
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(data, parents, op, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        _accumulate(a, g)
        _accumulate(b, g)

    out = _result(a.data + b.data, (a, b), "add", bw)
    out_holder.append(out)
    return out


def add_bias(x, b):
    """x + b with b broadcast over the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} vs input {x.shape}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        _accumulate(x, g)
        axes = tuple(range(g.ndim - 1))
        _accumulate(b, g.sum(axis=axes) if axes else g)

    out = _result(x.data + b.data, (x, b), "add_bias", bw)
    out_holder.append(out)
    return out


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        _accumulate(a, g)
        _accumulate(b, -g)

    out = _result(a.data - b.data, (a, b), "sub", bw)
    out_holder.append(out)
    return out


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    out = _result(a.data * b.data, (a, b), "mul", bw)
    out_holder.append(out)
    return out


def scale(x, c):
    c = float(c)
    out_holder = []

    def bw():
        _accumulate(x, out_holder[0].grad * c)

    out = _result(x.data * np.array(c, dtype=x.dtype), (x,), "scale", bw)
    out_holder.append(out)
    return out


def shift(x, c):
    c = float(c)
    out_holder = []

    def bw():
        _accumulate(x, out_holder[0].grad)

    out = _result(x.data + np.array(c, dtype=x.dtype), (x,), "shift", bw)
    out_holder.append(out)
    return out


def matmul(a, b):
    """Matrix product. 2-D, or stacked with identical leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul: operands must be at least 2-D")
    if a.ndim != b.ndim:
        raise DimensionError(f"matmul: ranks differ ({a.ndim} vs {b.ndim}); reshape explicitly")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape[-1]} vs {b.shape[-2]}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    out = _result(np.matmul(a.data, b.data), (a, b), "matmul", bw)
    out_holder.append(out)
    return out


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: {x.shape} -> {shape}")
    out_holder = []

    def bw():
        _accumulate(x, out_holder[0].grad.reshape(x.shape))

    out = _result(np.ascontiguousarray(x.data.reshape(shape)), (x,), "reshape", bw)
    out_holder.append(out)
    return out


def transpose(x, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_holder = []

    def bw():
        _accumulate(x, np.ascontiguousarray(out_holder[0].grad.transpose(inv)))

    out = _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", bw)
    out_holder.append(out)
    return out


def concat(tensors, axis):
    tensors = list(tensors)
    out_holder = []
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        g = out_holder[0].grad
        idx = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx[axis] = slice(int(start), int(stop))
            _accumulate(t, g[tuple(idx)])

    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)
    out_holder.append(out)
    return out


def narrow(x, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(f"narrow: [{start}:{start+length}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_holder = []

    def bw():
        g = np.zeros_like(x.data)
        g[idx] = out_holder[0].grad
        _accumulate(x, g)

    out = _result(np.ascontiguousarray(x.data[idx]), (x,), "narrow", bw)
    out_holder.append(out)
    return out


def repeat_leading(x, n):
    """Stack ``n`` copies of x along a new leading axis; grads sum over copies."""
    out_holder = []

    def bw():
        _accumulate(x, out_holder[0].grad.sum(axis=0))

    data = np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape))
    out = _result(data, (x,), "repeat_leading", bw)
    out_holder.append(out)
    return out


def extract_patches(x, width, stride):
    """(B, C, L) -> (B, N, C*width) sliding windows; backward scatter-adds."""
    if x.ndim != 3:
        raise DimensionError(f"extract_patches: expected 3-D input, got {x.shape}")
    B, C, L = x.shape
    if width > L or stride < 1:
        raise DimensionError(f"extract_patches: width {width}, stride {stride} vs length {L}")
    n = (L - width) // stride + 1
    windows = [x.data[:, :, j * stride: j * stride + width] for j in range(n)]
    data = np.ascontiguousarray(np.stack(windows, axis=1).reshape(B, n, C * width))
    out_holder = []

    def bw():
        g = out_holder[0].grad.reshape(B, n, C, width)
        gx = np.zeros_like(x.data)
        for j in range(n):
            gx[:, :, j * stride: j * stride + width] += g[:, j]
        _accumulate(x, gx)

    out = _result(data, (x,), "extract_patches", bw)
    out_holder.append(out)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out_holder = []

    def bw():
        g = out_holder[0].grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - dot))

    out = _result(y, (x,), "softmax", bw)
    out_holder.append(out)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_holder = []

    def bw():
        g = out_holder[0].grad
        dxhat = g * gain.data
        if x.requires_grad:
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dxhat - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
        _accumulate(bias, g.sum(axis=lead) if lead else g)

    out = _result(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", bw)
    out_holder.append(out)
    return out


def gelu(x):
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_holder = []

    def bw():
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, out_holder[0].grad * (phi + x.data * pdf))

    out = _result((x.data * phi).astype(x.dtype), (x,), "gelu", bw)
    out_holder.append(out)
    return out


def sqrt(x):
    y = np.sqrt(x.data)
    out_holder = []

    def bw():
        # subgradient 0 where the forward value vanished
        denom = np.where(y > 0, 2.0 * y, 1.0)
        _accumulate(x, np.where(y > 0, out_holder[0].grad / denom, 0.0))

    out = _result(y, (x,), "sqrt", bw)
    out_holder.append(out)
    return out


def tsum(x, axis=None, keepdims=False):
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    out_holder = []

    def bw():
        g = out_holder[0].grad
        if not keepdims:
            shape = list(x.shape)
            for a in axes:
                shape[a] = 1
            g = g.reshape(shape)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    data = x.data.sum(axis=axes, keepdims=keepdims)
    out = _result(np.asarray(data, dtype=x.dtype), (x,), "sum", bw)
    out_holder.append(out)
    return out


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    elif isinstance(axis, int):
        count = x.shape[axis % x.ndim]
    else:
        count = int(np.prod([x.shape[a % x.ndim] for a in axis]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def cross_entropy(logits, labels, reduction="mean"):
    """-log softmax(logits)[label], stably; 1-D logits or a (B, K) batch.

    ``reduction`` applies across the batch ("mean" or "sum"); a 1-D input
    yields the single-sample loss either way.
    """
    if logits.ndim == 1:
        lg = logits.data[None, :]
        lab = np.array([labels], dtype=np.int64)
        squeeze = True
    elif logits.ndim == 2:
        lg = logits.data
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (lg.shape[0],):
            raise DimensionError(f"cross_entropy: labels {lab.shape} vs batch {lg.shape[0]}")
        squeeze = False
    else:
        raise DimensionError(f"cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    K = lg.shape[1]
    if np.any(lab < 0) or np.any(lab >= K):
        raise IndexError(f"cross_entropy: label out of range [0, {K})")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"cross_entropy: unknown reduction {reduction!r}")

    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    lse = np.log(z).squeeze(1) + m.squeeze(1)
    losses = lse - lg[np.arange(lg.shape[0]), lab]
    B = lg.shape[0]
    value = losses.sum() if reduction == "sum" else losses.mean()
    out_holder = []

    def bw():
        g = float(out_holder[0].grad)
        grad = probs.copy()
        grad[np.arange(B), lab] -= 1.0
        if reduction == "mean":
            grad /= B
        grad = (grad * g).astype(logits.dtype)
        _accumulate(logits, grad[0] if squeeze else grad)

    out = _result(np.asarray(value, dtype=logits.dtype), (logits,), "cross_entropy", bw)
    out_holder.append(out)
    return out


def kl_divergence(p, q, reduction="mean", validate=True):
    """KL(p || q) = sum p * ln(p / q), rows of a (B, K) batch or a single 1-D pair.

    Uses the 0 * ln(0 / q) = 0 convention and clamps q at 1e-12. With
    ``reduction="none"`` returns the per-row divergences.
    """
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence: shapes {p.shape} vs {q.shape}")
    pd = p.data if p.ndim == 2 else p.data[None, :]
    qd = q.data if q.ndim == 2 else q.data[None, :]
    squeeze = p.ndim == 1
    if validate:
        for name, arr in (("p", pd), ("q", qd)):
            if np.any(arr < -1e-7):
                raise ContractError(f"kl_divergence: {name} has negative entries")
            sums = arr.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-5):
                raise ContractError(f"kl_divergence: {name} rows do not sum to 1")
    qc = np.maximum(qd, 1e-12)
    pc = np.maximum(pd, 1e-12)
    logratio = np.log(pc) - np.log(qc)
    terms = np.where(pd > 0, pd * logratio, 0.0)
    rows = terms.sum(axis=1)
    B = pd.shape[0]
    if reduction == "none":
        value = rows if not squeeze else rows
    elif reduction == "sum":
        value = rows.sum()
    elif reduction == "mean":
        value = rows.mean()
    else:
        raise ContractError(f"kl_divergence: unknown reduction {reduction!r}")
    out_holder = []

    def bw():
        g = out_holder[0].grad
        if reduction == "none":
            grow = np.asarray(g).reshape(B, 1)
        else:
            grow = np.full((B, 1), float(g) / (B if reduction == "mean" else 1.0))
        if p.requires_grad:
            gp = np.where(pd > 0, (logratio + 1.0) * grow, 0.0).astype(p.dtype)
            _accumulate(p, gp[0] if squeeze else gp)
        if q.requires_grad:
            gq = (-(pd / qc) * grow).astype(q.dtype)
            _accumulate(q, gq[0] if squeeze else gq)

    data = np.asarray(value, dtype=p.dtype)
    if reduction == "none" and squeeze:
        data = data.reshape(())
    out = _result(data, (p, q), "kl_divergence", bw)
    out_holder.append(out)
    return out


# ---------------------------------------------------------------------------
# backward pass


@dataclass
class GraphNode:
    seq: int
    op: str
    parent_seqs: tuple
    tensor: Tensor


@dataclass
class Graph:
    """Reverse-construction-ordered view of the nodes reachable from a root."""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def _reachable(root):
    seen = {id(root): root}
    stack = [root]
    while stack:
        t = stack.pop()
        for p in t.parents:
            if p.requires_grad and id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._seq, reverse=True)


def trace(root):
    nodes = [
        GraphNode(t._seq, t.op or "leaf", tuple(p._seq for p in t.parents), t)
        for t in _reachable(root)
    ]
    return Graph(nodes)


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Leaf grads accumulate across calls; interior grads are reset per call.
    """
    if loss.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ordered = _reachable(loss)
    for t in ordered:
        if t._backward is not None:  # interior node: fresh accumulator
            t.grad = np.zeros_like(t.data)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for t in ordered:
        if t._backward is not None:
            t._backward()
