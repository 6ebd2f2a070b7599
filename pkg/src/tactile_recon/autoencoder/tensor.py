"""Minimal reverse-mode automatic differentiation over ``numpy`` arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward``
walks the graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ModelError


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents: Tuple["Tensor", ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], None]] = None,
                 requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ModelError("backward on a non-scalar tensor needs an explicit gradient")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def _topo_order(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise ModelError(f"non-finite values produced by {op}")
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ModelError(f"add shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, (a, b))
    out.backward_fn = lambda g: (a._accumulate(g), b._accumulate(g))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    with np.errstate(over="ignore"):
        out = Tensor(_check_finite(a.data * c, "scale"), (a,))
    out.backward_fn = lambda g: a._accumulate(g * c)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), (a,))
    out.backward_fn = lambda g: a._accumulate(g * mask)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a._accumulate(g * y * (1.0 - y))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), (a,))
    out.backward_fn = lambda g: a._accumulate(np.transpose(g, inv))
    return out


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[start:stop], (a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    out.backward_fn = bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, s, e in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(s, e)
            p._accumulate(g[tuple(idx)])

    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ModelError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out.backward_fn = bw
    return out


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Broadcast-add a per-channel vector ``b`` along ``axis`` of ``x``."""
    axis = axis % x.data.ndim
    if b.data.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ModelError(f"bias of shape {b.shape} does not fit axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[axis] = -1
    out = Tensor(x.data + b.data.reshape(shape), (x, b))
    other = tuple(i for i in range(x.data.ndim) if i != axis)

    def bw(g):
        x._accumulate(g)
        b._accumulate(g.sum(axis=other))

    out.backward_fn = bw
    return out


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (a,))
    out.backward_fn = lambda g: a._accumulate(y * (g - (g * y).sum(axis=1, keepdims=True)))
    return out


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, axes: Tuple[int, ...], channel_axis: int,
              train: bool, running_mean: np.ndarray, running_var: np.ndarray,
              eps: float = 1e-5, stats_out: Optional[list] = None) -> Tensor:
    """Per-channel normalisation over ``axes``.

    In train mode batch statistics are used and appended to ``stats_out`` as
    ``(mean, var, count)``; running statistics are never modified here.
    """
    shape = [1] * x.data.ndim
    shape[channel_axis] = -1
    g_ = gamma.data.reshape(shape)
    if train:
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        count = int(np.prod([x.shape[a] for a in axes]))
        if stats_out is not None:
            stats_out.append((mu.ravel(), var.ravel(), count))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = Tensor(g_ * xhat + beta.data.reshape(shape), (x, gamma, beta))

        def bw(g):
            gamma._accumulate((g * xhat).sum(axis=axes))
            beta._accumulate(g.sum(axis=axes))
            gx = g * g_
            x._accumulate(inv * (gx - gx.mean(axis=axes, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=axes, keepdims=True)))

        out.backward_fn = bw
        return out
    inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
    xhat = (x.data - running_mean.reshape(shape)) * inv
    out = Tensor(g_ * xhat + beta.data.reshape(shape), (x, gamma, beta))

    def bw_eval(g):
        gamma._accumulate((g * xhat).sum(axis=axes))
        beta._accumulate(g.sum(axis=axes))
        x._accumulate(g * g_ * inv)

    out.backward_fn = bw_eval
    return out


def segment_max(x: Tensor, offsets: Sequence[int]) -> Tensor:
    """Column-wise max over each row segment ``[offsets[k], offsets[k+1])``.

    The gradient goes to the first row attaining the maximum.
    """
    offsets = list(offsets)
    n_seg = len(offsets) - 1
    C = x.shape[1]
    out_data = np.empty((n_seg, C))
    arg = np.empty((n_seg, C), dtype=np.int64)
    for k in range(n_seg):
        s, e = offsets[k], offsets[k + 1]
        if e <= s:
            raise ModelError("segment_max over an empty segment")
        j = np.argmax(x.data[s:e], axis=0)
        arg[k] = s + j
        out_data[k] = x.data[s + j, np.arange(C)]
    out = Tensor(out_data, (x,))

    def bw(g):
        full = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(C), arg.shape)
        np.add.at(full, (arg, cols), g)
        x._accumulate(full)

    out.backward_fn = bw
    return out


def conv_transpose1d(x: Tensor, w: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed 1-D convolution; ``x`` is ``(B, C_in, L)``, ``w`` is ``(C_in, C_out, K)``.

    Output length is ``(L - 1) * stride - 2 * padding + K``.
    """
    B, Ci, L = x.shape
    Ci2, Co, K = w.shape
    if Ci != Ci2:
        raise ModelError(f"conv_transpose1d channel mismatch {x.shape} vs {w.shape}")
    L_full = (L - 1) * stride + K
    L_out = L_full - 2 * padding
    if L_out < 1:
        raise ModelError("conv_transpose1d output would be empty")
    # contributions z[b, o, k, l] land at full position l * stride + k
    z = np.einsum("bil,iok->bokl", x.data, w.data, optimize=True)
    full = np.zeros((B, Co, L_full))
    pos = np.arange(L) * stride
    for k in range(K):
        full[:, :, pos + k] += z[:, :, k, :]
    out = Tensor(full[:, :, padding:padding + L_out], (x, w))

    def bw(g):
        gfull = np.zeros((B, Co, L_full))
        gfull[:, :, padding:padding + L_out] = g
        gz = np.stack([gfull[:, :, pos + k] for k in range(K)], axis=2)
        x._accumulate(np.einsum("bokl,iok->bil", gz, w.data, optimize=True))
        w._accumulate(np.einsum("bil,bokl->iok", x.data, gz, optimize=True))

    out.backward_fn = bw
    return out


def chamfer_batch(pred: Tensor, targets: Sequence[np.ndarray], nn_fn) -> Tensor:
    """Mean over the batch of the symmetric Chamfer distance (plain L2).

    ``pred`` is ``(B, N, 3)``. Correspondences come from ``nn_fn(query, ref)
    -> (dist, idx)`` and are held fixed for the gradient; a zero-length
    residual contributes a zero subgradient.
    """
    B = pred.shape[0]
    if B != len(targets):
        raise ModelError("prediction and target batch sizes differ")
    total = 0.0
    grad = np.zeros_like(pred.data)
    for b in range(B):
        p = pred.data[b]
        t = np.asarray(targets[b], dtype=np.float64)
        d_pt, i_pt = nn_fn(p, t)
        d_tp, i_tp = nn_fn(t, p)
        total += d_pt.mean() + d_tp.mean()
        r = p - t[i_pt]
        grad[b] += r / np.where(d_pt > 0, d_pt, np.inf)[:, None] / len(p)
        r2 = p[i_tp] - t
        np.add.at(grad[b], i_tp, r2 / np.where(d_tp > 0, d_tp, np.inf)[:, None] / len(t))
    out = Tensor(np.array(total / B), (pred,))
    out.backward_fn = lambda g: pred._accumulate(grad * (g / B))
    return out
