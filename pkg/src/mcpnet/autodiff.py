"""Minimal reverse-mode autodiff over numpy arrays.

Only the operators the network needs are provided. Tensors have rank <= 3;
a leading batch axis is optional everywhere, so ``(N, C)`` and ``(B, N, C)``
inputs are both accepted. Backward visits nodes in exact reverse creation
order, which is the execution order of the forward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_counter = itertools.count()


class ShapeMismatch(ValueError):
    pass


class EvenKernel(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


class Tensor:
    """A dense array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "extra")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim > 3:
            raise ShapeMismatch(f"rank {data.ndim} > 3")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._id = next(_counter)
        self.extra: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor. Scalars default to a unit seed."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        self._accumulate(grad)
        for key in sorted(nodes, reverse=True):
            node = nodes[key]
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # small helpers used by tests and the gradient checker
    def __add__(self, other: Tensor) -> Tensor:
        if self.shape != other.shape:
            raise ShapeMismatch(f"{self.shape} + {other.shape}")

        def back(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return Tensor(self.data + other.data, _parents=(self, other), _backward=back)

    def __mul__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeMismatch(f"{self.shape} * {other.shape}")

            def back(g):
                if self.requires_grad:
                    self._accumulate(g * other.data)
                if other.requires_grad:
                    other._accumulate(g * self.data)

            return Tensor(self.data * other.data, _parents=(self, other), _backward=back)
        c = float(other)

        def back_scalar(g):
            self._accumulate(g * c)

        return Tensor(self.data * c, _parents=(self,), _backward=back_scalar)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        def back(g):
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor(np.asarray(self.data.sum()), _parents=(self,), _backward=back)


def _as_batched(x: np.ndarray, core_ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == core_ndim:
        return x[None], True
    if x.ndim == core_ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected rank {core_ndim} or {core_ndim + 1}, got shape {x.shape}")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 'same' convolution along the point axis.

    ``x`` is ``(N, C_in)`` or ``(B, N, C_in)``; ``kernel`` is ``(k, C_in, C_out)``.
    """
    if kernel.data.ndim != 3:
        raise ShapeMismatch(f"kernel must be (k, C_in, C_out), got {kernel.shape}")
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise EvenKernel(f"kernel length {k} is even")
    if bias.shape != (c_out,):
        raise ShapeMismatch(f"bias {bias.shape} does not match C_out={c_out}")
    xb, squeeze = _as_batched(x.data, 2)
    if xb.shape[-1] != c_in:
        raise ShapeMismatch(f"input has {xb.shape[-1]} channels, kernel expects {c_in}")
    b, n, _ = xb.shape
    half = (k - 1) // 2
    w2 = kernel.data.reshape(k * c_in, c_out)
    if k == 1:
        cols = xb
    else:
        padded = np.zeros((b, n + 2 * half, c_in), dtype=xb.dtype)
        padded[:, half:half + n] = xb
        # cols[b, n, j, i] = padded[b, n + j, i]
        cols = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)
        cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(b, n, k * c_in)
    out = cols @ w2 + bias.data
    if squeeze:
        out = out[0]

    def back(g):
        gb = g[None] if squeeze else g
        if kernel.requires_grad:
            gw = cols.reshape(-1, k * c_in).T @ gb.reshape(-1, c_out)
            kernel._accumulate(gw.reshape(k, c_in, c_out))
        if bias.requires_grad:
            bias._accumulate(gb.reshape(-1, c_out).sum(axis=0))
        if x.requires_grad:
            gcols = (gb @ w2.T).reshape(b, n, k, c_in)
            if k == 1:
                gx = gcols[:, :, 0, :]
            else:
                gpad = np.zeros((b, n + 2 * half, c_in), dtype=gb.dtype)
                for j in range(k):
                    gpad[:, j:j + n] += gcols[:, :, j, :]
                gx = gpad[:, half:half + n]
            x._accumulate(gx[0] if squeeze else gx)

    return Tensor(out, _parents=(x, kernel, bias), _backward=back)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer, updated in place in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> BatchNormState:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over every axis except the last.

    In train mode the statistics come from the batch (all samples and points)
    and the running averages are updated as ``m*running + (1-m)*batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ShapeMismatch(f"batch_norm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(range(x.data.ndim - 1))
    count = x.data.size // c
    if mode == "train":
        # 64-bit accumulation makes the statistics independent of point order
        wide = x.data.astype(np.float64)
        mean64 = wide.sum(axis=axes) / count
        var = (((wide - mean64) ** 2).sum(axis=axes) / count).astype(x.dtype)
        mean = mean64.astype(x.dtype)
        centered = x.data - mean
        unbiased = var * count / (count - 1) if count > 1 else var
        m = state.momentum
        state.mean[...] = m * state.mean + (1 - m) * mean
        state.var[...] = m * state.var + (1 - m) * unbiased
    elif mode == "eval":
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        centered = x.data - mean
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data
            if mode == "train":
                gx = inv_std * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
            else:
                gx = gxhat * inv_std
            x._accumulate(gx)

    return Tensor(out.astype(x.dtype, copy=False), _parents=(x, gamma, beta), _backward=back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def back(g):
        x._accumulate(g * mask)

    return Tensor(out, _parents=(x,), _backward=back)


def max_pool_seq(x: Tensor) -> Tensor:
    """Channel-wise max over the point axis: ``(N, C) -> (C,)`` or ``(B, N, C) -> (B, C)``."""
    xb, squeeze = _as_batched(x.data, 2)
    if xb.shape[1] < 1:
        raise ShapeMismatch("max_pool_seq needs at least one point")
    idx = xb.argmax(axis=1)  # first occurrence on ties
    out = np.take_along_axis(xb, idx[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gb = g[None] if squeeze else g
        gx = np.zeros_like(xb)
        np.put_along_axis(gx, idx[:, None, :], gb[:, None, :], axis=1)
        x._accumulate(gx[0] if squeeze else gx)

    return Tensor(out[0] if squeeze else out, _parents=(x,), _backward=back)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a feature vector ``n`` times: ``(C,) -> (n, C)`` or ``(B, C) -> (B, n, C)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xb, squeeze = _as_batched(x.data, 1)
    out = np.repeat(xb[:, None, :], n, axis=1)

    def back(g):
        gb = g[None] if squeeze else g
        s = gb.sum(axis=1)
        x._accumulate(s[0] if squeeze else s)

    return Tensor(out[0] if squeeze else out, _parents=(x,), _backward=back)


def concat_cols(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel (last) axis in argument order."""
    if not inputs:
        raise ShapeMismatch("concat_cols needs at least one input")
    lead = inputs[0].shape[:-1]
    for t in inputs:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(f"cannot concatenate {t.shape} with leading shape {lead}")
    widths = [t.shape[-1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=-1)
    bounds = np.cumsum([0] + widths)

    def back(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    return Tensor(out, _parents=tuple(inputs), _backward=back)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, weight_mask=None) -> Tensor:
    """Summed negative log-likelihood of ``labels`` under a row-wise softmax.

    ``labels`` and ``weight_mask`` match ``logits.shape[:-1]``. The softmax
    probabilities are kept on the result as ``extra['probs']``.
    """
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c - 1}]")
    mask = np.ones(labels.shape, dtype=logits.dtype) if weight_mask is None else np.asarray(weight_mask, dtype=logits.dtype)
    if mask.shape != labels.shape:
        raise ShapeMismatch(f"weight_mask {mask.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    labels = labels.astype(np.intp)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum()
    probs = np.exp(logp)

    def back(g):
        onehot = np.eye(c, dtype=probs.dtype)[labels]
        logits._accumulate((probs - onehot) * mask[..., None] * g)

    out = Tensor(np.asarray(loss, dtype=logits.dtype), _parents=(logits,), _backward=back)
    out.extra["probs"] = probs
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Compare analytic gradients of a scalar closure against central differences.

    ``fn`` must rebuild the graph from ``inputs`` on every call. Returns the
    maximum of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs 64-bit tensors")
        t.requires_grad = True
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    # the perturbed evaluations need no graph
    for t in inputs:
        t.requires_grad = False
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            a = float(gflat[i])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    for t in inputs:
        t.requires_grad = True
    return worst
