"""A minimal reverse-mode autodiff tensor and the ops the stager needs.

Graphs are recorded only while gradient mode is on (the default) and at
least one input requires a gradient; :func:`no_grad` switches recording off
for inference. Activations are laid out ``(batch, channels, time)``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this node to every leaf that needs them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient requires a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                if node._parents:
                    node.grad = None
                    node._backward = None
                    node._parents = ()


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate(g)


# --------------------------------------------------------------------------
# ops


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """'Same'-length convolution; even kernels pad one extra sample on the right."""
    k = w.shape[2]
    pad_left = (k - 1) // 2
    out = kernels.conv1d_forward(x.data, w.data, None if b is None else b.data, pad_left)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx, gw, gb = kernels.conv1d_backward(x.data, w.data, g, pad_left)
        _push(x, gx)
        _push(w, gw)
        if b is not None:
            _push(b, gb)

    return _result(out, parents, backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over batch and time.

    In training mode batch statistics are used and the running estimates
    are updated in place; in eval mode the running estimates are used.
    """
    dt = x.data.dtype
    if training:
        count = x.data.shape[0] * x.data.shape[2]
        mean = x.data.mean(axis=(0, 2), dtype=np.float64)
        centered = x.data - mean.astype(dt)[None, :, None]
        var = np.einsum("nct,nct->c", centered, centered, dtype=np.float64) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        centered = x.data - mean.astype(dt)[None, :, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = centered * inv_std[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        _push(beta, g.sum(axis=(0, 2)))
        _push(gamma, np.einsum("nct,nct->c", g, xhat))
        if not x.requires_grad:
            return
        gx_hat = g * gamma.data[None, :, None]
        if training:
            m = x.data.shape[0] * x.data.shape[2]
            s1 = gx_hat.sum(axis=(0, 2), dtype=np.float64) / m
            s2 = np.einsum("nct,nct->c", gx_hat, xhat, dtype=np.float64) / m
            gx = (gx_hat - s1.astype(dt)[None, :, None] - xhat * s2.astype(dt)[None, :, None]) * inv_std[None, :, None]
        else:
            gx = gx_hat * inv_std[None, :, None]
        x.accumulate(gx)

    return _result(out, (x, gamma, beta), backward)


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg = np.expm1(np.minimum(x.data, 0))
    out = np.where(pos, x.data, neg)

    def backward(g):
        x.accumulate(np.where(pos, g, g * (neg + 1)))

    return _result(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1 - out * out))

    return _result(out, (x,), backward)


def maxpool2(x: Tensor) -> Tensor:
    n, c, length = x.shape
    if length % 2:
        raise ValueError("maxpool2 needs an even length")
    pairs = x.data.reshape(n, c, length // 2, 2)
    right = pairs[..., 1] > pairs[..., 0]
    out = np.where(right, pairs[..., 1], pairs[..., 0])

    def backward(g):
        gx = np.zeros_like(pairs)
        gx[..., 1] = np.where(right, g, 0)
        gx[..., 0] = np.where(right, 0, g)
        x.accumulate(gx.reshape(n, c, length))

    return _result(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by two along time."""
    out = np.repeat(x.data, 2, axis=2)

    def backward(g):
        n, c, length = g.shape
        x.accumulate(g.reshape(n, c, length // 2, 2).sum(axis=3))

    return _result(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _push(t, part)

    return _result(out, tuple(tensors), backward)


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    if left == 0 and right == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    stop = left + x.shape[2]

    def backward(g):
        x.accumulate(g[:, :, left:stop])

    return _result(out, (x,), backward)


def crop_time(x: Tensor, start: int, stop: int) -> Tensor:
    if start == 0 and stop == x.shape[2]:
        return x
    out = x.data[:, :, start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, start:stop] = g
        x.accumulate(gx)

    return _result(out, (x,), backward)


def epoch_mean(x: Tensor, epoch_samples: int, n_epochs: int) -> Tensor:
    """Mean over consecutive windows of ``epoch_samples``; the last window may be partial."""
    n, c, length = x.shape
    full = min(n_epochs, length // epoch_samples)
    counts = np.full(n_epochs, epoch_samples, dtype=np.int64)
    out = np.empty((n, c, n_epochs), dtype=x.data.dtype)
    if full:
        out[:, :, :full] = x.data[:, :, : full * epoch_samples].reshape(n, c, full, epoch_samples).mean(axis=3)
    if n_epochs > full:
        tail = x.data[:, :, full * epoch_samples :]
        counts[full] = tail.shape[2]
        out[:, :, full] = tail.mean(axis=2)

    def backward(g):
        gx = np.zeros_like(x.data)
        if full:
            block = (g[:, :, :full] / epoch_samples)[..., None]
            gx[:, :, : full * epoch_samples] = np.broadcast_to(
                block, (n, c, full, epoch_samples)).reshape(n, c, full * epoch_samples)
        if n_epochs > full:
            gx[:, :, full * epoch_samples :] = (g[:, :, full] / counts[full])[..., None]
        x.accumulate(gx)

    return _result(out, (x,), backward)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward)


UNKNOWN_LABEL = 5


def masked_cross_entropy(probs: Tensor, labels: np.ndarray, unknown: int = UNKNOWN_LABEL) -> Tensor:
    """Mean ``-log p[label]`` over epochs whose label is not ``unknown``.

    ``probs`` has shape ``(batch, classes, epochs)`` (or ``(classes, epochs)``)
    and ``labels`` the matching ``(batch, epochs)``. The loss is accumulated
    in float64. All-Unknown labels give loss 0 and a zero gradient.
    """
    p = probs.data
    labels = np.asarray(labels)
    squeeze = p.ndim == 2
    if squeeze:
        p = p[None]
        labels = labels[None]
    if labels.shape != (p.shape[0], p.shape[2]):
        raise ValueError(f"labels shape {labels.shape} does not match probabilities {p.shape}")
    valid = labels != unknown
    count = int(valid.sum())
    tiny = np.finfo(np.float64).tiny
    if count:
        bi, ei = np.nonzero(valid)
        picked = p[bi, labels[bi, ei], ei].astype(np.float64)
        loss = float(-np.log(np.maximum(picked, tiny)).sum() / count)
    else:
        loss = 0.0

    def backward(g):
        gp = np.zeros(p.shape, dtype=np.float64)
        if count:
            gp[bi, labels[bi, ei], ei] = -float(g) / (np.maximum(picked, tiny) * count)
        gp = gp.astype(probs.data.dtype)
        probs.accumulate(gp[0] if squeeze else gp)

    return _result(np.asarray(loss, dtype=np.float64), (probs,), backward)
