"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors record their parents and a backward closure; backward() runs the
closures in reverse topological order. Only the operations the quality
predictor needs are provided: stride-2 'same' convolution, swish, frozen
running-statistics channel normalization, global average pooling, dense
layers, concatenation, and a summed squared error.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    out = Tensor(x.data @ w.data + b.data, parents=(x, w, b))

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
    out._backward = backward
    out.requires_grad = _needs(x, w, b)
    return out


def _windows(padded: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """x: (N, C, H, W); w: (O, C, k, k); 'same'-style zero padding."""
    n, c, h, wd = x.data.shape
    o, c2, k, _ = w.data.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _windows(xp, k, stride)  # (N, C, Ho, Wo, k, k)
    out_data = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N,Ho,Wo,O)
    out_data = out_data.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = Tensor(out_data, parents=(x, w, b))

    def backward(g):  # g: (N, O, Ho, Wo)
        if w.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O,C,k,k)
            w._accumulate(dw)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            ho, wo = g.shape[2], g.shape[3]
            gz = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
            gz[:, :, ::stride, ::stride] = g
            gzp = np.pad(gz, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            win2 = np.lib.stride_tricks.sliding_window_view(gzp, (k, k), axis=(2, 3))
            wflip = w.data[:, :, ::-1, ::-1]
            dsub = np.tensordot(win2, wflip, axes=([1, 4, 5], [0, 2, 3]))  # (N,Hs,Ws,C)
            dsub = dsub.transpose(0, 3, 1, 2)
            dxp = np.zeros_like(xp)
            dxp[:, :, :dsub.shape[2], :dsub.shape[3]] = dsub
            x._accumulate(dxp[:, :, pad:pad + h, pad:pad + wd])
    out._backward = backward
    out.requires_grad = _needs(x, w, b)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: Tensor) -> Tensor:
    sig = _sigmoid(x.data)
    out = Tensor(x.data * sig, parents=(x,))

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))
    out._backward = backward
    out.requires_grad = _needs(x)
    return out


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                 mean: np.ndarray, var: np.ndarray, eps: float = 1e-3) -> Tensor:
    """Per-channel normalization with externally managed running statistics.

    The statistics are constants of the graph; only gamma/beta receive
    gradients (and only when marked trainable).
    """
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * inv)[None, :, None, None]
    shift = (beta.data - gamma.data * mean * inv)[None, :, None, None]
    out = Tensor(x.data * scale + shift, parents=(x, gamma, beta))
    xhat = None
    if gamma.requires_grad:
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(g * scale)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
    out._backward = backward
    out.requires_grad = _needs(x, gamma, beta)
    return out


def gap(x: Tensor) -> Tensor:
    """Global average pooling: (N, C, H, W) -> (N, C)."""
    n, c, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)), parents=(x,))

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))
    out._backward = backward
    out.requires_grad = _needs(x)
    return out


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad or t._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + size)
                t._accumulate(g[tuple(sl)])
            start += size
    out._backward = backward
    out.requires_grad = _needs(*tensors)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(g)
    out._backward = backward
    out.requires_grad = _needs(a, b)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c, parents=(x,))

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(g * c)
    out._backward = backward
    out.requires_grad = _needs(x)
    return out


def squared_error_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Scalar sum of squared errors against a constant target vector."""
    diff = pred.data - target
    out = Tensor(np.array((diff * diff).sum()), parents=(pred,))

    def backward(g):
        if pred.requires_grad or pred._parents:
            pred._accumulate(2.0 * diff * g)
    out._backward = backward
    out.requires_grad = _needs(pred)
    return out
