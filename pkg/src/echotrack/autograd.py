"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors wrap float64 ndarrays and record the tape needed to backpropagate
exact gradients through the op set used by the networks in this package
(dense/conv stacks, normalizations, ELBO and diffusion losses). Everything is
deterministic: no op introduces randomness or thread-dependent reductions.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added, returning to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Node in the computation tape."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients into every tensor reachable from this one."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"seed gradient shape {grad.shape} != output shape {self.data.shape}"
            )
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
            for p in node._parents:
                stack.append((p, False))
        for node in order:
            node.grad = np.zeros_like(node.data)
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return Tensor(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a.grad += _unbroadcast(g * b.data, a.shape)
        b.grad += _unbroadcast(g * a.data, b.shape)

    return Tensor(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a.grad += s * g

    return Tensor(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return Tensor(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x.grad += g * mask

    return Tensor(np.where(mask, x.data, 0.0), (x,), backward)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x.grad += g * sig * (1.0 + x.data * (1.0 - sig))

    return Tensor(x.data * sig, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        x.grad += g * data

    return Tensor(data, (x,), backward)


def power(x: Tensor, p: float) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x.grad += g * p * x.data ** (p - 1.0)

    return Tensor(x.data**p, (x,), backward)


def square(x: Tensor) -> Tensor:
    return power(x, 2.0)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only through the interior."""
    x = _as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.grad += g * mask

    return Tensor(np.clip(x.data, lo, hi), (x,), backward)


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x.grad += np.broadcast_to(g, x.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x.grad += np.broadcast_to(gg, x.shape)

    return Tensor(data, (x,), backward)


def tmean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p.grad += piece

    return Tensor(data, tuple(parts), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        x.grad += g.reshape(x.shape)

    return Tensor(x.data.reshape(shape), (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (batch, in) @ w (in, out) + b (out,)."""
    return add(matmul(x, w), b)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution with optional stride.

    x: (batch, c_in, length), w: (c_out, c_in, kernel) with odd kernel,
    b: (c_out,). Output (batch, c_out, ceil(length / stride)).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 3 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} vs weight {w.shape}")
    kernel = w.shape[2]
    if kernel % 2 != 1:
        raise DimensionError("conv1d kernel size must be odd for same padding")
    batch, c_in, length = x.shape
    c_out = w.shape[0]
    pad = (kernel - 1) // 2
    out_len = -(-length // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # im2col: strided windows (batch, out_len, c_in * kernel) vs (c_in * kernel, c_out)
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(batch, c_in, out_len, kernel),
        strides=(s0, s1, s2 * stride, s2),
        writeable=False,
    )
    cols_mat = windows.transpose(0, 2, 1, 3).reshape(batch * out_len, c_in * kernel)
    w_mat = w.data.reshape(c_out, c_in * kernel).T
    out = (cols_mat @ w_mat).reshape(batch, out_len, c_out).transpose(0, 2, 1)
    out = out + b.data[None, :, None]

    def backward(g):
        g_mat = g.transpose(0, 2, 1).reshape(batch * out_len, c_out)
        w.grad += (cols_mat.T @ g_mat).T.reshape(c_out, c_in, kernel)
        gcols = (g_mat @ w_mat.T).reshape(batch, out_len, c_in, kernel).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        for k in range(kernel):
            gxp[:, :, k : k + out_len * stride : stride] += gcols[:, :, :, k]
        x.grad += gxp[:, :, pad : pad + length] if pad else gxp
        b.grad += g.sum(axis=(0, 2))

    return Tensor(out, (x, w, b), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(batch, channels, length) -> (batch, channels)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects 3-D input, got {x.shape}")
    length = x.shape[2]

    def backward(g):
        x.grad += np.repeat(g[:, :, None], length, axis=2) / length

    return Tensor(x.data.mean(axis=2), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned affine parameters."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(square(centered), axis=-1, keepdims=True)
    inv_std = power(add(var, Tensor(np.full(var.shape, eps))), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


def sinusoidal_embedding(t: int | np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos positional embedding of (integer) diffusion steps.

    Returns shape (dim,) for a scalar t or (len(t), dim) for a vector.
    Constant with respect to network parameters, so plain ndarray.
    """
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    args = t_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb[0] if np.isscalar(t) or np.ndim(t) == 0 else emb
