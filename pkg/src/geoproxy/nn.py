"""Minimal NCHW neural-network kernels with hand-written backprop.

Convolutions run as im2col + BLAS matmuls; the input gradient is computed
as a transposed convolution (dilate, pad, convolve with the spatially
flipped kernel), which reuses the same matmul path instead of a slow
scatter-add. Everything is plain numpy, deterministic given the seed and
thread count.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class Param:
    """A named parameter array with its gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(N, C, H, W) -> (N, C*k*k, L) patch matrix plus output dims."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """Returns (y, cols). x (N,C,H,W), w (F,C,k,k), b (F,)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride)
    w2 = w.reshape(w.shape[0], -1)
    y = np.matmul(w2, cols) + b[:, None]
    return y.reshape(x.shape[0], w.shape[0], ho, wo), cols


class Conv2d:
    def __init__(self, name: str, in_ch: int, out_ch: int, k: int, stride: int,
                 pad: int, rng: np.random.Generator, dtype=np.float32):
        if pad > k - 1:
            raise ValueError("padding larger than kernel-1 is unsupported")
        self.k, self.stride, self.pad = k, stride, pad
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = in_ch * k * k
        self.w = Param(f"{name}.w", he_uniform(rng, (out_ch, in_ch, k, k), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_ch, dtype=dtype))
        self._cols: np.ndarray | None = None
        self._x_shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cols = _conv_forward(x, self.w.value, self.b.value, self.stride, self.pad)
        self._cols = cols
        self._x_shape = x.shape
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, f, ho, wo = dy.shape
        dy2 = dy.reshape(n, f, ho * wo)
        self.b.grad += dy2.sum(axis=(0, 2))
        dw = np.tensordot(dy2, self._cols, axes=([0, 2], [0, 2]))
        self.w.grad += dw.reshape(self.w.value.shape)
        self._cols = None

        _, _, h, w_in = self._x_shape
        k, s, p = self.k, self.stride, self.pad
        if s > 1:
            dyd = np.zeros((n, f, (ho - 1) * s + 1, (wo - 1) * s + 1), dtype=dy.dtype)
            dyd[:, :, ::s, ::s] = dy
        else:
            dyd = dy
        res_h = h + 2 * p - k - s * (ho - 1)
        res_w = w_in + 2 * p - k - s * (wo - 1)
        pp = k - 1 - p
        dyd = np.pad(dyd, ((0, 0), (0, 0), (pp, pp + res_h), (pp, pp + res_w)))
        w_flip = self.w.value.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dx, _ = _conv_forward(dyd, np.ascontiguousarray(w_flip),
                              np.zeros(self.in_ch, dtype=dy.dtype), 1, 0)
        return dx

    def params(self) -> list[Param]:
        return [self.w, self.b]


class Linear:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.w = Param(f"{name}.w", linear_uniform(rng, (out_dim, in_dim), in_dim, dtype))
        self.b = Param(f"{name}.b", linear_uniform(rng, (out_dim,), in_dim, dtype))
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.w.grad += dy.T @ self._x
        self.b.grad += dy.sum(axis=0)
        self._x = None
        return dy @ self.w.value

    def params(self) -> list[Param]:
        return [self.w, self.b]


class ReLU:
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx = dy * self._mask
        self._mask = None
        return dx

    def params(self) -> list[Param]:
        return []


class GlobalAvgPool:
    def __init__(self) -> None:
        self._hw: tuple[int, int] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        h, w = self._hw
        scale = dy.dtype.type(1.0 / (h * w))
        return np.broadcast_to((dy * scale)[:, :, None, None],
                               dy.shape + (h, w)).copy()

    def params(self) -> list[Param]:
        return []


class ResidualBlock:
    """conv3x3 -> relu -> conv3x3, plus a (possibly projected) skip, then relu."""

    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv2d(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, rng, dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, rng, dtype)
        self.proj = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(f"{name}.proj", in_ch, out_ch, 1, stride, 0, rng, dtype)
        self.relu2 = ReLU()

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.conv2.forward(self.relu1.forward(self.conv1.forward(x)))
        skip = self.proj.forward(x) if self.proj is not None else x
        return self.relu2.forward(h + skip)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.relu2.backward(dy)
        dx = self.conv1.backward(self.relu1.backward(self.conv2.backward(d)))
        dx += self.proj.backward(d) if self.proj is not None else d
        return dx

    def params(self) -> list[Param]:
        out = self.conv1.params() + self.conv2.params()
        if self.proj is not None:
            out += self.proj.params()
        return out


class Adam:
    """Standard Adam with bias correction; state keyed by parameter identity."""

    def __init__(self, params: Sequence[Param], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * np.square(g)
            p.value -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0
