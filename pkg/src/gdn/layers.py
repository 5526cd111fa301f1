"""Encoder building blocks: conv (with dilation), ReLU, 2x2 max-pool,
fully-connected, and the transposed-convolution upsampling baseline.

Every layer exposes ``forward`` and a hand-derived ``backward``; parameter
gradients accumulate into ``Param.grad`` buffers so a batch can be split into
several backward calls.  Convolution runs through an im2col GEMM; the naive
sliding-window definition lives in the test suite as the independent oracle.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, ShapeError


class Param:
    """A learnable array plus its gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name}, shape={self.data.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ConvLayer:
    """2-D cross-correlation with stride, zero padding and dilation.

    Weights are (out_c, in_c, k, k); kernels are odd-sized in this artifact.
    """

    def __init__(self, in_c: int, out_c: int, ksize: int, stride: int = 1,
                 pad: int = 0, dilation: int = 1, rng: np.random.Generator | None = None,
                 name: str = "conv", dtype=DEFAULT_DTYPE):
        if ksize % 2 == 0:
            raise ValueError(f"conv kernels must be odd-sized, got {ksize}")
        if dilation < 1 or stride < 1 or pad < 0:
            raise ValueError("stride/dilation must be >= 1 and pad >= 0")
        self.in_c, self.out_c = in_c, out_c
        self.ksize, self.stride, self.pad, self.dilation = ksize, stride, pad, dilation
        fan = in_c * ksize * ksize, out_c * ksize * ksize
        if rng is None:
            w = np.zeros((out_c, in_c, ksize, ksize), dtype=dtype)
        else:
            w = glorot_uniform(rng, (out_c, in_c, ksize, ksize), *fan, dtype=dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_c, dtype=dtype))
        self._cache = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        eff = (self.ksize - 1) * self.dilation + 1
        oh = (h + 2 * self.pad - eff) // self.stride + 1
        ow = (w + 2 * self.pad - eff) // self.stride + 1
        return oh, ow

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_c:
            raise ShapeError(f"conv expects {self.in_c} input channels, got {c}")
        k, s, p, d = self.ksize, self.stride, self.pad, self.dilation
        eff = (k - 1) * d + 1
        if h + 2 * p < eff or w + 2 * p < eff:
            raise ShapeError(
                f"effective kernel {eff}x{eff} exceeds padded input {h + 2 * p}x{w + 2 * p}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        oh, ow = self.out_hw(h, w)
        # im2col via one block copy per kernel tap; layout keeps (oh, ow)
        # contiguous so the GEMMs below see well-shaped operands
        cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = xp[:, :, ki * d: ki * d + (oh - 1) * s + 1: s,
                                        kj * d: kj * d + (ow - 1) * s + 1: s]
        cols = cols.reshape(n, c * k * k, oh * ow)
        wmat = self.weight.data.reshape(self.out_c, -1)
        y = np.matmul(wmat[None], cols).reshape(n, self.out_c, oh, ow)
        y += self.bias.data[None, :, None, None]
        self._cache = (x.shape, xp.shape, cols, oh, ow)
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x_shape, xp_shape, cols, oh, ow = self._cache
        n, c, h, w = x_shape
        if grad_y.shape != (n, self.out_c, oh, ow):
            raise ShapeError(
                f"grad_y shape {grad_y.shape} != forward output {(n, self.out_c, oh, ow)}")
        k, s, p, d = self.ksize, self.stride, self.pad, self.dilation
        g = grad_y.reshape(n, self.out_c, oh * ow)
        self.weight.grad += np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.weight.data.shape)
        self.bias.grad += grad_y.sum(axis=(0, 2, 3))
        wmat = self.weight.data.reshape(self.out_c, -1)
        gcols = np.matmul(wmat.T[None], g).reshape(n, c, k, k, oh, ow)
        gxp = np.zeros(xp_shape, dtype=grad_y.dtype)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki * d: ki * d + (oh - 1) * s + 1: s,
                    kj * d: kj * d + (ow - 1) * s + 1: s] += gcols[:, :, ki, kj]
        return gxp[:, :, p: p + h, p: p + w] if p else gxp


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward called before forward")
        if grad_y.shape != self._mask.shape:
            raise ShapeError(f"grad shape {grad_y.shape} != input {self._mask.shape}")
        return np.where(self._mask, grad_y, 0.0)


class MaxPool2:
    """2x2 max pooling with stride 2.

    Odd trailing rows/columns are replicate-padded first; within a window,
    ties route the whole gradient to the lowest flat index, which keeps the
    backward pass deterministic across platforms.
    """

    def __init__(self):
        self._cache = None

    def params(self) -> list[Param]:
        return []

    @staticmethod
    def out_hw(h: int, w: int) -> tuple[int, int]:
        return (h + 1) // 2, (w + 1) // 2

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        ph, pw = h % 2, w % 2
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if ph or pw else x
        hp, wp = xp.shape[2], xp.shape[3]
        oh, ow = hp // 2, wp // 2
        # window candidates ordered by flat index: (0,0), (0,1), (1,0), (1,1)
        win = xp.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = ((n, c, h, w), (hp, wp), idx)
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        (n, c, h, w), (hp, wp), idx = self._cache
        oh, ow = hp // 2, wp // 2
        if grad_y.shape != (n, c, oh, ow):
            raise ShapeError(f"grad shape {grad_y.shape} != pooled output {(n, c, oh, ow)}")
        gwin = np.zeros((n, c, oh, ow, 4), dtype=grad_y.dtype)
        np.put_along_axis(gwin, idx[..., None], grad_y[..., None], axis=-1)
        gxp = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        gx = gxp[:, :, :h, :w].copy()
        if hp > h:
            gx[:, :, h - 1, :] += gxp[:, :, h, :w]
        if wp > w:
            gx[:, :, :, w - 1] += gxp[:, :, :h, w]
        if hp > h and wp > w:
            gx[:, :, h - 1, w - 1] += gxp[:, :, h, w]
        return gx


class FCLayer:
    """Affine map on batched row vectors: y = x W^T + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 name: str = "fc", dtype=DEFAULT_DTYPE, zero_init: bool = False):
        self.in_dim, self.out_dim = in_dim, out_dim
        if rng is None or zero_init:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype=dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"fc expects (n, {self.in_dim}) input, got {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        if grad_y.shape != (self._x.shape[0], self.out_dim):
            raise ShapeError(f"grad shape {grad_y.shape} does not match fc output")
        self.weight.grad += grad_y.T @ self._x
        self.bias.grad += grad_y.sum(axis=0)
        return grad_y @ self.weight.data


def bilinear_kernel_1d(ksize: int, stride: int) -> np.ndarray:
    """1-D weights of the classic bilinear upsampling kernel for a strided
    transposed convolution (partition of unity in the interior)."""
    factor = (ksize + 1) // 2
    center = factor - 1 if ksize % 2 == 1 else factor - 0.5
    return 1.0 - np.abs(np.arange(ksize) - center) / factor


class TransposedConvLayer:
    """Strided transposed convolution ("backwards convolution") followed by a
    symmetric center crop to the requested output size; the extra pixel of an
    odd crop goes to the bottom/right."""

    def __init__(self, in_c: int, out_c: int, ksize: int, stride: int,
                 rng: np.random.Generator | None = None, name: str = "tconv",
                 dtype=DEFAULT_DTYPE):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.in_c, self.out_c, self.ksize, self.stride = in_c, out_c, ksize, stride
        if rng is None:
            w = np.zeros((in_c, out_c, ksize, ksize), dtype=dtype)
        else:
            fan = in_c * ksize * ksize, out_c * ksize * ksize
            w = glorot_uniform(rng, (in_c, out_c, ksize, ksize), *fan, dtype=dtype)
        self.weight = Param(f"{name}.weight", w)
        self._cache = None

    def params(self) -> list[Param]:
        return [self.weight]

    def init_bilinear(self) -> None:
        """Per-channel bilinear upsampling weights (requires in_c == out_c)."""
        if self.in_c != self.out_c:
            raise ShapeError("bilinear init needs matching channel counts")
        w1 = bilinear_kernel_1d(self.ksize, self.stride)
        kern = np.outer(w1, w1)
        self.weight.data[...] = 0.0
        for c in range(self.in_c):
            self.weight.data[c, c] = kern

    def full_hw(self, h: int, w: int) -> tuple[int, int]:
        return (h - 1) * self.stride + self.ksize, (w - 1) * self.stride + self.ksize

    def forward(self, x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_c:
            raise ShapeError(f"tconv expects {self.in_c} input channels, got {c}")
        fh, fw = self.full_hw(h, w)
        th, tw = target_hw
        if th > fh or tw > fw or th < 1 or tw < 1:
            raise ShapeError(f"target {target_hw} not producible from full extent {(fh, fw)}")
        s, k = self.stride, self.ksize
        y = np.zeros((n, self.out_c, fh, fw), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                contrib = np.einsum("ncij,co->noij", x, self.weight.data[:, :, ki, kj])
                y[:, :, ki: ki + (h - 1) * s + 1: s, kj: kj + (w - 1) * s + 1: s] += contrib
        oh = (fh - th) // 2
        ow = (fw - tw) // 2
        self._cache = (x, (fh, fw), (oh, ow), target_hw)
        return y[:, :, oh: oh + th, ow: ow + tw]

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, (fh, fw), (oh, ow), (th, tw) = self._cache
        n, c, h, w = x.shape
        if grad_y.shape != (n, self.out_c, th, tw):
            raise ShapeError(f"grad shape {grad_y.shape} != tconv output {(n, self.out_c, th, tw)}")
        gfull = np.zeros((n, self.out_c, fh, fw), dtype=grad_y.dtype)
        gfull[:, :, oh: oh + th, ow: ow + tw] = grad_y
        s, k = self.stride, self.ksize
        gx = np.zeros_like(x)
        for ki in range(k):
            for kj in range(k):
                gslice = gfull[:, :, ki: ki + (h - 1) * s + 1: s, kj: kj + (w - 1) * s + 1: s]
                gx += np.einsum("noij,co->ncij", gslice, self.weight.data[:, :, ki, kj])
                self.weight.grad[:, :, ki, kj] += np.einsum("ncij,noij->co", x, gslice)
        return gx
