"""Learnable global interpolation: per channel, y = K_h x K_w^T.

Two matrices, K_h (H_max x h) and K_w (W_max x w), map every coarse feature
map to full resolution as a whole-image separable linear operator.  Smaller
test inputs reuse the trained matrices by taking their top-left blocks (no
re-normalization).  Also here: the fixed bilinear resampler used as the
non-learnable baseline, and the Glorot / bilinear initializers.

The input gradient is K_h^T (dL/dy) K_w, the adjoint of the forward map; the
parameter gradients are dL/dK_h = (dL/dy) K_w x^T and
dL/dK_w = (dL/dy)^T K_h x, reduced over batch items and channels in fixed
(batch-major, then channel) order since the matrices are shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Param
from .tensor import DEFAULT_DTYPE, ShapeError


@dataclass(frozen=True)
class SubsetView:
    """Run the upsampler on the top-left blocks of K_h / K_w.

    target: output spatial size (H_hat, W_hat); source: coarse input spatial
    size (h_hat, w_hat).  Both must fit inside the stored matrix extents.
    """

    target: tuple[int, int]
    source: tuple[int, int]


class GlobalDeconv:
    """Separable whole-image upsampling with learnable matrices."""

    def __init__(self, out_hw: tuple[int, int], in_hw: tuple[int, int],
                 activation: str = "none", dtype=DEFAULT_DTYPE, name: str = "upsample"):
        H, W = out_hw
        h, w = in_hw
        if H < h or W < w:
            raise ShapeError(f"upsampling only: output {out_hw} must cover input {in_hw}")
        if activation not in ("none", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.out_hw = (H, W)
        self.in_hw = (h, w)
        self.activation = activation
        self.k_h = Param(f"{name}.k_h", np.zeros((H, h), dtype=dtype))
        self.k_w = Param(f"{name}.k_w", np.zeros((W, w), dtype=dtype))
        self._cache = None

    def params(self) -> list[Param]:
        return [self.k_h, self.k_w]

    def init_glorot(self, rng: np.random.Generator) -> None:
        for p in (self.k_h, self.k_w):
            rows, cols = p.data.shape
            limit = np.sqrt(6.0 / (rows + cols))
            p.data[...] = rng.uniform(-limit, limit, size=p.data.shape)

    def init_bilinear(self) -> None:
        self.k_h.data[...] = bilinear_matrix(*self.k_h.data.shape, dtype=self.k_h.data.dtype)
        self.k_w.data[...] = bilinear_matrix(*self.k_w.data.shape, dtype=self.k_w.data.dtype)

    def _blocks(self, view: SubsetView | None) -> tuple[np.ndarray, np.ndarray]:
        if view is None:
            return self.k_h.data, self.k_w.data
        (th, tw), (sh, sw) = view.target, view.source
        H, h = self.k_h.data.shape
        W, w = self.k_w.data.shape
        if not (1 <= th <= H and 1 <= tw <= W and 1 <= sh <= h and 1 <= sw <= w):
            raise ShapeError(
                f"subset view target={view.target} source={view.source} exceeds "
                f"stored extents K_h {self.k_h.data.shape}, K_w {self.k_w.data.shape}")
        return self.k_h.data[:th, :sh], self.k_w.data[:tw, :sw]

    def forward(self, x: np.ndarray, view: SubsetView | None = None) -> np.ndarray:
        kh, kw = self._blocks(view)
        if x.ndim != 4:
            raise ShapeError(f"expected 4-D input, got shape {x.shape}")
        if x.shape[2] != kh.shape[1] or x.shape[3] != kw.shape[1]:
            raise ShapeError(
                f"input spatial {x.shape[2:]} does not match matrix columns "
                f"({kh.shape[1]}, {kw.shape[1]})")
        y = (kh @ x) @ kw.T
        pre = y
        if self.activation == "relu":
            y = np.where(pre > 0, pre, 0.0)
        self._cache = (x, view, pre if self.activation == "relu" else None)
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, view, pre = self._cache
        kh, kw = self._blocks(view)
        n, c = x.shape[0], x.shape[1]
        expect = (n, c, kh.shape[0], kw.shape[0])
        if grad_y.shape != expect:
            raise ShapeError(f"grad shape {grad_y.shape} != forward output {expect}")
        if pre is not None:
            grad_y = np.where(pre > 0, grad_y, 0.0)
        gx = kh.T @ (grad_y @ kw)
        u = kh @ x                                     # (n, c, th, sw)
        gkh = np.einsum("ncHw,nchw->Hh", grad_y @ kw, x)
        gkw = np.einsum("ncHW,ncHw->Ww", grad_y, u)
        if view is None:
            self.k_h.grad += gkh
            self.k_w.grad += gkw
        else:
            (th, tw), (sh, sw) = view.target, view.source
            self.k_h.grad[:th, :sh] += gkh
            self.k_w.grad[:tw, :sw] += gkw
        return gx


def bilinear_matrix(target: int, source: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """(target x source) matrix of 1-D align-corners bilinear weights."""
    m = np.zeros((target, source), dtype=dtype)
    if source == 1 or target == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(target) * (source - 1) / (target - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, source - 1)
    frac = pos - lo
    rows = np.arange(target)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_fixed(x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Non-learnable separable bilinear upsampling (align-corners).

    Implemented by direct gather-and-lerp along each axis, independently of
    the matrix formulation above, so the two can cross-check each other.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    H, W = target_hw
    if H < h or W < w:
        raise ShapeError(f"bilinear_fixed only upsamples: {h}x{w} -> {target_hw}")

    def axis_coords(t: int, s: int):
        if t == 1 or s == 1:
            pos = np.zeros(t)
        else:
            pos = np.arange(t) * (s - 1) / (t - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, s - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_coords(H, h)
    x0, x1, fx = axis_coords(W, w)
    rows = x[:, :, y0, :] * (1.0 - fy)[None, None, :, None] + x[:, :, y1, :] * fy[None, None, :, None]
    out = rows[:, :, :, x0] * (1.0 - fx) + rows[:, :, :, x1] * fx
    return out
