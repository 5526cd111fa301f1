"""Loss functions and auxiliary heads.

The segmentation objective is mean pixelwise cross-entropy after a softmax
over class channels (channel 0 is background).  The auxiliary recognition
objective is mean sigmoid cross-entropy on image-level class-presence
vectors, which cover classes 1..C only (background excluded).  The combined
objective is seg + lambda * label; lambda defaults to 1.

Heads: a 3-layer fully-connected presence classifier on globally averaged
coarse features, and a pyramid-pooled fully-connected branch that produces a
fixed-size residual refinement of the coarse score maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import FCLayer, Param, ReLU
from .tensor import ShapeError


@dataclass(frozen=True)
class LossReport:
    seg_loss: float
    label_loss: float
    combined: float
    lambda_label: float


def combined_loss(seg: float, label: float, lambda_label: float) -> LossReport:
    if lambda_label < 0:
        raise ValueError(f"lambda_label must be >= 0, got {lambda_label}")
    return LossReport(float(seg), float(label), float(seg + lambda_label * label),
                      float(lambda_label))


def softmax_pixelwise(logits: np.ndarray) -> np.ndarray:
    """Per-pixel distribution over class channels, stabilized by max-subtraction."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_gt(probs: np.ndarray, gt: np.ndarray) -> None:
    n, k = probs.shape[0], probs.shape[1]
    if gt.shape != (n,) + probs.shape[2:]:
        raise ShapeError(f"ground truth shape {gt.shape} does not match probs {probs.shape}")
    if gt.min() < 0 or gt.max() >= k:
        raise ValueError(f"ground-truth classes must lie in [0, {k - 1}]")


def seg_loss(probs: np.ndarray, gt: np.ndarray) -> float:
    """Mean negative log-probability of the true class over all pixels."""
    _check_gt(probs, gt)
    p_true = np.take_along_axis(probs, gt[:, None].astype(np.int64), axis=1)
    return float(-np.log(np.maximum(p_true, 1e-300)).mean())


def seg_loss_backward(probs: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gradient of seg_loss with respect to the pre-softmax logits."""
    _check_gt(probs, gt)
    n, _, h, w = probs.shape
    grad = probs.copy()
    ni, hi, wi = np.ogrid[:n, :h, :w]
    grad[ni, gt, hi, wi] -= 1.0
    return grad / (n * h * w)


def label_loss(scores: np.ndarray, presence: np.ndarray) -> float:
    """Sigmoid scores, then mean binary cross-entropy against 0/1 presence."""
    if scores.shape != presence.shape:
        raise ShapeError(f"scores {scores.shape} vs presence {presence.shape}")
    p_hat = _sigmoid(scores)
    p = presence.astype(p_hat.dtype)
    eps = 1e-300
    bce = -(p * np.log(np.maximum(p_hat, eps)) + (1 - p) * np.log(np.maximum(1 - p_hat, eps)))
    return float(bce.mean())


def label_loss_backward(scores: np.ndarray, presence: np.ndarray) -> np.ndarray:
    """Gradient of label_loss with respect to the raw scores: (sigmoid(s) - p) / |C|."""
    if scores.shape != presence.shape:
        raise ShapeError(f"scores {scores.shape} vs presence {presence.shape}")
    p_hat = _sigmoid(scores)
    return (p_hat - presence.astype(p_hat.dtype)) / scores.size


def _sigmoid(s: np.ndarray) -> np.ndarray:
    if s.dtype.kind != "f":
        s = s.astype(np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def labels_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Binary presence vector over classes 1..num_classes (background excluded).

    presence[c-1] = 1 iff class c occurs anywhere in the mask; the ignore
    label 255 never counts.
    """
    out = np.zeros(num_classes, dtype=np.float64)
    present = np.unique(mask)
    for c in present:
        if 1 <= c <= num_classes:
            out[c - 1] = 1.0
    return out


# ---------------------------------------------------------------------------
# Spatial pyramid pooling


class SpatialPyramidPool:
    """Max-pooling over a pyramid of n x n grids.

    For level n the map is partitioned into near-equal cells with boundaries
    at floor(i*h/n); output ordering is fixed (level, channel, cell) so the
    vector length c * sum(n^2) is independent of the input spatial size.
    """

    def __init__(self, levels=(1, 2, 3, 4, 5)):
        if not levels or min(levels) < 1:
            raise ValueError("levels must be positive grid sizes")
        self.levels = tuple(levels)
        self._cache = None

    def out_dim(self, channels: int) -> int:
        return channels * sum(n * n for n in self.levels)

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        top = max(self.levels)
        if h < top or w < top:
            raise ShapeError(f"input {h}x{w} smaller than the largest grid {top}x{top}")
        chunks = []
        argmaxes = []
        for lvl in self.levels:
            hb = [h * i // lvl for i in range(lvl + 1)]
            wb = [w * j // lvl for j in range(lvl + 1)]
            vals = np.empty((n, c, lvl * lvl), dtype=x.dtype)
            idxs = np.empty((n, c, lvl * lvl, 2), dtype=np.int64)
            for i in range(lvl):
                for j in range(lvl):
                    cell = x[:, :, hb[i]:hb[i + 1], wb[j]:wb[j + 1]]
                    flat = cell.reshape(n, c, -1)
                    am = flat.argmax(axis=-1)
                    vals[:, :, i * lvl + j] = np.take_along_axis(flat, am[..., None], -1)[..., 0]
                    idxs[:, :, i * lvl + j, 0] = hb[i] + am // cell.shape[3]
                    idxs[:, :, i * lvl + j, 1] = wb[j] + am % cell.shape[3]
            chunks.append(vals.reshape(n, c * lvl * lvl))
            argmaxes.append(idxs)
        self._cache = (x.shape, argmaxes)
        return np.concatenate(chunks, axis=1)

    def backward(self, grad_vec: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        (n, c, h, w), argmaxes = self._cache
        if grad_vec.shape != (n, self.out_dim(c)):
            raise ShapeError(f"grad shape {grad_vec.shape} != pooled output")
        gx = np.zeros((n, c, h, w), dtype=grad_vec.dtype)
        off = 0
        ni, ci = np.ogrid[:n, :c]
        for lvl, idxs in zip(self.levels, argmaxes):
            cells = lvl * lvl
            g = grad_vec[:, off:off + c * cells].reshape(n, c, cells)
            for cell in range(cells):
                np.add.at(gx, (ni, ci, idxs[:, :, cell, 0], idxs[:, :, cell, 1]),
                          g[:, :, cell])
            off += c * cells
        return gx


class SPPHead:
    """Pyramid pooling over the coarse score maps followed by one FC layer
    that emits a residual refinement map at the training coarse size."""

    def __init__(self, channels: int, coarse_hw: tuple[int, int],
                 levels=(1, 2, 3, 4, 5), rng: np.random.Generator | None = None,
                 name: str = "spp_head", dtype=np.float64):
        self.channels = channels
        self.coarse_hw = coarse_hw
        self.pool = SpatialPyramidPool(levels)
        out_dim = channels * coarse_hw[0] * coarse_hw[1]
        self.fc = FCLayer(self.pool.out_dim(channels), out_dim, rng=rng,
                          name=f"{name}.fc", dtype=dtype)

    def params(self) -> list[Param]:
        return self.fc.params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        vec = self.pool.forward(x)
        out = self.fc.forward(vec)
        return out.reshape(n, self.channels, *self.coarse_hw)

    def backward(self, grad_map: np.ndarray) -> np.ndarray:
        g = self.fc.backward(grad_map.reshape(grad_map.shape[0], -1))
        return self.pool.backward(g)


class LabelHead:
    """3-layer fully-connected class-presence classifier on a pooled feature
    vector; output width is the number of classes excluding background."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 64,
                 rng: np.random.Generator | None = None, name: str = "label_head",
                 dtype=np.float64):
        self.fc1 = FCLayer(in_dim, hidden, rng=rng, name=f"{name}.fc1", dtype=dtype)
        self.fc2 = FCLayer(hidden, hidden, rng=rng, name=f"{name}.fc2", dtype=dtype)
        self.fc3 = FCLayer(hidden, num_classes, rng=rng, name=f"{name}.fc3", dtype=dtype)
        self.act1, self.act2 = ReLU(), ReLU()

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params() + self.fc3.params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = self.act1.forward(self.fc1.forward(x))
        z = self.act2.forward(self.fc2.forward(z))
        return self.fc3.forward(z)

    def backward(self, grad_scores: np.ndarray) -> np.ndarray:
        g = self.fc3.backward(grad_scores)
        g = self.fc2.backward(self.act2.backward(g))
        return self.fc1.backward(self.act1.backward(g))
