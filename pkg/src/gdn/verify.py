"""Finite-difference verification suites over every differentiable block.

Each suite builds small random instances, computes analytic gradients, and
compares them against central differences.  Inputs to max-based blocks are
shuffled grids with well-separated values so the +-eps probes cannot flip an
argmax.  All suites run in 64-bit.
"""

from __future__ import annotations

import numpy as np

from .heads import (SpatialPyramidPool, label_loss, label_loss_backward,
                    seg_loss, seg_loss_backward, softmax_pixelwise)
from .layers import ConvLayer, FCLayer, MaxPool2, TransposedConvLayer
from .optim import gradcheck
from .upsample import GlobalDeconv


def _separated(rng: np.random.Generator, shape, gap: float = 0.01) -> np.ndarray:
    """Random field whose values are pairwise separated by at least `gap`."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(0, gap / 4)).reshape(shape)


def check_global_deconv(rng: np.random.Generator, instances: int,
                        eps: float, inject_fault: bool = False) -> float:
    worst = 0.0
    for k in range(instances):
        h, w = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        H, W = int(rng.integers(h, 8)), int(rng.integers(w, 8))
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        activation = "relu" if k % 3 == 2 else "none"
        while True:
            gd = GlobalDeconv((H, W), (h, w), activation=activation)
            gd.init_glorot(rng)
            x = rng.standard_normal((n, c, h, w))
            pre = (gd.k_h.data @ x) @ gd.k_w.data.T
            if activation == "none" or np.abs(pre).min() > 1e-3:
                break
        v = rng.standard_normal((n, c, H, W))

        def loss():
            return float((gd.forward(x) * v).sum())

        gd.forward(x)
        gd.k_h.zero_grad()
        gd.k_w.zero_grad()
        gx = gd.backward(v)
        gkh, gkw = gd.k_h.grad.copy(), gd.k_w.grad.copy()
        if inject_fault and k == 0:
            gx = gx * 1.01
        worst = max(worst,
                    gradcheck(loss, x, gx, eps),
                    gradcheck(loss, gd.k_h.data, gkh, eps),
                    gradcheck(loss, gd.k_w.data, gkw, eps))
    return worst


def check_gd_seg_composite(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        h = w = int(rng.integers(2, 4))
        H, W = 2 * h, 2 * w
        n, k = 1, int(rng.integers(2, 5))
        gd = GlobalDeconv((H, W), (h, w))
        gd.init_glorot(rng)
        x = rng.standard_normal((n, k, h, w))
        gt = rng.integers(0, k, size=(n, H, W))

        def loss():
            return seg_loss(softmax_pixelwise(gd.forward(x)), gt)

        probs = softmax_pixelwise(gd.forward(x))
        gd.k_h.zero_grad()
        gd.k_w.zero_grad()
        gx = gd.backward(seg_loss_backward(probs, gt))
        worst = max(worst,
                    gradcheck(loss, x, gx, eps),
                    gradcheck(loss, gd.k_h.data, gd.k_h.grad.copy(), eps),
                    gradcheck(loss, gd.k_w.data, gd.k_w.grad.copy(), eps))
    return worst


def check_conv(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for k in range(instances):
        in_c, out_c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        stride = 1 + (k % 2)
        dilation = 1 + (k % 3 == 1)
        pad = int(rng.integers(0, 2))
        size = int(rng.integers(4 + 2 * dilation, 7 + 2 * dilation))
        layer = ConvLayer(in_c, out_c, 3, stride=stride, pad=pad, dilation=dilation, rng=rng)
        x = rng.standard_normal((1, in_c, size, size))
        v = rng.standard_normal((1, out_c, *layer.out_hw(size, size)))

        def loss():
            return float((layer.forward(x) * v).sum())

        layer.forward(x)
        layer.weight.zero_grad()
        layer.bias.zero_grad()
        gx = layer.backward(v)
        worst = max(worst,
                    gradcheck(loss, x, gx, eps),
                    gradcheck(loss, layer.weight.data, layer.weight.grad.copy(), eps),
                    gradcheck(loss, layer.bias.data, layer.bias.grad.copy(), eps))
    return worst


def check_tconv(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        in_c, out_c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        stride, ksize = 2, 4
        size = int(rng.integers(2, 4))
        fh = (size - 1) * stride + ksize
        th = int(rng.integers(size * stride, fh + 1))
        layer = TransposedConvLayer(in_c, out_c, ksize, stride, rng=rng)
        x = rng.standard_normal((1, in_c, size, size))
        v = rng.standard_normal((1, out_c, th, th))

        def loss():
            return float((layer.forward(x, (th, th)) * v).sum())

        layer.forward(x, (th, th))
        layer.weight.zero_grad()
        gx = layer.backward(v)
        worst = max(worst,
                    gradcheck(loss, x, gx, eps),
                    gradcheck(loss, layer.weight.data, layer.weight.grad.copy(), eps))
    return worst


def check_fc(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        n, din, dout = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
        layer = FCLayer(din, dout, rng=rng)
        x = rng.standard_normal((n, din))
        v = rng.standard_normal((n, dout))

        def loss():
            return float((layer.forward(x) * v).sum())

        layer.forward(x)
        layer.weight.zero_grad()
        layer.bias.zero_grad()
        gx = layer.backward(v)
        worst = max(worst,
                    gradcheck(loss, x, gx, eps),
                    gradcheck(loss, layer.weight.data, layer.weight.grad.copy(), eps),
                    gradcheck(loss, layer.bias.data, layer.bias.grad.copy(), eps))
    return worst


def check_maxpool(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for k in range(instances):
        size = int(rng.integers(3, 7))  # odd sizes exercise replicate padding
        pool = MaxPool2()
        x = _separated(rng, (1, int(rng.integers(1, 3)), size, size))
        oh, ow = MaxPool2.out_hw(size, size)
        v = rng.standard_normal((1, x.shape[1], oh, ow))

        def loss():
            return float((pool.forward(x) * v).sum())

        pool.forward(x)
        gx = pool.backward(v)
        worst = max(worst, gradcheck(loss, x, gx, eps))
    return worst


def check_seg_loss(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        n, k, h, w = 1, int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        logits = rng.standard_normal((n, k, h, w))
        gt = rng.integers(0, k, size=(n, h, w))

        def loss():
            return seg_loss(softmax_pixelwise(logits), gt)

        g = seg_loss_backward(softmax_pixelwise(logits), gt)
        worst = max(worst, gradcheck(loss, logits, g, eps))
    return worst


def check_label_loss(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        c = int(rng.integers(2, 8))
        scores = rng.standard_normal(c)
        presence = rng.integers(0, 2, size=c).astype(np.float64)

        def loss():
            return label_loss(scores, presence)

        g = label_loss_backward(scores, presence)
        worst = max(worst, gradcheck(loss, scores, g, eps))
    return worst


def check_spp(rng: np.random.Generator, instances: int, eps: float) -> float:
    worst = 0.0
    for _ in range(instances):
        levels = (1, 2, 3)
        size = int(rng.integers(3, 7))
        pool = SpatialPyramidPool(levels)
        x = _separated(rng, (1, int(rng.integers(1, 3)), size, size))
        v = rng.standard_normal((1, pool.out_dim(x.shape[1])))

        def loss():
            return float((pool.forward(x) * v).sum())

        pool.forward(x)
        gx = pool.backward(v)
        worst = max(worst, gradcheck(loss, x, gx, eps))
    return worst


SUITES = (
    ("global-deconv", check_global_deconv),
    ("global-deconv+softmax+seg-loss", check_gd_seg_composite),
    ("conv", check_conv),
    ("tconv", check_tconv),
    ("fc", check_fc),
    ("maxpool", check_maxpool),
    ("softmax+seg-loss", check_seg_loss),
    ("sigmoid+label-loss", check_label_loss),
    ("spp", check_spp),
)


def run_suites(seed: int = 0, eps: float = 1e-6, instances: int = 20,
               inject_fault: bool = False) -> list[tuple[str, float]]:
    results = []
    for i, (name, fn) in enumerate(SUITES):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        if fn is check_global_deconv:
            err = fn(rng, instances, eps, inject_fault=inject_fault)
        else:
            err = fn(rng, instances, eps)
        results.append((name, err))
    return results
