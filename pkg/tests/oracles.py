"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops, direct
formulas) and stays independent of the library code paths it checks.
"""

import numpy as np


def matmul_loops(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv2d_loops(x, weight, bias, stride=1, pad=0, dilation=1):
    """Direct sliding-window cross-correlation."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    oh = (h + 2 * pad - eff_h) // stride + 1
    ow = (w + 2 * pad - eff_w) // stride + 1
    y = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (xp[b, c, i * stride + ki * dilation,
                                             j * stride + kj * dilation]
                                        * weight[o, c, ki, kj])
                    y[b, o, i, j] = acc + bias[o]
    return y


def global_interp_loops(k_h, k_w, x):
    """Four-loop summation y[i][j] = sum_pq K_h[i][p] * x[p][q] * K_w[j][q]."""
    n, c, h, w = x.shape
    H, W = k_h.shape[0], k_w.shape[0]
    y = np.zeros((n, c, H, W))
    for b in range(n):
        for ch in range(c):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for p in range(h):
                        for q in range(w):
                            acc += k_h[i, p] * x[b, ch, p, q] * k_w[j, q]
                    y[b, ch, i, j] = acc
    return y


def bilinear_point(img, fy, fx):
    """Align-corners bilinear sample of a 2-D map at fractional coordinates."""
    h, w = img.shape
    y0, x0 = int(np.floor(fy)), int(np.floor(fx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = fy - y0, fx - x0
    top = img[y0, x0] * (1 - dx) + img[y0, x1] * dx
    bot = img[y1, x0] * (1 - dx) + img[y1, x1] * dx
    return top * (1 - dy) + bot * dy


def bilinear_resample_loops(x, target_hw):
    """Per-output-pixel align-corners bilinear upsampling."""
    n, c, h, w = x.shape
    H, W = target_hw
    y = np.zeros((n, c, H, W))
    for b in range(n):
        for ch in range(c):
            for i in range(H):
                for j in range(W):
                    fy = 0.0 if H == 1 or h == 1 else i * (h - 1) / (H - 1)
                    fx = 0.0 if W == 1 or w == 1 else j * (w - 1) / (W - 1)
                    y[b, ch, i, j] = bilinear_point(x[b, ch], fy, fx)
    return y


def iou_sets(pred, gt, num_classes):
    """Per-class IoU by per-pixel set intersection; NaN when class is absent
    from both maps.  Pixels with gt == 255 are ignored."""
    keep = gt != 255
    ious = []
    for c in range(num_classes):
        p = (pred == c) & keep
        g = (gt == c) & keep
        union = np.logical_or(p, g).sum()
        if union == 0:
            ious.append(np.nan)
        else:
            ious.append(np.logical_and(p, g).sum() / union)
    return np.array(ious)


def mean_iou_sets(pred, gt, num_classes):
    ious = iou_sets(pred, gt, num_classes)
    return np.nanmean(ious)


def spp_cells_loops(x, levels):
    """Max over near-equal grid cells, concatenated (level, channel, cell)."""
    n, c, h, w = x.shape
    out = []
    for b in range(n):
        vec = []
        for lvl in levels:
            for ch in range(c):
                for i in range(lvl):
                    for j in range(lvl):
                        y0, y1 = h * i // lvl, h * (i + 1) // lvl
                        x0, x1 = w * j // lvl, w * (j + 1) // lvl
                        vec.append(x[b, ch, y0:y1, x0:x1].max())
        out.append(vec)
    return np.array(out)


def sgd_scalar(theta0, grad_fn, lr, momentum, weight_decay, steps):
    """Scalar reference of the velocity update: v <- mu v - lr (g + wd t)."""
    theta, v = theta0, 0.0
    trace = [theta]
    for _ in range(steps):
        g = grad_fn(theta)
        v = momentum * v - lr * (g + weight_decay * theta)
        theta = theta + v
        trace.append(theta)
    return np.array(trace)
