"""Network assembly: toy encoder, per-variant upsampling, auxiliary heads,
and checkpoint save/load.

The encoder replaces a pretrained backbone at desk scale: 4 blocks of
[conv3x3, relu] x2 + maxpool2 with widths 16-32-64-64, total downsampling
x16, so a 128px canvas yields an 8x8 coarse map.  The last block's convs
can be dilated to enlarge the receptive field without extra parameters.

Variants map 1:1 to the ablation rows:
  bilinear-fixed                      fixed separable bilinear upsampling
  tconv-learned                       learned strided transposed conv (bilinear init)
  global-deconv                       learnable global interpolation matrices
  global-deconv+label-loss            + multi-label presence head
  global-deconv+label-loss+sppfc      + pyramid-pooled FC refinement branch
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .layers import ConvLayer, MaxPool2, Param, ReLU, TransposedConvLayer
from .heads import LabelHead, SPPHead
from .tensor import ShapeError
from .upsample import GlobalDeconv, SubsetView, bilinear_matrix

VARIANTS = (
    "bilinear-fixed",
    "tconv-learned",
    "global-deconv",
    "global-deconv+label-loss",
    "global-deconv+label-loss+sppfc",
)

ENCODER_DOWNSCALE = 16
_ENCODER_WIDTHS = ((3, 16), (16, 16), (16, 32), (32, 32),
                   (32, 64), (64, 64), (64, 64), (64, 64))


def coarse_hw(h: int, w: int) -> tuple[int, int]:
    for _ in range(4):
        h, w = MaxPool2.out_hw(h, w)
    return h, w


class Encoder:
    out_channels = 64

    def __init__(self, rng: np.random.Generator, dilation: int = 1, dtype=np.float64):
        self.layers = []
        for blk in range(4):
            d = dilation if blk == 3 else 1
            for j in range(2):
                in_c, out_c = _ENCODER_WIDTHS[blk * 2 + j]
                self.layers.append(ConvLayer(in_c, out_c, 3, pad=d, dilation=d, rng=rng,
                                             name=f"encoder.b{blk + 1}.conv{j + 1}",
                                             dtype=dtype))
                self.layers.append(ReLU())
            self.layers.append(MaxPool2())

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class FixedBilinear:
    """Constant separable bilinear upsampling expressed as matrix products so
    the training loop gets an exact adjoint; nothing here is learned."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self._cache = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
        h, w = x.shape[2], x.shape[3]
        bh = bilinear_matrix(target_hw[0], h, dtype=self.dtype)
        bw = bilinear_matrix(target_hw[1], w, dtype=self.dtype)
        self._cache = (bh, bw)
        return (bh @ x) @ bw.T

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        bh, bw = self._cache
        return bh.T @ (grad_y @ bw)


@dataclass
class ForwardState:
    up_logits: np.ndarray
    coarse_logits: np.ndarray
    coarse_feats: np.ndarray
    label_scores: np.ndarray | None
    coarse_size: tuple[int, int]


class SegModel:
    def __init__(self, variant: str, num_classes: int, canvas: int = 128,
                 seed: int = 0, init: str = "glorot", activation: str = "none",
                 encoder_dilation: int = 1, spp_levels=(1, 2, 3, 4, 5),
                 dtype=np.float64):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        if init not in ("glorot", "bilinear"):
            raise ValueError(f"unknown init {init!r}")
        self._ctor = dict(variant=variant, num_classes=num_classes, canvas=canvas,
                          seed=seed, init=init, activation=activation,
                          encoder_dilation=encoder_dilation, spp_levels=spp_levels,
                          dtype=dtype)
        self.variant = variant
        self.num_classes = num_classes
        self.canvas = canvas
        self.dtype = dtype
        self.train_coarse = coarse_hw(canvas, canvas)

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xD0])))
        self.encoder = Encoder(rng, dilation=encoder_dilation, dtype=dtype)
        k = num_classes + 1
        self.classifier = ConvLayer(Encoder.out_channels, k, 1, rng=rng,
                                    name="classifier", dtype=dtype)

        self.gd: GlobalDeconv | None = None
        self.tconv: TransposedConvLayer | None = None
        self.fixed: FixedBilinear | None = None
        if variant == "bilinear-fixed":
            self.fixed = FixedBilinear(dtype=dtype)
        elif variant == "tconv-learned":
            self.tconv = TransposedConvLayer(k, k, 2 * ENCODER_DOWNSCALE, ENCODER_DOWNSCALE,
                                             name="upsample", dtype=dtype)
            self.tconv.init_bilinear()
        else:
            self.gd = GlobalDeconv((canvas, canvas), self.train_coarse,
                                   activation=activation, dtype=dtype, name="upsample")
            if init == "bilinear":
                self.gd.init_bilinear()
            else:
                self.gd.init_glorot(rng)

        self.label_head: LabelHead | None = None
        self.spp_head: SPPHead | None = None
        if "label-loss" in variant:
            self.label_head = LabelHead(Encoder.out_channels, num_classes, rng=rng,
                                        dtype=dtype)
        if "sppfc" in variant:
            self.spp_head = SPPHead(k, self.train_coarse, levels=tuple(spp_levels),
                                    rng=rng, dtype=dtype)

    # -- parameters ---------------------------------------------------------

    def params(self) -> list[Param]:
        out = self.encoder.params() + self.classifier.params()
        for part in (self.gd, self.tconv, self.label_head, self.spp_head):
            if part is not None:
                out.extend(part.params())
        return out

    def clone_sharing_params(self) -> "SegModel":
        """A structural copy whose parameters alias this model's storage but
        whose forward caches are private, so clones can run concurrently."""
        dup = SegModel(**self._ctor)
        for mine, theirs in zip(dup.params(), self.params()):
            mine.data = theirs.data
        return dup

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, target_hw: tuple[int, int] | None = None,
                force_subset: bool = False) -> ForwardState:
        n, c, h, w = x.shape
        if h > self.canvas or w > self.canvas:
            raise ShapeError(
                f"input {h}x{w} exceeds the trained maximum {self.canvas}x{self.canvas}")
        if target_hw is None:
            target_hw = (h, w)
        feats = self.encoder.forward(x)
        ch, cw = feats.shape[2], feats.shape[3]
        logits = self.classifier.forward(feats)

        self._spp_sub = None
        if self.spp_head is not None:
            refine = self.spp_head.forward(logits)
            self._spp_sub = (ch, cw)
            logits = logits + refine[:, :, :ch, :cw]

        if self.fixed is not None:
            up = self.fixed.forward(logits, target_hw)
        elif self.tconv is not None:
            up = self.tconv.forward(logits, target_hw)
        else:
            full = (target_hw == self.gd.out_hw and (ch, cw) == self.gd.in_hw)
            self._gd_view = None if (full and not force_subset) else \
                SubsetView(target_hw, (ch, cw))
            up = self.gd.forward(logits, self._gd_view)

        scores = None
        if self.label_head is not None:
            pooled = feats.mean(axis=(2, 3))
            scores = self.label_head.forward(pooled)
        return ForwardState(up, logits, feats, scores, (ch, cw))

    def backward(self, grad_up: np.ndarray, grad_scores: np.ndarray | None = None) -> None:
        if self.fixed is not None:
            g_logits = self.fixed.backward(grad_up)
        elif self.tconv is not None:
            g_logits = self.tconv.backward(grad_up)
        else:
            g_logits = self.gd.backward(grad_up)

        if self.spp_head is not None:
            ch, cw = self._spp_sub
            g_refine = np.zeros((g_logits.shape[0], self.num_classes + 1,
                                 *self.train_coarse), dtype=g_logits.dtype)
            g_refine[:, :, :ch, :cw] = g_logits
            g_logits = g_logits + self.spp_head.backward(g_refine)

        g_feats = self.classifier.backward(g_logits)
        if self.label_head is not None and grad_scores is not None:
            g_pooled = self.label_head.backward(grad_scores)
            ch, cw = g_feats.shape[2], g_feats.shape[3]
            g_feats = g_feats + g_pooled[:, :, None, None] / (ch * cw)
        self.encoder.backward(g_feats)

    def predict_probs(self, x: np.ndarray, target_hw: tuple[int, int] | None = None,
                      force_subset: bool = False) -> np.ndarray:
        from .heads import softmax_pixelwise
        state = self.forward(x, target_hw, force_subset=force_subset)
        return softmax_pixelwise(state.up_logits)


def predict_mask(probs: np.ndarray) -> np.ndarray:
    """Argmax class map; ties break toward the lower class index."""
    return probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: concatenated GDT1 records plus a text manifest of layer names,
# true parameter shapes, and byte offsets into the binary file.

CKPT_BIN = "params.bin"
CKPT_MANIFEST = "params.manifest"
CKPT_CONFIG = "run.config"


def _as_record(a: np.ndarray) -> np.ndarray:
    if a.ndim == 4:
        return a
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 1:
        return a[None, None, None]
    raise ShapeError(f"cannot serialize parameter of rank {a.ndim}")


def save_checkpoint(ckpt_dir, model: SegModel, config_text: str = "") -> None:
    os.makedirs(ckpt_dir, exist_ok=True)
    lines = []
    offset = 0
    with open(os.path.join(ckpt_dir, CKPT_BIN), "wb") as f:
        for p in model.params():
            shape = ",".join(str(d) for d in p.data.shape)
            lines.append(f"{p.name}\t{shape}\t{offset}")
            offset += tensor.write_gdt1(f, _as_record(p.data.astype(np.float64)))
    with open(os.path.join(ckpt_dir, CKPT_MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")
    if config_text:
        with open(os.path.join(ckpt_dir, CKPT_CONFIG), "w") as f:
            f.write(config_text)


def load_checkpoint(ckpt_dir, model: SegModel) -> None:
    manifest_path = os.path.join(ckpt_dir, CKPT_MANIFEST)
    entries: dict[str, tuple[tuple[int, ...], int]] = {}
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, shape_s, offset_s = line.split("\t")
            entries[name] = (tuple(int(v) for v in shape_s.split(",")), int(offset_s))
    with open(os.path.join(ckpt_dir, CKPT_BIN), "rb") as f:
        for p in model.params():
            if p.name not in entries:
                raise ShapeError(f"checkpoint/config mismatch: missing parameter {p.name}")
            shape, offset = entries[p.name]
            if shape != p.data.shape:
                raise ShapeError(f"checkpoint/config mismatch: {p.name} has shape "
                                 f"{shape}, model expects {p.data.shape}")
            f.seek(offset)
            rec = tensor.read_gdt1(f)
            p.data[...] = rec.reshape(shape).astype(model.dtype)


def checkpoint_config_text(ckpt_dir) -> str:
    with open(os.path.join(ckpt_dir, CKPT_CONFIG)) as f:
        return f.read()
