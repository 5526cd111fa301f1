"""Synthetic segmentation data: scene generator, PPM/PGM I/O, manifests.

Each class is a (shape kind, fill texture) pair: rectangles, disks and
triangles, each solid or striped.  The two textures of a kind share the same
base colour and instances get per-instance colour jitter plus pixel noise,
so no single pixel gives the class away; classifying solid vs striped needs
local context.  Occlusion is resolved by draw order (later shape wins) and
the presence vector is derived from the final mask.

Images are binary PPM (P6, 8-bit), masks binary PGM (P5, 8-bit, pixel value
= class index, 255 = ignore).  Manifests are line-oriented text with
`classes:`, `seed:` and `mean:` headers followed by
image_path<TAB>mask_path lines, paths relative to the manifest file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import FormatError

CLASS_NAMES = ("background", "rect_solid", "rect_striped", "disk_solid",
               "disk_striped", "tri_solid", "tri_striped")

# base colour per shape kind; texture distinguishes the class pair
_KIND_COLORS = np.array([
    [205, 80, 75],    # rectangles
    [75, 190, 95],    # disks
    [85, 115, 215],   # triangles
], dtype=np.float64)

_BG_COLOR = np.array([45.0, 45.0, 45.0])

# distinct display colours (used for contact sheets / mask visualisation)
PALETTE = np.array([
    [0, 0, 0], [205, 80, 75], [255, 170, 60], [75, 190, 95],
    [60, 220, 220], [85, 115, 215], [200, 90, 220],
], dtype=np.uint8)


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 128
    num_classes: int = 6
    min_shapes: int = 1
    max_shapes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.num_classes <= 6):
            raise ValueError("num_classes must be in [1, 6] (3 kinds x 2 textures)")
        if self.canvas < 32:
            raise ValueError("canvas too small to place shapes")
        if not (1 <= self.min_shapes <= self.max_shapes):
            raise ValueError("need 1 <= min_shapes <= max_shapes")


@dataclass
class DatasetManifest:
    classes: list[str]
    seed: int
    mean: tuple[float, float, float]
    samples: list[tuple[str, str]]     # absolute (image, mask) paths
    path: str = ""


def render_scene(rng: np.random.Generator, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """One (image uint8 HxWx3, mask uint8 HxW) pair."""
    s = spec.canvas
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    img = np.tile(_BG_COLOR, (s, s, 1))
    mask = np.zeros((s, s), dtype=np.uint8)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes + 1))
        kind, striped = (cls - 1) // 2, (cls - 1) % 2
        inside = _draw_shape(rng, kind, s, xx, yy)
        color = _KIND_COLORS[kind] * rng.uniform(0.65, 1.35) * rng.uniform(0.9, 1.1, size=3)
        fill = np.tile(color, (s, s, 1))
        if striped:
            phase = int(rng.integers(0, 8))
            bands = ((np.arange(s) + phase) // 4) % 2
            fill *= np.where(bands, 1.35, 0.60)[:, None, None]
        img[inside] = fill[inside]
        mask[inside] = cls

    img += rng.normal(0.0, 10.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), mask


def _draw_shape(rng: np.random.Generator, kind: int, s: int,
                xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    if kind == 0:                                     # rectangle
        w = int(rng.integers(3 * s // 16, 7 * s // 16 + 1))
        h = int(rng.integers(3 * s // 16, 7 * s // 16 + 1))
        x0 = int(rng.integers(0, s - w + 1))
        y0 = int(rng.integers(0, s - h + 1))
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == 1:                                     # disk
        r = rng.uniform(0.10 * s, 0.22 * s)
        cx = rng.uniform(r, s - r)
        cy = rng.uniform(r, s - r)
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    r = rng.uniform(0.14 * s, 0.28 * s)               # triangle
    cx = rng.uniform(r, s - r)
    cy = rng.uniform(r, s - r)
    angles = np.deg2rad(np.array([90.0, 210.0, 330.0]) + rng.uniform(0, 120)
                        + rng.uniform(-20, 20, size=3))
    vx = cx + r * np.cos(angles)
    vy = cy + r * np.sin(angles)
    sides = []
    for i in range(3):
        j = (i + 1) % 3
        sides.append((xx - vx[i]) * (vy[j] - vy[i]) - (yy - vy[i]) * (vx[j] - vx[i]))
    sides = np.stack(sides)
    return (sides >= 0).all(axis=0) | (sides <= 0).all(axis=0)


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5)


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        got = f.read(2)
        if got != magic:
            raise FormatError(f"{path}: expected {magic.decode()} magic, got {got!r}")
        fields = []
        while len(fields) < 3:
            tok = _pnm_token(f, path)
            try:
                fields.append(int(tok))
            except ValueError:
                raise FormatError(f"{path}: non-numeric header field {tok!r}") from None
        w, h, maxval = fields
        if maxval != 255:
            raise FormatError(f"{path}: unsupported max value {maxval} (only 255)")
        if w < 1 or h < 1:
            raise FormatError(f"{path}: bad dimensions {w}x{h}")
        payload = f.read(w * h * channels)
        if len(payload) != w * h * channels:
            raise FormatError(f"{path}: truncated payload "
                              f"({len(payload)} of {w * h * channels} bytes)")
        arr = np.frombuffer(payload, dtype=np.uint8)
        return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def _pnm_token(f, path) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError(f"{path}: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def save_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise FormatError(f"PPM writer needs uint8 (h, w, 3), got {img.dtype} {img.shape}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img).tobytes())


def load_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def save_mask(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-D, got shape {mask.shape}")
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (m.shape[1], m.shape[0]))
        f.write(m.tobytes())


def load_mask(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def load_image(path, mean: tuple[float, float, float] | None = None,
               dtype=np.float64) -> np.ndarray:
    """(3, h, w) float image scaled to [0, 1], channel mean subtracted if given."""
    img = load_ppm(path).astype(dtype) / 255.0
    img = np.ascontiguousarray(img.transpose(2, 0, 1))
    if mean is not None:
        img -= np.asarray(mean, dtype=dtype)[:, None, None]
    return img


# ---------------------------------------------------------------------------
# Manifests and dataset generation


def write_manifest(path, manifest: DatasetManifest) -> None:
    base = os.path.dirname(os.path.abspath(path))
    lines = [
        "classes: " + ",".join(manifest.classes),
        f"seed: {manifest.seed}",
        "mean: " + ",".join(repr(float(v)) for v in manifest.mean),
    ]
    for img, msk in manifest.samples:
        lines.append(f"{os.path.relpath(img, base)}\t{os.path.relpath(msk, base)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    base = os.path.dirname(os.path.abspath(path))
    classes: list[str] = []
    seed = 0
    mean = (0.0, 0.0, 0.0)
    samples: list[tuple[str, str]] = []
    with open(path) as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("classes: "):
                classes = line[len("classes: "):].split(",")
            elif line.startswith("seed: "):
                seed = int(line[len("seed: "):])
            elif line.startswith("mean: "):
                mean = tuple(float(v) for v in line[len("mean: "):].split(","))
            else:
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(f"{path}: bad manifest line {line!r}")
                samples.append((os.path.join(base, parts[0]), os.path.join(base, parts[1])))
    if not classes:
        raise FormatError(f"{path}: missing classes header")
    return DatasetManifest(classes, seed, mean, samples, path=str(path))


def generate(spec: SceneSpec, out_dir, n_train: int, n_val: int, n_test: int) -> dict[str, str]:
    """Render and write all splits; returns split name -> manifest path.

    Deterministic for a fixed spec.seed: every image draws from its own child
    seed, so regenerated datasets are byte-identical.
    """
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("all split sizes must be >= 1")
    out_dir = os.path.abspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    classes = list(CLASS_NAMES[:spec.num_classes + 1])
    root = np.random.SeedSequence(spec.seed)
    splits = {"train": n_train, "val": n_val, "test": n_test}
    children = iter(root.spawn(sum(splits.values())))

    manifests: dict[str, str] = {}
    mean_acc = np.zeros(3)
    split_samples: dict[str, list[tuple[str, str]]] = {}
    for split, count in splits.items():
        samples = []
        for i in range(count):
            rng = np.random.Generator(np.random.PCG64(next(children)))
            img, mask = render_scene(rng, spec)
            img_path = os.path.join(img_dir, f"{split}_{i:04d}.ppm")
            mask_path = os.path.join(mask_dir, f"{split}_{i:04d}.pgm")
            save_ppm(img_path, img)
            save_mask(mask_path, mask)
            samples.append((img_path, mask_path))
            if split == "train":
                mean_acc += img.reshape(-1, 3).mean(axis=0) / 255.0
        split_samples[split] = samples

    mean = tuple(mean_acc / n_train)
    for split, samples in split_samples.items():
        mpath = os.path.join(out_dir, f"{split}.manifest")
        write_manifest(mpath, DatasetManifest(classes, spec.seed, mean, samples, mpath))
        manifests[split] = mpath
    return manifests


class Dataset:
    """All samples of one split cached in memory as uint8, normalized per batch."""

    def __init__(self, manifest: DatasetManifest, dtype=np.float64):
        self.manifest = manifest
        self.dtype = dtype
        self.num_classes = len(manifest.classes) - 1
        images, masks = [], []
        for img_path, mask_path in manifest.samples:
            images.append(load_ppm(img_path))
            masks.append(load_mask(mask_path))
        self.images = np.stack(images)
        self.masks = np.stack(masks).astype(np.int64)

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """(images (n, 3, h, w) normalized, masks (n, h, w) int64)."""
        raw = self.images[indices].astype(self.dtype) / 255.0
        x = np.ascontiguousarray(raw.transpose(0, 3, 1, 2))
        x -= np.asarray(self.manifest.mean, dtype=self.dtype)[None, :, None, None]
        return x, self.masks[indices]
