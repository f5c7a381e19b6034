"""Built-in desk-scale corpora.

Two 10-class image sets that need no network access:

* ``digits``  — the classic 8x8 handwritten digit scans bundled with
  scikit-learn (1797 images, grayscale).
* ``shapes``  — procedurally rendered geometric shapes on noisy
  backgrounds, a stand-in for a small natural-image set.

Both are materialized once into a directory of PNG files plus a
ground-truth ``path,label`` manifest, so the rest of the pipeline treats
them exactly like user-supplied data.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .datasets import InputFormat, LabeledDataset, read_labeled_manifest
from .errors import ConfigurationError

CORPUS_KINDS = ("digits", "shapes")

SHAPE_CLASSES = (
    "circle", "square", "triangle", "cross", "ring",
    "diamond", "star", "hstripes", "vstripes", "checker",
)


def _write_manifest_and_images(root, arrays, labels, mode):
    os.makedirs(root, exist_ok=True)
    refs = []
    for i, arr in enumerate(arrays):
        name = f"img{i:05d}.png"
        Image.fromarray(arr, mode=mode).save(os.path.join(root, name))
        refs.append(name)
    manifest = os.path.join(root, "corpus.csv")
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        fh.write("path,label\n")
        for ref, label in zip(refs, labels):
            fh.write(f"{ref},{int(label)}\n")
    return manifest


def digits_corpus(root, contrast=0.3, offset=0.35, noise=0.04, seed=0):
    """Write the 8x8 digit scans as PNGs with their true labels.

    Contrast is compressed and light pixel noise added so that the
    perturbation budgets used in the sweeps (a few gray levels out of 255)
    are meaningful relative to the signal range of the images.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    rng = np.random.default_rng(seed)
    arrays = []
    for im in bunch.images:
        v = offset + contrast * (im / 16.0)
        if noise:
            v = v + rng.normal(0.0, noise, size=v.shape)
        arrays.append(np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8))
    return _write_manifest_and_images(root, arrays, bunch.target, "L")


def _draw_shape(draw, cls, cx, cy, r, fill):
    if cls == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif cls == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif cls == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif cls == "cross":
        w = max(2, r // 2)
        draw.rectangle([cx - r, cy - w, cx + r, cy + w], fill=fill)
        draw.rectangle([cx - w, cy - r, cx + w, cy + r], fill=fill)
    elif cls == "ring":
        w = max(2, r // 2)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
        draw.ellipse([cx - r + w, cy - r + w, cx + r - w, cy + r - w], fill=0)
    elif cls == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=fill)
    elif cls == "star":
        pts = []
        for k in range(8):
            rad = r if k % 2 == 0 else r // 2
            ang = k * math.pi / 4.0
            pts.append((cx + rad * math.sin(ang), cy - rad * math.cos(ang)))
        draw.polygon(pts, fill=fill)
    elif cls == "hstripes":
        step = max(2, r // 2)
        for y in range(cy - r, cy + r, 2 * step):
            draw.rectangle([cx - r, y, cx + r, y + step - 1], fill=fill)
    elif cls == "vstripes":
        step = max(2, r // 2)
        for x in range(cx - r, cx + r, 2 * step):
            draw.rectangle([x, cy - r, x + step - 1, cy + r], fill=fill)
    elif cls == "checker":
        step = max(2, (2 * r) // 4)
        for ix, x in enumerate(range(cx - r, cx + r, step)):
            for iy, y in enumerate(range(cy - r, cy + r, step)):
                if (ix + iy) % 2 == 0:
                    draw.rectangle([x, y, x + step - 1, y + step - 1], fill=fill)


def shapes_corpus(root, size=24, channels=3, per_class=200, seed=0):
    """Render a 10-class geometric-shape corpus with randomized pose/contrast."""
    rng = np.random.default_rng(seed)
    arrays, labels = [], []
    scale = 4  # supersample then downscale for soft edges
    big = size * scale
    for label, cls in enumerate(SHAPE_CLASSES):
        for _ in range(per_class):
            canvas = Image.new("L", (big, big), color=0)
            draw = ImageDraw.Draw(canvas)
            r = int(rng.integers(big // 5, big // 3))
            cx = int(rng.integers(r + 2, big - r - 2))
            cy = int(rng.integers(r + 2, big - r - 2))
            fill = int(rng.integers(150, 256))
            _draw_shape(draw, cls, cx, cy, r, fill)
            small = canvas.resize((size, size), Image.BILINEAR)
            fg = np.asarray(small, dtype=np.float32)
            noise = rng.normal(35.0, 18.0, size=(size, size)).clip(0, 90)
            gray = np.clip(np.maximum(fg, noise), 0, 255).astype(np.uint8)
            if channels == 3:
                tint = rng.uniform(0.55, 1.0, size=3)
                arr = np.stack([np.clip(gray * t, 0, 255).astype(np.uint8) for t in tint], axis=-1)
                arrays.append(arr)
            else:
                arrays.append(gray)
            labels.append(label)
    mode = "RGB" if channels == 3 else "L"
    return _write_manifest_and_images(root, arrays, labels, mode)


def build_corpus(kind, root, fmt: InputFormat, seed=0, per_class=200) -> LabeledDataset:
    """Materialize a named corpus (reusing an existing manifest if present)."""
    manifest = os.path.join(root, "corpus.csv")
    if not os.path.exists(manifest):
        if kind == "digits":
            manifest = digits_corpus(root, seed=seed)
        elif kind == "shapes":
            manifest = shapes_corpus(
                root, size=max(fmt.height, fmt.width), channels=fmt.channels,
                per_class=per_class, seed=seed,
            )
        else:
            raise ConfigurationError(f"unknown corpus kind {kind!r}; choose from {CORPUS_KINDS}")
    return read_labeled_manifest(manifest, fmt, provenance=f"synthetic:{kind}")
