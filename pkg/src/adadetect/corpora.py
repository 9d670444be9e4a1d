"""Procedural image corpora for self-contained desk-scale runs.

Two generators: white-on-black digit glyphs (28x28 grayscale, ten classes)
rendered from the DejaVu font family with affine and intensity jitter, and a
ten-class colored shape/texture corpus (32x32 RGB) whose colors are class-
uninformative so the classes stay moderately confusable. Both are
deterministic functions of (n, seed) and write/read through the standard
IDX / CIFAR binary codecs, so the full pipeline exercises the same file
formats real corpora would use.
"""
from __future__ import annotations

import glob
import os

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .datasets import LabeledDataset

_FONT_DIRS = (
    "/usr/share/fonts/truetype/dejavu",
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fonts"),
)

RENDER_SCALE = 64


def _discover_fonts() -> list:
    # Sans and Mono faces keep glyphs single-region after binarization; the
    # Serif faces fragment (thin serifs drop below threshold when downsampled)
    patterns = ("DejaVuSans*.ttf", "DejaVuSansMono*.ttf")
    paths = []
    for d in _FONT_DIRS:
        for pat in patterns:
            paths.extend(glob.glob(os.path.join(d, pat)))
    try:  # matplotlib bundles the same family; useful when system fonts are absent
        import matplotlib

        mpl_fonts = os.path.join(os.path.dirname(matplotlib.__file__), "mpl-data", "fonts", "ttf")
        for pat in patterns:
            paths.extend(glob.glob(os.path.join(mpl_fonts, pat)))
    except ImportError:
        pass
    seen = {}
    for p in sorted(paths):
        seen.setdefault(os.path.basename(p), p)
    fonts = [seen[k] for k in sorted(seen) if _renders_digits(seen[k])]
    if not fonts:
        raise RuntimeError("no usable digit-rendering fonts found")
    return fonts


def _renders_digits(path: str) -> bool:
    """Some face variants rasterize digits to nothing; probe before use."""
    try:
        canvas = Image.new("L", (32, 32), 0)
        ImageDraw.Draw(canvas).text((16, 16), "8", fill=255, font=_font(path, 20), anchor="mm")
        return int(np.asarray(canvas).max()) > 128
    except OSError:
        return False


_FONT_CACHE: dict = {}


def _font(path: str, size: int):
    key = (path, size)
    if key not in _FONT_CACHE:
        _FONT_CACHE[key] = ImageFont.truetype(path, size)
    return _FONT_CACHE[key]


def digits_corpus(n: int, seed: int, size: int = 28) -> LabeledDataset:
    """n rendered digit images, classes balanced by uniform draw, pixels in [0,1]."""
    fonts = _discover_fonts()
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 1))
    labels = rng.integers(0, 10, size=n)
    for i in range(n):
        digit = int(labels[i])
        font_path = fonts[rng.integers(len(fonts))]
        font_size = int(rng.integers(22, 44))
        stroke = int(rng.integers(0, 3))
        angle = float(rng.uniform(-15.0, 15.0))
        shear = float(rng.uniform(-0.25, 0.25))
        dx, dy = rng.uniform(-6.0, 6.0, size=2)
        gamma = float(rng.uniform(0.7, 1.4))
        intensity = float(rng.uniform(0.85, 1.0))
        noise_sigma = float(rng.uniform(0.02, 0.05))

        canvas = Image.new("L", (RENDER_SCALE, RENDER_SCALE), 0)
        draw = ImageDraw.Draw(canvas)
        draw.text(
            (RENDER_SCALE / 2 + dx, RENDER_SCALE / 2 + dy),
            str(digit),
            fill=255,
            font=_font(font_path, font_size),
            anchor="mm",
            stroke_width=stroke,
            stroke_fill=255,
        )
        canvas = canvas.transform(
            (RENDER_SCALE, RENDER_SCALE),
            Image.AFFINE,
            (1.0, shear, -shear * RENDER_SCALE / 2, 0.0, 1.0, 0.0),
            resample=Image.BILINEAR,
        )
        canvas = canvas.rotate(angle, resample=Image.BILINEAR)
        small = canvas.resize((size, size), resample=Image.BILINEAR)
        img = np.asarray(small, dtype=float) / 255.0
        peak = img.max()
        if peak > 0:  # restore stroke contrast lost to the downsampling
            img = img / peak
        img = np.power(img, gamma) * intensity
        img += _background_clutter(rng, size)
        img += rng.normal(0.0, noise_sigma, size=img.shape)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, 10)


def _background_clutter(rng, size: int) -> np.ndarray:
    """Faint blobs and streaks well below the 0.5 binarization threshold.

    Keeps background weights alive during training (as messy real imagery
    would) without ever adding white-count or region-count content.
    """
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(1.5, 5.0, size=2)
        amp = rng.uniform(0.08, 0.30)
        yy, xx = np.mgrid[0:size, 0:size]
        field += amp * np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    return np.clip(field, 0.0, 0.34)


# ---------------------------------------------------------------------------
# colored shapes (CIFAR-like stand-in)
# ---------------------------------------------------------------------------

def _draw_shape(draw: ImageDraw.ImageDraw, cls: int, cx, cy, r, color):
    if cls == 0:  # disk
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), fill=color)
    elif cls == 1:  # square
        draw.rectangle((cx - r, cy - r, cx + r, cy + r), fill=color)
    elif cls == 2:  # triangle
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif cls == 3:  # ring
        draw.ellipse((cx - r, cy - r, cx + r, cy + r), outline=color, width=max(2, r // 3))
    elif cls == 4:  # cross
        w = max(2, r // 3)
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=color)
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=color)
    elif cls == 5:  # horizontal stripes
        for y in range(int(cy - r), int(cy + r), max(4, r // 2)):
            draw.rectangle((cx - r, y, cx + r, y + max(2, r // 4)), fill=color)
    elif cls == 6:  # vertical stripes
        for x in range(int(cx - r), int(cx + r), max(4, r // 2)):
            draw.rectangle((x, cy - r, x + max(2, r // 4), cy + r), fill=color)
    elif cls == 7:  # checkerboard
        step = max(4, (2 * r) // 4)
        for yi, y in enumerate(range(int(cy - r), int(cy + r), step)):
            for xi, x in enumerate(range(int(cx - r), int(cx + r), step)):
                if (xi + yi) % 2 == 0:
                    draw.rectangle((x, y, x + step, y + step), fill=color)
    elif cls == 8:  # diagonal bar
        w = max(2, r // 3)
        draw.line((cx - r, cy + r, cx + r, cy - r), fill=color, width=w * 2)
    else:  # two small disks
        rr = max(3, r // 2)
        draw.ellipse((cx - r, cy - rr, cx - r + 2 * rr, cy + rr), fill=color)
        draw.ellipse((cx + r - 2 * rr, cy - rr, cx + r, cy + rr), fill=color)


def shapes_corpus(n: int, seed: int, size: int = 32) -> LabeledDataset:
    """n colored shape images over noisy backgrounds; colors carry no class signal."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size, 3))
    labels = rng.integers(0, 10, size=n)
    scale = 2 * size
    for i in range(n):
        cls = int(labels[i])
        bg = tuple(int(v) for v in rng.integers(0, 90, size=3))
        fg = tuple(int(v) for v in rng.integers(120, 256, size=3))
        canvas = Image.new("RGB", (scale, scale), bg)
        draw = ImageDraw.Draw(canvas)
        cx = scale / 2 + rng.uniform(-6, 6)
        cy = scale / 2 + rng.uniform(-6, 6)
        r = int(rng.integers(scale // 4, scale // 2 - 6))
        _draw_shape(draw, cls, cx, cy, r, fg)
        canvas = canvas.rotate(float(rng.uniform(-25, 25)), resample=Image.BILINEAR,
                               fillcolor=bg)
        small = canvas.resize((size, size), resample=Image.BILINEAR)
        img = np.asarray(small, dtype=float) / 255.0
        img += rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, 10)
