"""Dataset ingestion and the noise-matched scenario constructions.

Images are float64 arrays shaped (H, W, C) with pixels in [0, 1]; a labeled
dataset stacks them as (N, H, W, C) plus an integer label vector. All
stochastic operations take an explicit integer seed and draw from
numpy.random.default_rng (PCG64), so runs replay exactly; independent
substreams are derived with numpy.random.SeedSequence.

Binary formats handled here:
  * IDX, big-endian: magic bytes 00 00 <type> <ndim>, then ndim u32 dimension
    sizes, then the row-major payload. Type 0x08 is u8 (images 3-dim, labels
    1-dim), type 0x0D is f32 (float tensor dumps of any rank).
  * CIFAR-10 binary: 3073-byte records, 1 label byte then 1024 bytes per
    color plane (R, G, B) of a 32x32 image.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    BadRecordLength,
    DimensionOverflow,
    InvalidStats,
    LabelOutOfRange,
    NoPerturbation,
    ShapeMismatch,
    TruncatedStream,
)

IDX_TYPE_U8 = 0x08
IDX_TYPE_F32 = 0x0D
CIFAR_RECORD_LEN = 3073
MAX_ELEMENTS = 1 << 31


@dataclass
class LabeledDataset:
    """Stacked image tensor (N, H, W, C) in [0,1] plus labels in {0..K-1}."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeMismatch(f"images must be (N,H,W,C), got {self.images.shape}")
        if self.images.shape[3] not in (1, 3):
            raise ShapeMismatch(f"channels must be 1 or 3, got {self.images.shape[3]}")
        if len(self.labels) != len(self.images):
            raise ShapeMismatch("images and labels length differ")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ShapeMismatch("pixels outside [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange("label outside {0..K-1}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def take(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class PerturbationStats:
    """Moments of the nonzero per-pixel deltas of an attack, per §noise matching."""

    mean: float
    variance: float
    modified_pixel_count: float


# ---------------------------------------------------------------------------
# IDX codec
# ---------------------------------------------------------------------------

def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedStream(f"wanted {n} bytes, got {len(data)}")
    return data


def _read_idx_header(stream, expect_type: int, expect_ndim: int):
    magic = _read_exact(stream, 4)
    if magic[0] != 0 or magic[1] != 0:
        raise BadMagic(f"bad IDX magic prefix {magic[:2].hex()}")
    dtype_code, ndim = magic[2], magic[3]
    if dtype_code != expect_type or (expect_ndim and ndim != expect_ndim):
        raise BadMagic(
            f"IDX magic 0x{magic.hex()} (type 0x{dtype_code:02x}, {ndim} dims), "
            f"expected type 0x{expect_type:02x} with {expect_ndim} dims"
        )
    dims = struct.unpack(f">{ndim}I", _read_exact(stream, 4 * ndim))
    total = 1
    for d in dims:
        total *= d
    if total > MAX_ELEMENTS:
        raise DimensionOverflow(f"IDX dims {dims} exceed element cap")
    return dims, total


def load_idx_images(stream) -> np.ndarray:
    """Read a 3-dim u8 IDX image file into (N, H, W) floats in [0,1]."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    dims, total = _read_idx_header(stream, IDX_TYPE_U8, 3)
    payload = _read_exact(stream, total)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
    return arr.astype(float) / 255.0


def load_idx_labels(stream) -> np.ndarray:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    dims, total = _read_idx_header(stream, IDX_TYPE_U8, 1)
    payload = _read_exact(stream, total)
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(image_stream, label_stream, num_classes: int | None = None) -> LabeledDataset:
    """Load paired IDX image/label streams into a dataset (pixels / 255)."""
    images = load_idx_images(image_stream)
    labels = load_idx_labels(label_stream)
    if len(images) != len(labels):
        raise ShapeMismatch(f"{len(images)} images vs {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledDataset(images[..., None], labels, num_classes)


def write_idx_images(images: np.ndarray, stream) -> None:
    """Inverse of load_idx_images; accepts (N,H,W) or (N,H,W,1) floats in [0,1]."""
    arr = np.asarray(images, dtype=float)
    if arr.ndim == 4 and arr.shape[3] == 1:
        arr = arr[..., 0]
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected (N,H,W[,1]) images, got {arr.shape}")
    data = np.rint(arr * 255.0).clip(0, 255).astype(np.uint8)
    stream.write(struct.pack(">BBBB", 0, 0, IDX_TYPE_U8, 3))
    stream.write(struct.pack(">3I", *data.shape))
    stream.write(data.tobytes())


def write_idx_labels(labels: np.ndarray, stream) -> None:
    data = np.asarray(labels).astype(np.uint8)
    stream.write(struct.pack(">BBBB", 0, 0, IDX_TYPE_U8, 1))
    stream.write(struct.pack(">I", data.shape[0]))
    stream.write(data.tobytes())


def load_idx_f32(stream) -> np.ndarray:
    """Read a float-tensor dump (IDX type 0x0D, any rank, big-endian f32)."""
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    dims, total = _read_idx_header(stream, IDX_TYPE_F32, 0)
    payload = _read_exact(stream, 4 * total)
    return np.frombuffer(payload, dtype=">f4").reshape(dims).astype(np.float64)


def write_idx_f32(tensor: np.ndarray, stream) -> None:
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ShapeMismatch(f"unsupported rank {arr.ndim}")
    stream.write(struct.pack(">BBBB", 0, 0, IDX_TYPE_F32, arr.ndim))
    stream.write(struct.pack(f">{arr.ndim}I", *arr.shape))
    stream.write(arr.astype(">f4").tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary codec
# ---------------------------------------------------------------------------

def load_cifar10(stream, num_classes: int = 10) -> LabeledDataset:
    """Parse concatenated 3073-byte CIFAR-10 records (planar RGB)."""
    data = stream if isinstance(stream, (bytes, bytearray)) else stream.read()
    if len(data) == 0 or len(data) % CIFAR_RECORD_LEN != 0:
        raise BadRecordLength(
            f"stream of {len(data)} bytes is not a positive multiple of {CIFAR_RECORD_LEN}"
        )
    n = len(data) // CIFAR_RECORD_LEN
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_LEN)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise LabelOutOfRange(f"label {labels.max()} >= {num_classes}")
    planes = raw[:, 1:].reshape(n, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(float) / 255.0
    return LabeledDataset(images, labels, num_classes)


def write_cifar10(data: LabeledDataset, stream) -> None:
    if data.image_shape != (32, 32, 3):
        raise ShapeMismatch(f"CIFAR records need (32,32,3) images, got {data.image_shape}")
    pixels = np.rint(data.images * 255.0).clip(0, 255).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(data), 3072)
    recs = np.concatenate([data.labels.astype(np.uint8)[:, None], planes], axis=1)
    stream.write(recs.tobytes())


# ---------------------------------------------------------------------------
# Noise matching
# ---------------------------------------------------------------------------

def estimate_perturbation_stats(originals: LabeledDataset, attacked: LabeledDataset) -> PerturbationStats:
    """Moments of the nonzero pixel deltas between paired datasets."""
    if originals.images.shape != attacked.images.shape:
        raise ShapeMismatch(
            f"{originals.images.shape} vs {attacked.images.shape}"
        )
    deltas = attacked.images - originals.images
    nz = deltas[deltas != 0.0]
    if nz.size == 0:
        raise NoPerturbation("datasets are identical")
    count = nz.size / len(originals)
    return PerturbationStats(
        mean=float(nz.mean()), variance=float(nz.var()), modified_pixel_count=float(count)
    )


def add_matched_noise(
    data: LabeledDataset, stats: PerturbationStats, mode: str, seed: int
) -> LabeledDataset:
    """Add Gaussian noise matched to attack perturbations.

    mode "global" noises every pixel (matches a full-image attack); mode
    "subset" noises a uniformly drawn pixel subset per image of size
    round(modified_pixel_count), ties up (matches a sparse attack). Outputs are
    clamped to [0,1]; the clamp slightly biases extreme pixels. Labels pass
    through unchanged.
    """
    if mode not in ("global", "subset"):
        raise InvalidStats(f"unknown mode {mode!r}")
    if not math.isfinite(stats.mean) or not math.isfinite(stats.variance) or stats.variance < 0:
        raise InvalidStats(f"bad moments mean={stats.mean} variance={stats.variance}")
    rng = np.random.default_rng(seed)
    sigma = math.sqrt(stats.variance)
    images = data.images.copy()
    n, h, w, c = images.shape
    d = h * w * c
    if mode == "global":
        images += rng.normal(stats.mean, sigma, size=images.shape)
    else:
        if stats.modified_pixel_count < 0:
            raise InvalidStats("negative modified_pixel_count")
        n_mod = int(math.floor(stats.modified_pixel_count + 0.5))  # ties round up
        n_mod = min(n_mod, d)
        if n_mod > 0:
            flat = images.reshape(n, d)
            for i in range(n):
                idx = rng.choice(d, size=n_mod, replace=False)
                flat[i, idx] += rng.normal(stats.mean, sigma, size=n_mod)
            images = flat.reshape(n, h, w, c)
    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(images, data.labels.copy(), data.num_classes)
