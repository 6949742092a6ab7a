"""Datasets: IDX and CSV readers, and a synthetic task that needs long-range kernels.

IDX layout (all integers big-endian)::

    images: int32 magic 0x00000803 | int32 count | int32 rows | int32 cols | uint8 pixels
    labels: int32 magic 0x00000801 | int32 count | uint8 labels

CSV layout: one image per row, ``label,p0,p1,...,p{H*W-1}`` with pixels in
row-major order. Lines starting with ``#`` are comments and a first row whose
first cell is ``label`` is a header.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    source: str = "memory"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got shape {images.shape}")
        if len(images) == 0:
            raise DataFormatError("dataset is empty")
        if len(images) != len(labels):
            raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
        if not np.all(np.isfinite(images)):
            raise DataFormatError("non-finite pixel values")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise DataFormatError(f"labels must lie in [0, {self.n_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> Dataset:
        return Dataset(self.images[index], self.labels[index], self.n_classes, self.source, dict(self.meta))

    def normalized(self, mode: str = "image") -> Dataset:
        """Zero mean / unit variance copy.

        ``"dataset"`` uses per-channel statistics over the whole set, ``"image"``
        per-image, per-channel statistics, ``"none"`` returns ``self``.
        """
        if mode == "none":
            return self
        if mode not in ("dataset", "image"):
            raise ValueError(f"normalize must be 'none', 'dataset' or 'image', got {mode!r}")
        axes, keep = ((0, 2, 3), True) if mode == "dataset" else ((2, 3), True)
        mean = self.images.mean(axis=axes, keepdims=keep)
        std = self.images.std(axis=axes, keepdims=keep)
        std = np.where(std > 0, std, 1.0)
        return Dataset((self.images - mean) / std, self.labels, self.n_classes, self.source, dict(self.meta))


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    if n_val == 0:
        return ds.subset(order), None
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])


# --------------------------------------------------------------------- IDX


def _read_header(buf: bytes, n_dims: int, magic: int, path) -> tuple[int, ...]:
    if len(buf) >= 4 and struct.unpack(">i", buf[:4])[0] != magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{struct.unpack('>I', buf[:4])[0]:08x}, expected 0x{magic:08x}"
        )
    size = 4 * (1 + n_dims)
    if len(buf) < size:
        raise DataFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    return struct.unpack(f">{n_dims}i", buf[4:size])


def load_idx(images_path, labels_path) -> Dataset:
    img_buf = Path(images_path).read_bytes()
    lab_buf = Path(labels_path).read_bytes()

    count, rows, cols = _read_header(img_buf, 3, IDX_IMAGES_MAGIC, images_path)
    n_pixels = count * rows * cols
    if len(img_buf) - 16 < n_pixels:
        raise DataFormatError(f"{images_path}: truncated, expected {n_pixels} pixel bytes")

    (lcount,) = _read_header(lab_buf, 1, IDX_LABELS_MAGIC, labels_path)
    if len(lab_buf) - 8 < lcount:
        raise DataFormatError(f"{labels_path}: truncated, expected {lcount} label bytes")
    if lcount != count:
        raise DataFormatError(f"{count} images but {lcount} labels")

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n_pixels, offset=16)
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=lcount, offset=8).astype(np.int64)
    images = pixels.reshape(count, 1, rows, cols) / 255.0
    n_classes = int(labels.max()) + 1 if count else 0
    return Dataset(images, labels, n_classes, source=f"idx:{images_path}")


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as IDX, quantizing pixels to bytes."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise DataFormatError("IDX holds single-channel images only")
    pixels = np.clip(np.rint(ds.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">4i", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">2i", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    )


# --------------------------------------------------------------------- CSV


def load_csv(path, height: int, width: int, scale: float = 1.0, n_classes: int | None = None) -> Dataset:
    """Read ``label,pixels...`` rows; pixels are multiplied by ``scale``
    (use ``1/255`` for byte-valued files) and must end up in ``[0, 1]``."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if not labels and not rows and row[0].strip().lower() == "label":
                continue
            if len(row) != 1 + height * width:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {1 + height * width} cells, got {len(row)}"
                )
            try:
                label = int(row[0])
                pixels = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            labels.append(label)
            rows.append(pixels)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    images = np.array(rows, dtype=np.float64).reshape(-1, 1, height, width) * scale
    if images.min() < 0 or images.max() > 1:
        raise DataFormatError(f"{path}: pixels outside [0, 1] after scaling by {scale}")
    labels = np.array(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    return Dataset(images, labels, n_classes, source=f"csv:{path}")


def write_csv(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    if c != 1:
        raise DataFormatError("CSV holds single-channel images only")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"p{i}" for i in range(h * w)])
        for label, img in zip(ds.labels, ds.images[:, 0]):
            writer.writerow([int(label)] + [repr(float(v)) for v in img.ravel()])


# --------------------------------------------------------------- synthetic


def _stamp(img, y, x, radius):
    # isotropic Gaussian blob with peak 1 at (y, x); radius 0 lights one pixel
    if radius <= 0:
        img[y, x] = 1.0
        return
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    blob = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * radius**2))
    np.maximum(img, blob, out=img)


def offset_class(dy, dx, classes: int) -> int:
    """Class of an undirected displacement: its angle in ``[0, pi)`` split into equal bins."""
    angle = math.atan2(dy, dx) % math.pi
    return min(int(angle / (math.pi / classes)), classes - 1)


def synth_longrange(
    n: int,
    size: int = 32,
    classes: int = 4,
    seed: int = 0,
    noise: float = 0.25,
    dot_radius: float = 1.0,
    boundary_margin_deg: float = 3.0,
) -> Dataset:
    """Two bright dots on uniform noise; the label is the quantized orientation of
    the segment joining them.

    Separations are drawn from ``[size/3, size/2]``, so a detector has to
    relate pixels that far apart. Orientations within ``boundary_margin_deg``
    of a class boundary are re-drawn so every label is unambiguous.
    ``noise=0`` gives the noise-free variant.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, 1, size, size))
    labels = np.empty(n, dtype=np.int64)
    offsets = np.empty((n, 2), dtype=np.int64)
    bin_width = math.pi / classes
    margin = math.radians(boundary_margin_deg)
    for i in range(n):
        while True:
            theta = rng.uniform(0.0, math.pi)
            dist = rng.uniform(size / 3, size / 2)
            dy = int(round(dist * math.sin(theta)))
            dx = int(round(dist * math.cos(theta)))
            angle = math.atan2(dy, dx) % math.pi
            rem = angle % bin_width
            if min(rem, bin_width - rem) < margin:
                continue
            # first dot anywhere the second still fits with a 1-pixel border
            ylo, yhi = max(1, 1 - dy), min(size - 2, size - 2 - dy)
            xlo, xhi = max(1, 1 - dx), min(size - 2, size - 2 - dx)
            if ylo > yhi or xlo > xhi:
                continue
            y0 = int(rng.integers(ylo, yhi + 1))
            x0 = int(rng.integers(xlo, xhi + 1))
            break
        img = rng.uniform(0.0, noise, size=(size, size)) if noise > 0 else np.zeros((size, size))
        _stamp(img, y0, x0, dot_radius)
        _stamp(img, y0 + dy, x0 + dx, dot_radius)
        images[i, 0] = img
        labels[i] = offset_class(dy, dx, classes)
        offsets[i] = (dy, dx)
    meta = {"generator": "synth_longrange", "size": size, "seed": seed, "noise": noise,
            "dot_radius": dot_radius, "offsets": offsets}
    return Dataset(images, labels, classes, source="synth_longrange", meta=meta)
