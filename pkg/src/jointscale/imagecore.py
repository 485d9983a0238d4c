"""Images, datasets, norms, file I/O and seeded randomness.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` holding float64
intensities in [0, 1]; signed perturbation fields share the layout. Batches
add a leading axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Raised for malformed or unsupported image / dataset files."""


class InvalidRatioError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical bytes on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def split_seed(seed: int, index: int) -> int:
    return (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def as_image(x) -> np.ndarray:
    """Coerce to a float64 ``(H, W, C)`` array (2-D input gains a channel axis)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {a.shape}")
    return a


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def l2_norm(d: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(d, dtype=np.float64))))


def linf_norm(d: np.ndarray) -> float:
    d = np.asarray(d)
    return float(np.max(np.abs(d))) if d.size else 0.0


def scaled_l2(d: np.ndarray, beta: float) -> float:
    """L2 norm divided by the scaling ratio, for cross-resolution comparison."""
    if beta < 1:
        raise InvalidRatioError(f"scaling ratio must be >= 1, got {beta}")
    return l2_norm(d) / beta


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def to_bytes8(img: np.ndarray) -> np.ndarray:
    return np.floor(clamp01(img) * 255.0 + 0.5).astype(np.uint8)


def save_ppm(image: np.ndarray, path) -> None:
    img = as_image(image)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] != 3:
        raise ValueError("PPM holds 1 or 3 channels")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes8(img).tobytes())


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 2 or buf[:2] != b"P6":
        if buf[:2] == b"P3":
            raise ImageFormatError("ASCII PPM (P3) is not supported")
        raise ImageFormatError("not a binary PPM file")
    tokens, pos = _ppm_tokens(buf[2:], 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as err:
        raise ImageFormatError("malformed PPM header") from err
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM depth maxval={maxval}")
    if w <= 0 or h <= 0:
        raise ImageFormatError("malformed PPM dimensions")
    raster = buf[2 + pos :]
    need = w * h * 3
    if len(raster) < need:
        raise ImageFormatError("truncated PPM payload")
    arr = np.frombuffer(raster[:need], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images / labels length mismatch")
        if len(self.labels) and (self.labels.max() >= self.class_count or self.labels.min() < 0):
            raise ValueError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    if len(ib) < 16 or struct.unpack(">I", ib[:4])[0] != IDX3_MAGIC:
        raise ImageFormatError("bad IDX3 magic number")
    if len(lb) < 8 or struct.unpack(">I", lb[:4])[0] != IDX1_MAGIC:
        raise ImageFormatError("bad IDX1 magic number")
    n, rows, cols = struct.unpack(">III", ib[4:16])
    (nl,) = struct.unpack(">I", lb[4:8])
    if n != nl:
        raise ImageFormatError(f"image count {n} != label count {nl}")
    if len(ib) < 16 + n * rows * cols or len(lb) < 8 + nl:
        raise ImageFormatError("truncated IDX payload")
    px = np.frombuffer(ib[16 : 16 + n * rows * cols], dtype=np.uint8)
    images = px.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(lb[8 : 8 + nl], dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if n else 1
    return Dataset(images, labels, class_count)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    n, h, w, c = dataset.images.shape
    if c != 1:
        raise ValueError("IDX3 stores single-channel images")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX3_MAGIC, n, h, w))
        fh.write(to_bytes8(dataset.images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX1_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic geometric shapes

SHAPES = ("rectangle", "disk", "cross", "triangle", "ring", "hbar", "vbar", "diagonal", "xmark", "diamond")


def _shape_mask(kind: str, side: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(1.0, 0.28 * r)
    if kind == "rectangle":
        return (np.abs(dy) <= 0.75 * r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "cross":
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= t) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= t) & (np.abs(dy) <= r)
    if kind == "diagonal":
        return (np.abs(dy - dx) <= t * 1.2) & (np.abs(dx) <= r)
    if kind == "xmark":
        return ((np.abs(dy - dx) <= t) | (np.abs(dy + dx) <= t)) & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise ValueError(kind)


def synth_dataset(rng: np.random.Generator, n: int, side: int, class_count: int, channels: int = 1) -> Dataset:
    """Labeled geometric-shape images; label ``i % class_count`` picks the shape."""
    if side < 8:
        raise ValueError(f"side {side} too small (need >= 8)")
    if not 2 <= class_count <= len(SHAPES):
        raise ValueError(f"class_count must be in 2..{len(SHAPES)}")
    images = np.empty((n, side, side, channels))
    labels = np.arange(n, dtype=np.int64) % class_count
    for i in range(n):
        bg = rng.uniform(0.05, 0.45, size=channels)
        fg = np.clip(bg + rng.uniform(0.35, 0.55, size=channels), 0.0, 1.0)
        r = rng.uniform(0.22, 0.34) * side
        cy, cx = rng.uniform(r * 0.9, side - 1 - r * 0.9, size=2)
        m = _shape_mask(SHAPES[labels[i]], side, cy, cx, r)
        img = np.where(m[:, :, None], fg, bg)
        img += rng.normal(0.0, 0.02, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, class_count)


# ---------------------------------------------------------------------------
# Attack outcome record shared by all attack modules


@dataclass
class AttackResult:
    image: np.ndarray  # final attack image A
    delta: np.ndarray  # A - S
    l2: float
    scaled_l2: float
    success: bool
    label: int = -1  # prediction on A (-1 when not applicable)
    iterations: int = 0
    queries: int = 0
    info: dict = field(default_factory=dict)

    @classmethod
    def from_images(cls, source: np.ndarray, attack: np.ndarray, beta: float, success: bool, **kw) -> "AttackResult":
        d = np.asarray(attack, dtype=np.float64) - source
        return cls(attack, d, l2_norm(d), scaled_l2(d, beta), bool(success), **kw)
