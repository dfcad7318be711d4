"""Packed image datasets, augmentation and deterministic batching."""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from deskmae import rng as rngs

MAGIC = b"MAEDS1"
HEADER = struct.Struct("<5I")
AUG_MODES = ("none_center_crop", "crop_fixed_size", "crop_random_size")


class DataError(ValueError):
    pass


@dataclass
class PackedDataset:
    height: int
    width: int
    channels: int
    n_classes: int
    labels: np.ndarray  # [count] int64
    pixels: np.ndarray  # [count, H, W, C] uint8

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(
            len(self.labels), self.height, self.width, self.channels)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PackedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PackedDataset(self.height, self.width, self.channels, self.n_classes,
                             self.labels[idx], self.pixels[idx])


def write_packed(path, ds: PackedDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(HEADER.pack(len(ds), ds.height, ds.width, ds.channels, ds.n_classes))
        for label, px in zip(ds.labels, ds.pixels):
            fh.write(struct.pack("<I", int(label)))
            fh.write(px.tobytes())


def load_packed(path) -> PackedDataset:
    buf = Path(path).read_bytes()
    if buf[:6] != MAGIC:
        raise DataError(f"{path}: bad magic {buf[:6]!r} at byte 0")
    if len(buf) < 6 + HEADER.size:
        raise DataError(f"{path}: truncated header at byte {len(buf)}")
    count, h, w, c, n_classes = HEADER.unpack_from(buf, 6)
    rec = 4 + h * w * c
    off = 6 + HEADER.size
    labels = np.empty(count, dtype=np.int64)
    pixels = np.empty((count, h, w, c), dtype=np.uint8)
    for i in range(count):
        if off + rec > len(buf):
            raise DataError(f"{path}: truncated record {i} at byte {off}")
        (label,) = struct.unpack_from("<I", buf, off)
        if label >= n_classes:
            raise DataError(f"{path}: label {label} >= {n_classes} classes at byte {off}")
        labels[i] = label
        pixels[i] = np.frombuffer(buf, dtype=np.uint8, count=rec - 4, offset=off + 4).reshape(h, w, c)
        off += rec
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes at byte {off}")
    return PackedDataset(h, w, c, n_classes, labels, pixels)


# ---------------------------------------------------------------------------
# channel statistics sidecar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelStats:
    mean: tuple
    std: tuple

    @classmethod
    def identity(cls, channels: int = 3) -> "ChannelStats":
        return cls((0.0,) * channels, (1.0,) * channels)


def compute_stats(ds: PackedDataset) -> ChannelStats:
    """Per-channel mean/std of pixels scaled to [0, 1]; std floors at 1e-6."""
    if len(ds) == 0:
        return ChannelStats((0.0,) * ds.channels, (1.0,) * ds.channels)
    x = ds.pixels.reshape(-1, ds.channels).astype(np.float64) / 255.0
    return ChannelStats(tuple(x.mean(axis=0).tolist()), tuple(np.maximum(x.std(axis=0), 1e-6).tolist()))


def stats_path(path) -> Path:
    return Path(path).with_suffix(".stats")


def write_stats(path, stats: ChannelStats) -> None:
    lines = [repr(float(v)) for v in stats.mean] + [repr(float(v)) for v in stats.std]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_stats(path, channels: int = 3) -> ChannelStats:
    vals = [float(line) for line in Path(path).read_text(encoding="utf-8").split()]
    if len(vals) != 2 * channels:
        raise DataError(f"{path}: expected {2 * channels} values, found {len(vals)}")
    return ChannelStats(tuple(vals[:channels]), tuple(vals[channels:]))


def load_stats_for(path, channels: int = 3) -> ChannelStats:
    sp = stats_path(path)
    return read_stats(sp, channels) if sp.exists() else ChannelStats.identity(channels)


def standardize(img: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """uint8 or [0, 1] float pixels -> per-channel standardized float32."""
    x = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    return (x - np.asarray(stats.mean, np.float32)) / np.asarray(stats.std, np.float32)


def unstandardize(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Back to clamped uint8 bytes."""
    px = x * np.asarray(stats.std) + np.asarray(stats.mean)
    return np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _axis_weights(src: int, dst: int, start: int, length: int):
    # half-pixel centres, clamped to the crop window
    coords = start + (np.arange(dst) + 0.5) * (length / dst) - 0.5
    last = min(src - 1, start + length - 1)
    coords = np.clip(coords, start, last)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, int(last))
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinear resample of ``img[H, W, C]`` (optionally a ``(top, left, h, w)`` window) with clamped edges."""
    h, w = img.shape[:2]
    top, left, bh, bw = box if box is not None else (0, 0, h, w)
    y0, y1, fy = _axis_weights(h, out_h, top, bh)
    x0, x1, fx = _axis_weights(w, out_w, left, bw)
    x = img.astype(np.float64)
    rows = x[y0] * (1 - fy)[:, None, None] + x[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def center_crop(img: np.ndarray, out_size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if out_size > min(h, w):
        raise DataError(f"crop {out_size} larger than image {h}x{w}")
    top, left = (h - out_size) // 2, (w - out_size) // 2
    return img[top:top + out_size, left:left + out_size]


def resize_shorter(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if min(h, w) == size:
        return img
    scale = size / min(h, w)
    return resize_bilinear(img, max(size, int(round(h * scale))), max(size, int(round(w * scale))))


def hflip(img: np.ndarray, rng: Optional[np.random.Generator] = None, force: Optional[bool] = None) -> np.ndarray:
    """Mirror columns with probability 0.5 (or always/never with ``force``)."""
    flip = force if force is not None else bool(rng.random() < 0.5)
    return img[:, ::-1] if flip else img


@dataclass(frozen=True)
class AugmentSpec:
    mode: str = "crop_random_size"
    flip: bool = True
    out_size: int = 32
    scale_range: tuple = (0.2, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)
    fixed_fraction: float = 0.875

    def __post_init__(self):
        if self.mode not in AUG_MODES:
            raise ValueError(f"unknown augmentation mode {self.mode!r}; expected one of {AUG_MODES}")


def sample_crop_box(h: int, w: int, spec: AugmentSpec, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random-resized-crop window; up to 10 tries, then a centred square."""
    area = h * w
    lo_r, hi_r = math.log(spec.ratio_range[0]), math.log(spec.ratio_range[1])
    for _ in range(10):
        target = area * rng.uniform(*spec.scale_range)
        ratio = math.exp(rng.uniform(lo_r, hi_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def random_resized_crop(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
                        stats: Optional[ChannelStats] = None) -> np.ndarray:
    """Crop a random window and resize it to ``out_size``; returns standardized floats."""
    stats = stats or ChannelStats.identity(img.shape[-1])
    box = sample_crop_box(img.shape[0], img.shape[1], spec, rng)
    scaled = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img
    out = resize_bilinear(scaled, spec.out_size, spec.out_size, box)
    return standardize(out, stats)


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator,
            stats: Optional[ChannelStats] = None) -> np.ndarray:
    """One training view of a uint8 image as standardized float32 ``[out, out, C]``."""
    stats = stats or ChannelStats.identity(img.shape[-1])
    if spec.mode == "crop_random_size":
        out = random_resized_crop(img, spec, rng, stats)
    else:
        x = img.astype(np.float64) / 255.0
        if spec.mode == "crop_fixed_size":
            h, w = x.shape[:2]
            side = max(1, int(round(spec.fixed_fraction * min(h, w))))
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            x = resize_bilinear(x, spec.out_size, spec.out_size, (top, left, side, side))
        else:
            x = center_crop(resize_shorter(x, spec.out_size), spec.out_size)
        out = standardize(x, stats)
    if spec.flip:
        out = hflip(out, rng)
    return np.ascontiguousarray(out, dtype=np.float32)


def eval_view(img: np.ndarray, out_size: int, stats: Optional[ChannelStats] = None) -> np.ndarray:
    stats = stats or ChannelStats.identity(img.shape[-1])
    x = img.astype(np.float64) / 255.0
    return np.ascontiguousarray(standardize(center_crop(resize_shorter(x, out_size), out_size), stats))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return rngs.stream(seed, "order", epoch).permutation(n)


def batches(ds: PackedDataset, batch_size: int, seed: int, epoch: int,
            spec: Optional[AugmentSpec] = None, stats: Optional[ChannelStats] = None,
            size: Optional[int] = None) -> Iterator[Batch]:
    """Epoch-shuffled batches; the last partial batch is kept.

    With ``spec`` each image gets an augmented view keyed by
    ``(seed, epoch, image index)``; otherwise the centre view.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(ds), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, render(ds, idx, spec, stats, seed, epoch, size), ds.labels[idx])


def worker_count() -> int:
    """Rendering threads, capped by the ``MAE_THREADS`` environment variable."""
    raw = os.environ.get("MAE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DataError(f"MAE_THREADS must be an integer, got {raw!r}") from None


def render(ds: PackedDataset, idx: Sequence[int], spec: Optional[AugmentSpec], stats: Optional[ChannelStats],
           seed: int = 0, epoch: int = 0, size: Optional[int] = None) -> np.ndarray:
    """Views of ``ds[idx]``: augmented under ``spec``, else the centre view of side ``size``.

    Every view has its own RNG key, so the thread count never changes the output.
    """
    size = size or ds.height

    def one(i):
        if spec is None:
            return eval_view(ds.pixels[i], size, stats)
        return augment(ds.pixels[i], spec, rngs.stream(seed, "aug", epoch, int(i)), stats)

    workers = worker_count()
    if workers > 1 and len(idx) > 1:
        with ThreadPoolExecutor(workers) as pool:
            views = list(pool.map(one, idx))
    else:
        views = [one(i) for i in idx]
    if not views:
        out = spec.out_size if spec else size
        return np.zeros((0, out, out, ds.channels), np.float32)
    return np.stack(views).astype(np.float32)


# ---------------------------------------------------------------------------
# PPM (P6) images
# ---------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, np.uint8).tobytes())
