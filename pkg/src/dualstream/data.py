"""Dataset ingestion and the deterministic two-view augmentation pipeline.

Corpora are either CIFAR-10 binary batches or a built-in generator of simple
shapes (disk / square / triangle / ring) on noise backgrounds. All randomness
flows through splitmix64 substreams, so the full pipeline is a pure function
of (data, config, seed).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .rng import SeededRng

CIFAR_RECORD_BYTES = 3073
SOLARIZE_THRESHOLD = 0.5


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (3,H,W) float32 in [0,1]
    label: int


@dataclass(frozen=True)
class AugmentConfig:
    out_resolution: int = 32
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    grayscale_prob: float = 0.2
    blur_prob: tuple[float, float] = (1.0, 0.1)
    solarize_prob: tuple[float, float] = (0.0, 0.2)


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    seed1: int
    seed2: int


# ---------------------------------------------------------------------------
# loading / synthesis


def load_cifar10(path: str) -> list[ImageRecord]:
    """CIFAR-10 binary batches: per record 1 label byte + 3 channel planes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max(initial=0) > 9:
        raise FormatError(f"{path}: label byte {labels.max()} exceeds 9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return [ImageRecord(pixels[i], int(labels[i])) for i in range(len(records))]


def _draw_shape(rng: SeededRng, label: int, res: int = 32) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    cy = rng.uniform(0.3 * res, 0.7 * res)
    cx = rng.uniform(0.3 * res, 0.7 * res)
    r = rng.uniform(0.15 * res, 0.3 * res)
    if label == 0:  # disk
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif label == 1:  # square
        mask = (np.abs(yy - cy) <= 0.85 * r) & (np.abs(xx - cx) <= 0.85 * r)
    elif label == 2:  # triangle (apex up)
        mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - cy + r) / 2)
    else:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)

    img = np.empty((3, res, res), dtype=np.float32)
    for c in range(3):
        base = rng.uniform(0.15, 0.45)
        img[c] = base + 0.2 * _noise(rng, (res, res))
    color = [rng.uniform(0.55, 1.0) for _ in range(3)]
    for c in range(3):
        img[c][mask] = color[c]
    return np.clip(img, 0.0, 1.0)


def _noise(rng: SeededRng, shape) -> np.ndarray:
    n = int(np.prod(shape))
    vals = np.empty(n, dtype=np.float32)
    # bulk-generate from a numpy generator seeded off the splitmix stream
    vals[:] = np.random.default_rng(rng.next_u64()).random(n, dtype=np.float32)
    return vals.reshape(shape)


def synth_shapes(n: int, seed: int) -> list[ImageRecord]:
    """n 32x32 images over 4 classes {disk, square, triangle, ring}."""
    if n < 1:
        raise DataError(f"need n >= 1, got {n}")
    base = SeededRng(seed)
    out = []
    for i in range(n):
        label = i % 4
        out.append(ImageRecord(_draw_shape(base.derive(i), label), label))
    return out


def synth_disks(n: int, seed: int, res: int = 32) -> list[tuple[np.ndarray, tuple[int, int, int, int]]]:
    """Bright disks on dark noise, with their (y0,x0,y1,x1) bounding boxes."""
    base = SeededRng(seed)
    out = []
    for i in range(n):
        rng = base.derive(i)
        yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
        cy = rng.uniform(0.3 * res, 0.7 * res)
        cx = rng.uniform(0.3 * res, 0.7 * res)
        r = rng.uniform(0.18 * res, 0.3 * res)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img = 0.03 + 0.06 * _noise(rng, (3, res, res))
        color = [rng.uniform(0.7, 1.0) for _ in range(3)]
        for c in range(3):
            img[c][mask] = color[c]
        bbox = (
            max(0, int(math.floor(cy - r))), max(0, int(math.floor(cx - r))),
            min(res, int(math.ceil(cy + r)) + 1), min(res, int(math.ceil(cx + r)) + 1),
        )
        out.append((np.clip(img, 0.0, 1.0).astype(np.float32), bbox))
    return out


def load_dataset(spec: str) -> list[ImageRecord]:
    """Dataset selector: ``cifar10:<path>`` or ``synth:<n>:<seed>``."""
    kind, _, rest = spec.partition(":")
    if kind == "cifar10":
        if not rest:
            raise DataError("cifar10 dataset spec needs a path")
        return load_cifar10(rest)
    if kind == "synth":
        parts = rest.split(":")
        if len(parts) not in (1, 2) or not parts[0]:
            raise DataError(f"bad synth spec {spec!r}, want synth:<n>[:<seed>]")
        n = int(parts[0])
        seed = int(parts[1]) if len(parts) == 2 else 0
        return synth_shapes(n, seed)
    raise DataError(f"unknown dataset kind {kind!r}")


def num_classes(records: list[ImageRecord]) -> int:
    return max(r.label for r in records) + 1


# ---------------------------------------------------------------------------
# augmentation primitives


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample of a (3,H,W) image."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    sy = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(sy - y0, 0.0, 1.0).astype(np.float32)
    wx = np.clip(sx - x0, 0.0, 1.0).astype(np.float32)

    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy[None, :, None]) + bot * wy[None, :, None]).astype(np.float32)


def random_resized_crop(img: np.ndarray, rng: SeededRng,
                        scale: tuple[float, float], out_res: int) -> np.ndarray:
    _, h, w = img.shape
    for _ in range(10):
        area = rng.uniform(scale[0], scale[1]) * h * w
        log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3))
        ratio = math.exp(log_ratio)
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 0 < ch <= h and 0 < cw <= w:
            top = rng.randint(h - ch + 1)
            left = rng.randint(w - cw + 1)
            return bilinear_resize(img[:, top : top + ch, left : left + cw],
                                   out_res, out_res)
    side = min(h, w)  # fallback: center crop
    top, left = (h - side) // 2, (w - side) // 2
    return bilinear_resize(img[:, top : top + side, left : left + side],
                           out_res, out_res)


_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    lum = np.tensordot(_GRAY, img, axes=([0], [0]))
    return np.repeat(lum[None], 3, axis=0).astype(np.float32)


# RGB <-> YIQ for vectorized hue rotation
_RGB2YIQ = np.array(
    [[0.299, 0.587, 0.114],
     [0.5959, -0.2746, -0.3213],
     [0.2115, -0.5227, 0.3112]], dtype=np.float32)
_YIQ2RGB = np.linalg.inv(_RGB2YIQ).astype(np.float32)


def color_jitter(img: np.ndarray, rng: SeededRng,
                 strength: tuple[float, float, float, float]) -> np.ndarray:
    sb, sc, ss, sh = strength
    out = img
    f = rng.uniform(max(0.0, 1 - sb), 1 + sb)  # brightness
    out = out * f
    f = rng.uniform(max(0.0, 1 - sc), 1 + sc)  # contrast about the gray mean
    mean = float(np.tensordot(_GRAY, out, axes=([0], [0])).mean())
    out = (out - mean) * f + mean
    f = rng.uniform(max(0.0, 1 - ss), 1 + ss)  # saturation
    gray = np.tensordot(_GRAY, out, axes=([0], [0]))[None]
    out = (out - gray) * f + gray
    theta = 2.0 * math.pi * rng.uniform(-sh, sh)  # hue rotation in YIQ
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    rot = np.array([[1, 0, 0], [0, cos_t, -sin_t], [0, sin_t, cos_t]], dtype=np.float32)
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    out = np.tensordot(m, out, axes=([1], [0]))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float, radius: int = 2) -> np.ndarray:
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps = (taps / taps.sum()).astype(np.float32)
    padded = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = sum(taps[i] * padded[:, i : i + img.shape[1], :] for i in range(len(taps)))
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = sum(taps[i] * padded[:, :, i : i + img.shape[2]] for i in range(len(taps)))
    return out.astype(np.float32)


def solarize(img: np.ndarray, threshold: float = SOLARIZE_THRESHOLD) -> np.ndarray:
    return np.where(img >= threshold, 1.0 - img, img).astype(np.float32)


# ---------------------------------------------------------------------------
# the per-view pipeline


def augment_view(pixels: np.ndarray, cfg: AugmentConfig, seed: int,
                 view_index: int) -> np.ndarray:
    """One deterministic augmented view. ``view_index`` in {1, 2} selects the
    asymmetric blur/solarize probabilities."""
    if view_index not in (1, 2):
        raise DataError(f"view_index must be 1 or 2, got {view_index}")
    if pixels.shape[1] < 8 or pixels.shape[2] < 8:
        raise DataError(f"image too small to augment: {pixels.shape}")
    rng = SeededRng(seed)
    out = random_resized_crop(pixels, rng, cfg.crop_scale, cfg.out_resolution)
    if rng.coin(cfg.flip_prob):
        out = out[:, :, ::-1].copy()
    if rng.coin(cfg.jitter_prob):
        out = color_jitter(out, rng, cfg.jitter_strength)
    if rng.coin(cfg.grayscale_prob):
        out = to_grayscale(out)
    if rng.coin(cfg.blur_prob[view_index - 1]):
        out = gaussian_blur(out, sigma=rng.uniform(0.1, 2.0))
    if rng.coin(cfg.solarize_prob[view_index - 1]):
        out = solarize(out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_view_pair(record: ImageRecord, cfg: AugmentConfig,
                   rng: SeededRng) -> ViewPair:
    seed1 = rng.next_u64()
    seed2 = rng.next_u64()
    return ViewPair(
        view1=augment_view(record.pixels, cfg, seed1, 1),
        view2=augment_view(record.pixels, cfg, seed2, 2),
        seed1=seed1,
        seed2=seed2,
    )
