"""Weak and strong augmentation pipelines over synthetic scenes.

Geometric steps are quantized to the pixel grid so the recorded
GeomTransform maps label boxes exactly onto the transformed image. Color
jitter and random-erase never touch labels. The strong pipeline applies, in
order: box-aware crop/resize, horizontal flip, translate, color jitter,
random erase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import (
    MIN_VISIBLE_FRACTION,
    BBox,
    GeomTransform,
    apply_transforms,
)
from .metrics import LabelSet

# crop windows must keep at least this fraction of some label box visible
BOX_AWARE_MIN_VISIBLE = 0.5
BOX_AWARE_MAX_TRIES = 20


@dataclass(frozen=True)
class AugConfig:
    """Intensities and op toggles for the weak/strong pipelines.

    The intensity scalars multiply every magnitude of their pipeline;
    intensity 0 turns the pipeline into the identity.
    """

    weak_intensity: float = 0.5
    strong_intensity: float = 1.0
    flip: bool = True
    translate: bool = True
    crop: bool = True
    jitter: bool = True
    erase: bool = True
    weak_translate: float = 0.05
    weak_jitter: float = 0.05
    strong_crop_scale: Tuple[float, float] = (0.6, 1.0)
    strong_translate: float = 0.15
    strong_jitter: float = 0.25
    erase_count: Tuple[int, int] = (1, 3)
    erase_size: Tuple[float, float] = (0.05, 0.15)

    def validate(self) -> None:
        if not (0.0 <= self.weak_intensity <= 1.0 and 0.0 <= self.strong_intensity <= 1.0):
            raise ValueError("intensities must lie in [0, 1]")
        if self.weak_intensity >= self.strong_intensity and self.strong_intensity > 0:
            raise ValueError("weak intensity must be below strong intensity")
        if not (0 < self.erase_size[0] <= self.erase_size[1] <= 1):
            raise ValueError("erase size range must lie within the frame")

    @staticmethod
    def disabled() -> "AugConfig":
        return AugConfig(
            weak_intensity=0.0,
            strong_intensity=0.0,
            flip=False,
            translate=False,
            crop=False,
            jitter=False,
            erase=False,
        )


@dataclass(frozen=True)
class AugOutcome:
    image: np.ndarray
    transforms: Tuple[GeomTransform, ...]
    color_ops: Tuple[str, ...] = ()


def _flip_image(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def _translate_image(img: np.ndarray, px: int, py: int) -> np.ndarray:
    h, w = img.shape[:2]
    pad = max(abs(px), abs(py))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return padded[pad - py : pad - py + h, pad - px : pad - px + w].copy()


def _crop_resize_image(img: np.ndarray, window: BBox) -> np.ndarray:
    h, w = img.shape[:2]
    x0 = int(round(window.xmin * w))
    x1 = int(round(window.xmax * w))
    y0 = int(round(window.ymin * h))
    y1 = int(round(window.ymax * h))
    xs = x0 + ((np.arange(w) + 0.5) * (x1 - x0) / w).astype(int)
    ys = y0 + ((np.arange(h) + 0.5) * (y1 - y0) / h).astype(int)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    return img[np.ix_(ys, xs)].copy()


def _quantized_window(window: BBox, h: int, w: int) -> Optional[BBox]:
    """Snap a crop window to the pixel grid so image and label mappings
    agree exactly."""
    x0 = int(round(window.xmin * w))
    x1 = int(round(window.xmax * w))
    y0 = int(round(window.ymin * h))
    y1 = int(round(window.ymax * h))
    if x1 - x0 < 2 or y1 - y0 < 2:
        return None
    return BBox(x0 / w, y0 / h, x1 / w, y1 / h)


def _quantized_shift(d: float, n: int) -> float:
    return round(d * n) / n


def _color_jitter(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    scale = 1.0 + rng.uniform(-strength, strength, size=3)
    shift = rng.uniform(-strength, strength, size=3)
    return np.clip(img * scale + shift, 0.0, 1.0)


def _random_erase(
    img: np.ndarray, cfg: AugConfig, rng: np.random.Generator
) -> np.ndarray:
    h, w = img.shape[:2]
    out = img.copy()
    n = int(rng.integers(cfg.erase_count[0], cfg.erase_count[1] + 1))
    for _ in range(n):
        ew = max(1, int(rng.uniform(*cfg.erase_size) * w))
        eh = max(1, int(rng.uniform(*cfg.erase_size) * h))
        x0 = int(rng.integers(0, w - ew + 1))
        y0 = int(rng.integers(0, h - eh + 1))
        out[y0 : y0 + eh, x0 : x0 + ew] = rng.random((eh, ew, 3))
    return out


def weak_augment(
    image: np.ndarray, cfg: AugConfig, rng: np.random.Generator
) -> AugOutcome:
    """Low-intensity flip/translate plus mild color jitter; never erases."""
    h, w = image.shape[:2]
    k = cfg.weak_intensity
    img = image
    transforms: List[GeomTransform] = []
    color_ops: List[str] = []
    if cfg.flip and k > 0 and rng.random() < 0.5:
        img = _flip_image(img)
        transforms.append(GeomTransform("hflip"))
    if cfg.translate and k > 0:
        amp = cfg.weak_translate * k
        dx = _quantized_shift(rng.uniform(-amp, amp), w)
        dy = _quantized_shift(rng.uniform(-amp, amp), h)
        if dx != 0.0 or dy != 0.0:
            img = _translate_image(img, int(round(dx * w)), int(round(dy * h)))
            transforms.append(GeomTransform("translate", dx=dx, dy=dy))
    if cfg.jitter and k > 0:
        img = _color_jitter(img, cfg.weak_jitter * k, rng)
        color_ops.append("jitter")
    if img is image:
        img = image.copy()
    return AugOutcome(img, tuple(transforms), tuple(color_ops))


def _sample_box_aware_window(
    labels: LabelSet, cfg: AugConfig, rng: np.random.Generator, h: int, w: int
) -> Optional[BBox]:
    lo, hi = cfg.strong_crop_scale
    lo = 1.0 - (1.0 - lo) * cfg.strong_intensity
    for _ in range(BOX_AWARE_MAX_TRIES):
        sx = rng.uniform(lo, hi)
        sy = rng.uniform(lo, hi)
        x0 = rng.uniform(0.0, 1.0 - sx)
        y0 = rng.uniform(0.0, 1.0 - sy)
        window = _quantized_window(BBox(x0, y0, x0 + sx, y0 + sy), h, w)
        if window is None:
            continue
        if len(labels) == 0:
            return window
        for b in labels.boxes:
            if b.area <= 0:
                continue
            vx = min(b.xmax, window.xmax) - max(b.xmin, window.xmin)
            vy = min(b.ymax, window.ymax) - max(b.ymin, window.ymin)
            if vx > 0 and vy > 0 and vx * vy >= BOX_AWARE_MIN_VISIBLE * b.area:
                return window
    return None  # fall back to full frame


def strong_augment(
    image: np.ndarray,
    labels: LabelSet,
    cfg: AugConfig,
    rng: np.random.Generator,
) -> Tuple[AugOutcome, LabelSet]:
    """High-intensity pipeline with a box-aware crop; labels are mapped
    through the geometric record and crop-removed boxes are dropped."""
    h, w = image.shape[:2]
    k = cfg.strong_intensity
    img = image
    transforms: List[GeomTransform] = []
    color_ops: List[str] = []
    if cfg.crop and k > 0:
        window = _sample_box_aware_window(labels, cfg, rng, h, w)
        if window is not None and window.area < 1.0:
            img = _crop_resize_image(img, window)
            transforms.append(GeomTransform("crop_resize", window=window))
    if cfg.flip and k > 0 and rng.random() < 0.5:
        img = _flip_image(img)
        transforms.append(GeomTransform("hflip"))
    if cfg.translate and k > 0:
        amp = cfg.strong_translate * k
        dx = _quantized_shift(rng.uniform(-amp, amp), w)
        dy = _quantized_shift(rng.uniform(-amp, amp), h)
        if dx != 0.0 or dy != 0.0:
            shift = GeomTransform("translate", dx=dx, dy=dy)
            # skip the shift if it would wipe out every surviving label
            candidate = transforms + [shift]
            survivors = any(
                apply_transforms(candidate, b) is not None for b in labels.boxes
            )
            if survivors or len(labels) == 0:
                img = _translate_image(img, int(round(dx * w)), int(round(dy * h)))
                transforms.append(shift)
    if cfg.jitter and k > 0:
        img = _color_jitter(img, cfg.strong_jitter * k, rng)
        color_ops.append("jitter")
    if cfg.erase and k > 0:
        img = _random_erase(img, cfg, rng)
        color_ops.append("erase")
    if img is image:
        img = image.copy()

    out_boxes = []
    out_classes = []
    for b, c in zip(labels.boxes, labels.classes):
        mapped = apply_transforms(transforms, b, min_visible=MIN_VISIBLE_FRACTION)
        if mapped is not None:
            out_boxes.append(mapped)
            out_classes.append(c)
    return (
        AugOutcome(img, tuple(transforms), tuple(color_ops)),
        LabelSet(out_boxes, out_classes),
    )
