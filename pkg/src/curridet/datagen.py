"""Procedural synthetic detection scenes and labelled/unlabelled splits.

Each scene renders up to K colored rounded rectangles ("animals", one hue
family per class) over a textured background; labels are the exact pixel
extents of each rendered shape. Background-colored occluder bars crossing
the objects provide a partial-occlusion difficulty dial. A split keeps a
fraction of scene ids labelled and hides the rest's labels from training
(they are retained for analysis tooling only).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .geometry import BBox
from .metrics import LabelSet, format_ground_truth, parse_ground_truth

BACKGROUND_RGB = (0.45, 0.45, 0.45)
CLASS_RGB = ((0.85, 0.30, 0.20), (0.20, 0.35, 0.85))


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 32
    count_probs: Tuple[float, ...] = (0.15, 0.45, 0.30, 0.10)  # P(0..3 objects)
    clutter: float = 0.15
    occlusion_prob: float = 0.3
    n_scenes: int = 2000
    obj_half_extent: Tuple[float, float] = (4.0, 8.0)  # pixels
    color_jitter: float = 0.15

    def __post_init__(self):
        if self.image_size <= 0 or self.n_scenes < 0:
            raise ValueError("sizes must be positive")
        if abs(sum(self.count_probs) - 1.0) > 1e-9:
            raise ValueError("object count probabilities must sum to 1")
        if not (0.0 <= self.occlusion_prob <= 1.0):
            raise ValueError("occlusion_prob must lie in [0, 1]")


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    labels: LabelSet
    scene_id: str


@dataclass(frozen=True)
class Split:
    labelled: Tuple[int, ...]
    unlabelled: Tuple[int, ...]
    labelled_ratio: float
    fold_seed: int


def _render_background(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    img = np.full((n, n, 3), BACKGROUND_RGB, dtype=float)
    if cfg.clutter > 0:
        # low-frequency texture: coarse noise upsampled by pixel repetition
        coarse = rng.uniform(-1.0, 1.0, (n // 4, n // 4, 3))
        tex = np.repeat(np.repeat(coarse, 4, axis=0), 4, axis=1)
        fine = rng.uniform(-1.0, 1.0, (n, n, 3))
        img += cfg.clutter * (0.6 * tex + 0.4 * fine)
    return np.clip(img, 0.0, 1.0)


def _object_mask(
    n: int, cx: float, cy: float, rx: float, ry: float
) -> np.ndarray:
    ys, xs = np.mgrid[0:n, 0:n]
    # superellipse exponent 4 gives the rounded-rectangle silhouette
    return ((np.abs(xs - cx) / rx) ** 4 + (np.abs(ys - cy) / ry) ** 4) <= 1.0


def _render_scene(cfg: DatasetConfig, rng: np.random.Generator, scene_id: str) -> Scene:
    n = cfg.image_size
    img = _render_background(cfg, rng)
    n_obj = int(rng.choice(len(cfg.count_probs), p=cfg.count_probs))
    boxes: List[BBox] = []
    classes: List[int] = []
    for _ in range(n_obj):
        rx = rng.uniform(*cfg.obj_half_extent)
        ry = rng.uniform(*cfg.obj_half_extent)
        cx = rng.uniform(rx, n - 1 - rx)
        cy = rng.uniform(ry, n - 1 - ry)
        cls = int(rng.integers(0, len(CLASS_RGB)))
        color = np.array(CLASS_RGB[cls])
        color = np.clip(
            color * (1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)),
            0.0,
            1.0,
        )
        mask = _object_mask(n, cx, cy, rx, ry)
        if not mask.any():
            continue
        img[mask] = color
        ys, xs = np.nonzero(mask)
        boxes.append(
            BBox(xs.min() / n, ys.min() / n, (xs.max() + 1) / n, (ys.max() + 1) / n)
        )
        classes.append(cls)
        if rng.random() < cfg.occlusion_prob:
            # background-colored bar crossing the object
            width = int(rng.integers(2, 5))
            pos = int(round(rng.uniform(cx - rx * 0.6, cx + rx * 0.6)))
            if rng.random() < 0.5:
                img[:, max(0, pos) : max(0, pos) + width] = BACKGROUND_RGB
            else:
                pos = int(round(rng.uniform(cy - ry * 0.6, cy + ry * 0.6)))
                img[max(0, pos) : max(0, pos) + width, :] = BACKGROUND_RGB
    return Scene(img, LabelSet(boxes, classes), scene_id)


def generate_dataset(cfg: DatasetConfig, seed: int, id_prefix: str = "s") -> List[Scene]:
    """Deterministic per seed; each scene gets an independent RNG stream."""
    streams = np.random.SeedSequence(seed).spawn(cfg.n_scenes)
    return [
        _render_scene(cfg, np.random.Generator(np.random.PCG64(s)), f"{id_prefix}{i:06d}")
        for i, s in enumerate(streams)
    ]


def split_pld(
    scenes: Sequence[Scene], labelled_ratio: float, fold_seed: int
) -> Split:
    """Uniform random partition into labelled/unlabelled scene indices."""
    if not (0.0 < labelled_ratio <= 1.0):
        raise ValueError("labelled_ratio must lie in (0, 1]")
    n = len(scenes)
    n_lab = int(round(labelled_ratio * n))
    if n_lab == 0:
        raise ValueError("labelled split is empty")
    rng = np.random.Generator(np.random.PCG64(fold_seed))
    perm = rng.permutation(n)
    return Split(
        labelled=tuple(sorted(int(i) for i in perm[:n_lab])),
        unlabelled=tuple(sorted(int(i) for i in perm[n_lab:])),
        labelled_ratio=labelled_ratio,
        fold_seed=fold_seed,
    )


# seed-pinned standard benchmark: 2000 train / 200 val / 400 test
BENCHMARK_SEEDS = {"train": 917001, "val": 917002, "test": 917003}


def standard_benchmark(
    cfg: DatasetConfig = DatasetConfig(),
    sizes: Tuple[int, int, int] = (2000, 200, 400),
) -> Tuple[List[Scene], List[Scene], List[Scene]]:
    parts = []
    for name, size in zip(("train", "val", "test"), sizes):
        part_cfg = DatasetConfig(
            image_size=cfg.image_size,
            count_probs=cfg.count_probs,
            clutter=cfg.clutter,
            occlusion_prob=cfg.occlusion_prob,
            n_scenes=size,
            obj_half_extent=cfg.obj_half_extent,
            color_jitter=cfg.color_jitter,
        )
        parts.append(
            generate_dataset(part_cfg, BENCHMARK_SEEDS[name], id_prefix=name[0])
        )
    return tuple(parts)


def config_hash(cfg: DatasetConfig, seed: int) -> str:
    payload = json.dumps({"config": asdict(cfg), "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_dataset(directory, scenes: Sequence[Scene], cfg: DatasetConfig, seed: int) -> None:
    """Directory layout: images.npy (N,H,W,3 float32), labels.txt in the
    record format, manifest.json with the seed and config hash."""
    os.makedirs(directory, exist_ok=True)
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    np.save(os.path.join(directory, "images.npy"), images)
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        fh.write(format_ground_truth((s.scene_id, s.labels) for s in scenes))
    manifest = {
        "config": asdict(cfg),
        "seed": seed,
        "hash": config_hash(cfg, seed),
        "scene_ids": [s.scene_id for s in scenes],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(directory) -> Tuple[List[Scene], Dict]:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    images = np.load(os.path.join(directory, "images.npy")).astype(float)
    with open(os.path.join(directory, "labels.txt")) as fh:
        labels = parse_ground_truth(fh.read())
    scenes = [
        Scene(images[i], labels.get(sid, LabelSet()), sid)
        for i, sid in enumerate(manifest["scene_ids"])
    ]
    return scenes, manifest
