"""Reproducible synthetic nuclei-style images with controllable class
imbalance: non-overlapping ellipses on a textured background, each class
with its own chroma, plus additive noise so color lookup alone cannot
solve the task.

Dataset directory layout (the on-disk contract):
    manifest.txt             header lines "# key=value", then one line per
                             sample: "<id> <image> <instances> <classes> seed=<s>"
    images/<id>.png          8-bit RGB
    instances/<id>.png       16-bit grayscale instance ids (0 = background)
    classes/<id>.png         16-bit grayscale class ids (0 = background)
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image


@dataclass
class SynthConfig:
    image_size: int = 128
    num_classes: int = 3
    num_images: int = 8
    instances_min: int = 6
    instances_max: int = 12
    prevalence: tuple[float, ...] = (0.475, 0.475, 0.05)
    radius_min: int = 5
    radius_max: int = 11
    margin: int = 2           # minimum gap between instances, pixels
    noise_level: float = 0.04
    chroma_jitter: float = 0.05
    tint_range: float = 0.0   # per-image global chroma shift (stain-style drift)
    colors: tuple[tuple[float, float, float], ...] | None = None  # per-class chroma override
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.prevalence) != self.num_classes:
            raise ValueError(f"prevalence has {len(self.prevalence)} entries "
                             f"for {self.num_classes} classes")
        if self.colors is not None and len(self.colors) != self.num_classes:
            raise ValueError("colors must list one RGB triple per class")
        if abs(sum(self.prevalence) - 1.0) > 1e-6:
            raise ValueError("prevalence must sum to 1")
        if self.radius_min < 3 or self.radius_max < self.radius_min:
            raise ValueError("ellipse radii must satisfy 3 <= min <= max")
        if self.instances_min < 1 or self.instances_max < self.instances_min:
            raise ValueError("bad instance count range")


# distinct base chroma per class id (1-based); cycled if more classes
_CLASS_COLORS = np.array([
    [0.55, 0.25, 0.60],   # purple
    [0.20, 0.55, 0.30],   # green
    [0.75, 0.45, 0.15],   # orange
    [0.20, 0.35, 0.70],   # blue
    [0.70, 0.20, 0.25],   # red
])
_BACKGROUND = np.array([0.92, 0.88, 0.90])


@dataclass
class Sample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    instance_mask: np.ndarray  # (H, W) int32, 0 = background
    class_mask: np.ndarray     # (H, W) int16, 0 = background
    seed: int

    def block_labels(self, scales: list[int], num_classes: int):
        from .prompt import generate_labels

        return [generate_labels(self.class_mask, s, num_classes) for s in scales]


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float,
                  theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy - cy
    x = xx - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = (x * ct + y * st) / rx
    v = (-x * st + y * ct) / ry
    return (u * u + v * v) <= 1.0


def _dilate(mask: np.ndarray, it: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(mask, iterations=it) if it > 0 else mask


def generate_sample(cfg: SynthConfig, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    instance = np.zeros((size, size), dtype=np.int32)
    classes = np.zeros((size, size), dtype=np.int16)
    occupied = np.zeros((size, size), dtype=bool)

    target = int(rng.integers(cfg.instances_min, cfg.instances_max + 1))
    placed = 0
    prev = np.asarray(cfg.prevalence)
    for _ in range(target):
        ok = False
        for _attempt in range(60):
            ry = rng.uniform(cfg.radius_min, cfg.radius_max)
            rx = rng.uniform(cfg.radius_min, cfg.radius_max)
            cy = rng.uniform(ry + 1, size - ry - 1)
            cx = rng.uniform(rx + 1, size - rx - 1)
            theta = rng.uniform(0, np.pi)
            blob = _ellipse_mask(size, cy, cx, ry, rx, theta)
            if not (occupied & _dilate(blob, cfg.margin)).any():
                ok = True
                break
        if not ok:
            warnings.warn(f"placement failed after retries; sample has {placed} "
                          f"of {target} instances")
            break
        placed += 1
        cls = int(rng.choice(cfg.num_classes, p=prev)) + 1
        instance[blob] = placed
        classes[blob] = cls
        occupied |= blob

    palette = (np.asarray(cfg.colors) if cfg.colors is not None
               else _CLASS_COLORS[np.arange(cfg.num_classes) % len(_CLASS_COLORS)])
    tint = rng.uniform(-cfg.tint_range, cfg.tint_range, 3) if cfg.tint_range else 0.0
    image = np.empty((size, size, 3))
    image[:] = np.clip(_BACKGROUND + tint, 0, 1)
    for k in range(1, placed + 1):
        blob = instance == k
        base = palette[classes[blob][0] - 1]
        jitter = rng.normal(0, cfg.chroma_jitter, 3)
        image[blob] = np.clip(base + tint + jitter, 0, 1)
    image += rng.normal(0, cfg.noise_level, image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return Sample(image=image, instance_mask=instance, class_mask=classes, seed=seed)


def generate(cfg: SynthConfig) -> list[Sample]:
    """Deterministic dataset: per-sample seeds are spawned from cfg.seed."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.num_images)
    return [generate_sample(cfg, int(s)) for s in seeds]


def split(samples: list[Sample], train_frac: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Disjoint, exhaustive, seed-deterministic train/test split."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(samples))
    k = int(round(train_frac * len(samples)))
    if k == 0 or k == len(samples):
        raise ValueError("split would leave one side empty")
    train = [samples[i] for i in order[:k]]
    test = [samples[i] for i in order[k:]]
    return train, test


# -- disk I/O -------------------------------------------------------------------

def _save_png16(path: str, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _load_png16(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int32)


def save_class_mask_text(path: str, mask: np.ndarray) -> None:
    """Plain-text grid alternative: rows of space-separated integers."""
    np.savetxt(path, mask, fmt="%d")


def load_class_mask_text(path: str) -> np.ndarray:
    return np.loadtxt(path, dtype=np.int64, ndmin=2)


def save_dataset(path: str, samples: list[Sample], cfg: SynthConfig,
                 meta: dict[str, str] | None = None) -> None:
    for sub in ("images", "instances", "classes"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append(f"# image_size={cfg.image_size} num_classes={cfg.num_classes} seed={cfg.seed}")
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        Image.fromarray((s.image * 255).round().astype(np.uint8)).save(
            os.path.join(path, "images", f"{sid}.png"))
        _save_png16(os.path.join(path, "instances", f"{sid}.png"), s.instance_mask)
        _save_png16(os.path.join(path, "classes", f"{sid}.png"), s.class_mask)
        lines.append(f"{sid} images/{sid}.png instances/{sid}.png classes/{sid}.png seed={s.seed}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> tuple[list[Sample], dict[str, str]]:
    with open(os.path.join(path, "manifest.txt")) as fh:
        lines = fh.read().splitlines()
    meta: dict[str, str] = {}
    samples = []
    for line in lines:
        if not line.strip():
            continue
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
            continue
        sid, img, inst, cls, seed_tok = line.split()
        image = np.asarray(Image.open(os.path.join(path, img)), dtype=np.float32) / 255.0
        samples.append(Sample(
            image=image,
            instance_mask=_load_png16(os.path.join(path, inst)).astype(np.int32),
            class_mask=_load_png16(os.path.join(path, cls)).astype(np.int16),
            seed=int(seed_tok.split("=")[1]),
        ))
    return samples, meta
