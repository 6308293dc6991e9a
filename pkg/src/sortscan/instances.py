"""Instance extraction from the two decoder heads, plus mask rendering
and export.

The semantic head predicts three channels (foreground, background,
contour). Seeds are the connected components of foreground-argmax pixels;
every non-background pixel (foreground or contour) is then assigned to its
geodesically nearest seed by multi-source BFS inside the non-background
region, so contour rings between touching nuclei and around nucleus
borders rejoin their instance. Non-background pixels unreachable from any
seed are dropped. Instance class is the majority vote of the per-pixel
class argmax (background channel excluded).
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FG, BG, CONTOUR = 0, 1, 2  # semantic channel order


@dataclass
class InstanceMask:
    """Integer id grid (0 = background) plus per-instance class ids."""

    labels: np.ndarray          # (H, W) int32, ids form {1..K}
    classes: dict[int, int]     # instance id -> class id

    @property
    def num_instances(self) -> int:
        return len(self.classes)

    def validate(self) -> None:
        ids = np.unique(self.labels)
        ids = ids[ids > 0]
        expected = np.arange(1, len(ids) + 1)
        if not np.array_equal(ids, expected):
            raise ValueError(f"instance ids not contiguous: {ids}")
        missing = [int(i) for i in ids if int(i) not in self.classes]
        if missing:
            raise ValueError(f"instances without class entries: {missing}")

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "InstanceMask":
        return cls(labels=np.zeros(shape, dtype=np.int32), classes={})


_N4 = ((-1, 0), (0, -1), (0, 1), (1, 0))  # fixed neighbor order: deterministic BFS


def extract_instances(semantic_probs: np.ndarray, class_probs: np.ndarray) -> InstanceMask:
    """Post-process (3, H, W) semantic and (NC+1, H, W) class probabilities."""
    if semantic_probs.shape[1:] != class_probs.shape[1:]:
        raise ValueError("semantic and class maps must share spatial dims")
    sem_arg = semantic_probs.argmax(axis=0)
    region = sem_arg != BG
    seeds = (sem_arg == FG)

    seed_labels, _ = ndimage.label(seeds)  # 4-connectivity
    h, w = region.shape
    labels = np.zeros((h, w), dtype=np.int32)
    queue: deque[tuple[int, int]] = deque()
    for r, c in zip(*np.nonzero(seed_labels)):
        labels[r, c] = seed_labels[r, c]
        queue.append((int(r), int(c)))
    while queue:
        r, c = queue.popleft()
        lab = labels[r, c]
        for dr, dc in _N4:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and region[rr, cc] and labels[rr, cc] == 0:
                labels[rr, cc] = lab
                queue.append((rr, cc))

    # relabel to a contiguous id set in raster first-occurrence order
    out = np.zeros_like(labels)
    classes: dict[int, int] = {}
    cls_arg = class_probs[1:].argmax(axis=0) + 1  # vote over non-background channels
    flat = labels.reshape(-1)
    ids, first = np.unique(flat, return_index=True)
    raster_ids = [int(i) for i in ids[np.argsort(first)] if i > 0]
    remap = {old: new for new, old in enumerate(raster_ids, start=1)}
    for old, new in remap.items():
        pix = labels == old
        out[pix] = new
        votes = np.bincount(cls_arg[pix])
        classes[new] = int(votes.argmax())
    return InstanceMask(labels=out, classes=classes)


def render_semantic(mask: InstanceMask) -> np.ndarray:
    """One-hot (3, H, W) rendering: contour = boundary pixels of each
    instance (4-neighbors outside the instance), foreground = interior."""
    labels = mask.labels
    h, w = labels.shape
    padded = np.pad(labels, 1, mode="constant")
    boundary = np.zeros((h, w), dtype=bool)
    for dr, dc in _N4:
        shifted = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        boundary |= (labels > 0) & (shifted != labels)
    out = np.zeros((3, h, w), dtype=np.float64)
    out[CONTOUR] = boundary
    out[FG] = (labels > 0) & ~boundary
    out[BG] = labels == 0
    return out


def render_class_probs(mask: InstanceMask, num_classes: int) -> np.ndarray:
    out = np.zeros((num_classes + 1, *mask.labels.shape), dtype=np.float64)
    out[0] = mask.labels == 0
    for inst, cls in mask.classes.items():
        out[cls][mask.labels == inst] = 1.0
    return out


def semantic_target(instance_mask: np.ndarray) -> np.ndarray:
    """Integer (H, W) training target in {FG, BG, CONTOUR} channel codes."""
    rendered = render_semantic(InstanceMask(labels=np.asarray(instance_mask, dtype=np.int32),
                                            classes={}))
    return rendered.argmax(axis=0)


def save_instance_mask(path_png: str, mask: InstanceMask) -> None:
    """16-bit PNG of ids plus a '<id> <class>' sidecar text table."""
    from PIL import Image

    Image.fromarray(mask.labels.astype(np.uint16)).save(path_png)
    sidecar = os.path.splitext(path_png)[0] + ".classes.txt"
    with open(sidecar, "w") as fh:
        for inst in sorted(mask.classes):
            fh.write(f"{inst} {mask.classes[inst]}\n")


def load_instance_mask(path_png: str) -> InstanceMask:
    from PIL import Image

    labels = np.asarray(Image.open(path_png), dtype=np.int32)
    sidecar = os.path.splitext(path_png)[0] + ".classes.txt"
    classes: dict[int, int] = {}
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            for line in fh:
                inst, cls = line.split()
                classes[int(inst)] = int(cls)
    return InstanceMask(labels=labels, classes=classes)
