"""Patch embedding, class-activation gating, the block-level multi-label
prediction head, and per-window multi-class label generation.

The label generator is the supervision side: for a block scale s, cell
(r, c) of the label grid holds one bit per class, set iff that class
occurs anywhere in the corresponding s x s window of the ground-truth
class mask. Background (0) never sets a bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class TokenGrid:
    """Spatially arranged feature tokens, row-major, (h, w, channels)."""

    data: Tensor
    scale: int  # input pixels covered by one token edge

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def tokens(self) -> int:
        return self.height * self.width

    def flat(self) -> Tensor:
        return self.data.reshape(self.tokens, self.channels)

    def with_data(self, data: Tensor) -> "TokenGrid":
        return TokenGrid(data=data, scale=self.scale)

    @classmethod
    def from_flat(cls, flat: Tensor, height: int, width: int, scale: int) -> "TokenGrid":
        return cls(data=flat.reshape(height, width, flat.shape[1]), scale=scale)


@dataclass
class ClassProbMap:
    """Per-class probability grid, (h, w, num_classes), values in [0, 1]."""

    data: Tensor
    scale: int

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    def flat(self) -> Tensor:
        h, w, c = self.data.shape
        return self.data.reshape(h * w, c)


@dataclass
class MultiClassLabel:
    """Binary occupancy grid, (h, w, num_classes); channel k is class k+1."""

    grid: np.ndarray
    scale: int


def to_nchw(grid: TokenGrid) -> Tensor:
    return grid.data.transpose(2, 0, 1).reshape(1, grid.channels, grid.height, grid.width)


def from_nchw(x: Tensor, scale: int) -> TokenGrid:
    _, c, h, w = x.shape
    return TokenGrid(data=x.reshape(c, h, w).transpose(1, 2, 0), scale=scale)


class PatchEmbed:
    """4x4 patch projection plus a learned positional table.

    Positional fusion is additive by default; "concat" splits the embedding
    width between projected patches and the positional table.
    """

    def __init__(self, in_channels: int, dim: int, grid_h: int, grid_w: int,
                 rng: np.random.Generator, patch: int = 4, mode: str = "add",
                 dtype=np.float32):
        if mode not in ("add", "concat"):
            raise ValueError(f"PatchEmbed: unknown positional mode {mode!r}")
        if mode == "concat" and dim % 2:
            raise ValueError("PatchEmbed: concat mode needs an even dim")
        self.patch = patch
        self.mode = mode
        proj_out = dim if mode == "add" else dim // 2
        pos_dim = dim if mode == "add" else dim // 2
        fan_in = patch * patch * in_channels
        self.proj = Tensor(nn.glorot(rng, (fan_in, proj_out), fan_in, dtype), requires_grad=True)
        self.pos = Tensor((rng.standard_normal((grid_h * grid_w, pos_dim)) * 0.02).astype(dtype),
                          requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.proj": self.proj, f"{prefix}.pos": self.pos}

    def __call__(self, image: Tensor) -> TokenGrid:
        h, w, c = image.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"patch_embed: image {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        patches = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
        tok = ad.matmul(patches, self.proj)
        if self.mode == "add":
            tok = tok + self.pos
        else:
            tok = ad.concat([tok, self.pos], axis=1)
        return TokenGrid.from_flat(tok, gh, gw, scale=p)


class ClassActivation:
    """Gate tokens by the sigmoid of a 1x1 convolution of themselves."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Tensor(nn.glorot(rng, (dim, dim, 1, 1), dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        x = to_nchw(grid)
        gate = ad.sigmoid(nn.conv2d(x, self.w, self.b))
        return from_nchw(x * gate, grid.scale)


class PromptHead:
    """Class-related projection and the down-sampled multi-label head.

    x_c = conv3x3(CA(x_e)) with one output channel per class; the
    probability map is sigmoid(pool(x_c, 4)), so each probability cell
    summarizes a (4 * token scale)-pixel window of the input.
    """

    def __init__(self, dim: int, num_classes: int, ca: ClassActivation,
                 rng: np.random.Generator, pool_mode: str = "average",
                 dtype=np.float32):
        self.ca = ca
        self.num_classes = num_classes
        self.pool_mode = pool_mode
        self.w = Tensor(nn.glorot(rng, (num_classes, dim, 3, 3), dim * 9, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def __call__(self, x_e: TokenGrid) -> tuple[TokenGrid, ClassProbMap]:
        if x_e.height % 4 or x_e.width % 4:
            raise ValueError(f"prompt_head: token grid {x_e.height}x{x_e.width} not divisible by 4")
        gated = self.ca(x_e)
        x_c = nn.conv2d(to_nchw(gated), self.w, self.b)
        pooled = nn.pool_downsample(x_c, 4, mode=self.pool_mode)
        probs = ad.sigmoid(pooled)
        x_c_grid = from_nchw(x_c, x_e.scale)
        prob_map = ClassProbMap(data=from_nchw(probs, x_e.scale * 4).data, scale=x_e.scale * 4)
        return x_c_grid, prob_map


def generate_labels(mask: np.ndarray, scale: int, num_classes: int) -> MultiClassLabel:
    """Window-occupancy labels: bit (r, c, i) set iff class i+1 appears in
    the (r, c) scale-sized window. Vectorized over windows."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("generate_labels: mask must be 2-d")
    h, w = mask.shape
    if h % scale or w % scale:
        raise ValueError(f"generate_labels: mask {h}x{w} not divisible by scale {scale}")
    if mask.min() < 0 or mask.max() > num_classes:
        raise ValueError(f"generate_labels: class ids must lie in 0..{num_classes}")
    blocks = mask.reshape(h // scale, scale, w // scale, scale)
    grid = np.zeros((h // scale, w // scale, num_classes), dtype=np.uint8)
    for i in range(1, num_classes + 1):
        grid[:, :, i - 1] = (blocks == i).any(axis=(1, 3))
    return MultiClassLabel(grid=grid, scale=scale)


def generate_labels_reference(mask: np.ndarray, scale: int, num_classes: int) -> np.ndarray:
    """Literal quadruple-loop evaluation; the oracle the fast path is held to."""
    h, w = mask.shape
    out = np.zeros((h // scale, w // scale, num_classes), dtype=np.uint8)
    for i in range(1, num_classes + 1):
        for r in range(0, h, scale):
            for c in range(0, w, scale):
                found = False
                for rr in range(r, r + scale):
                    for cc in range(c, c + scale):
                        if mask[rr, cc] == i:
                            found = True
                            break
                    if found:
                        break
                if found:
                    out[r // scale, c // scale, i - 1] = 1
    return out


def prompt_loss(probs: ClassProbMap, label: MultiClassLabel) -> Tensor:
    """Mean per-class binary cross-entropy over all label-grid cells."""
    if probs.data.shape != label.grid.shape:
        raise ValueError(
            f"prompt_loss: probability grid {probs.data.shape} vs label grid {label.grid.shape}")
    return nn.binary_cross_entropy(probs.data, label.grid)
