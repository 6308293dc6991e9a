"""The full encoder-decoder: four sort-then-scan encoder blocks with
per-block prompt supervision, 2x2 patch merging between blocks, and two
parallel decoder branches (3-way semantic and per-class heads).

Block layout (interpretation; residual wiring is a design choice):
    layer norm -> prompt head (probability map + block loss)
               -> phenotype fusion -> per-class sorted scan -> residual add
    layer norm -> feedforward -> residual add
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .instances import semantic_target
from .prompt import (ClassActivation, ClassProbMap, MultiClassLabel, PatchEmbed,
                     PromptHead, TokenGrid, from_nchw, generate_labels, to_nchw)
from .sorting import PhenotypeFusion, aggregate_ordered, aggregate_scan, baseline_order
from .ssm import SCAN_IMPLS, SSMParams, init_ssm_params

ORDERINGS = ("probability_sorted", "bidirectional", "cross_scan", "raster")


@dataclass
class ModelConfig:
    num_classes: int = 3
    channels: int = 32
    blocks: int = 4
    image_size: int = 128
    state_dim: int = 16
    fusion_weight: float = 0.2      # phenotype mixing
    alpha: float = 1.0              # semantic loss weight
    beta: float = 1.0               # classification loss weight
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_norm: float = 10.0        # global gradient-norm bound, 0 disables
    iterations: int = 1000
    seed: int = 0
    ordering: str = "probability_sorted"
    sorting_on: bool = True
    phenotype_on: bool = True
    share_ca: bool = True           # share class-activation weights between heads
    shared_ssm: bool = False        # one scan parameter set for all routes
    pos_mode: str = "add"
    skip_source: str = "pre_scan"   # decoder skips from block inputs or outputs
    skip_connections: bool = True
    scan_impl: str = "sequential"
    pool_mode: str = "average"
    ffn_expand: int = 2
    dtype: str = "float32"
    log_every: int = 10

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        need = (2 ** (self.blocks + 1)) * 4
        if self.image_size % need:
            raise ValueError(f"image_size {self.image_size} must be divisible by "
                             f"{need} for {self.blocks} blocks")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}")
        if self.scan_impl not in SCAN_IMPLS:
            raise ValueError(f"unknown scan_impl {self.scan_impl!r}")
        if self.skip_source not in ("pre_scan", "post_scan"):
            raise ValueError(f"unknown skip_source {self.skip_source!r}")
        if not 0.0 <= self.fusion_weight <= 1.0:
            raise ValueError("fusion_weight must lie in [0, 1]")

    @property
    def effective_ordering(self) -> str:
        return self.ordering if self.sorting_on else "raster"

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def block_scales(self) -> list[int]:
        return [16 * (2 ** b) for b in range(self.blocks)]


@dataclass
class ModelOutput:
    semantic: Tensor                 # (1, 3, H, W) logits
    classes: Tensor                  # (1, NC+1, H, W) logits
    prob_maps: list[ClassProbMap]    # per-block probability grids
    prompt_loss: Tensor


@dataclass
class Targets:
    semantic: np.ndarray             # (H, W) ints in {FG, BG, CONTOUR}
    classes: np.ndarray              # (H, W) ints in 0..NC
    block_labels: list[MultiClassLabel]

    @classmethod
    def from_sample(cls, sample, cfg: ModelConfig) -> "Targets":
        return cls(
            semantic=semantic_target(sample.instance_mask),
            classes=np.asarray(sample.class_mask, dtype=np.int64),
            block_labels=[generate_labels(sample.class_mask, s, cfg.num_classes)
                          for s in cfg.block_scales()],
        )


class EncoderBlock:
    def __init__(self, dim: int, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype
        self.cfg = cfg
        self.dim = dim
        self.ln1_g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.ca = ClassActivation(dim, rng, dtype=dtype)
        fusion_ca = self.ca if cfg.share_ca else ClassActivation(dim, rng, dtype=dtype)
        self.fusion_ca = fusion_ca
        self.head = PromptHead(dim, cfg.num_classes, self.ca, rng,
                               pool_mode=cfg.pool_mode, dtype=dtype)
        self.fusion = PhenotypeFusion(dim, fusion_ca, rng, dtype=dtype)
        n_routes = self._route_count()
        n_param_sets = 1 if cfg.shared_ssm else n_routes
        self.ssm = [init_ssm_params(dim, cfg.state_dim, rng, dtype=dtype)
                    for _ in range(n_param_sets)]
        for p in self.ssm:
            # zero scan output projection: each route starts as a pure skip,
            # keeping the residual stack near-identity and early steps stable
            p.w_c.data[:] = 0.0
        self.ln2_g = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        hidden = dim * cfg.ffn_expand
        self.ffn_w1 = Tensor(nn.glorot(rng, (dim, hidden), dim, dtype), requires_grad=True)
        self.ffn_b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        # zero-init the residual branch output (same rationale as w_c above)
        self.ffn_w2 = Tensor(np.zeros((hidden, dim), dtype=dtype), requires_grad=True)
        self.ffn_b2 = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def _route_count(self) -> int:
        kind = self.cfg.effective_ordering
        if kind == "probability_sorted":
            return self.cfg.num_classes
        return {"raster": 1, "bidirectional": 2, "cross_scan": 4}[kind]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.ln1_g": self.ln1_g, f"{prefix}.ln1_b": self.ln1_b,
            **self.ca.named(f"{prefix}.ca"),
            **self.head.named(f"{prefix}.head"),
            **self.fusion.named(f"{prefix}.fusion"),
            f"{prefix}.ln2_g": self.ln2_g, f"{prefix}.ln2_b": self.ln2_b,
            f"{prefix}.ffn_w1": self.ffn_w1, f"{prefix}.ffn_b1": self.ffn_b1,
            f"{prefix}.ffn_w2": self.ffn_w2, f"{prefix}.ffn_b2": self.ffn_b2,
        }
        if not self.cfg.share_ca:
            out.update(self.fusion_ca.named(f"{prefix}.fusion_ca"))
        for i, p in enumerate(self.ssm):
            out.update(p.named(f"{prefix}.ssm{i}"))
        return out

    def forward(self, grid: TokenGrid,
                label: MultiClassLabel | None) -> tuple[TokenGrid, ClassProbMap, Tensor | None]:
        cfg = self.cfg
        scan_fn = SCAN_IMPLS[cfg.scan_impl]
        x = grid.flat()
        normed = nn.layer_norm(x, self.ln1_g, self.ln1_b)
        ngrid = TokenGrid.from_flat(normed, grid.height, grid.width, grid.scale)

        _, prob_map = self.head(ngrid)
        block_loss = None
        if label is not None:
            from .prompt import prompt_loss

            block_loss = prompt_loss(prob_map, label)

        weight = cfg.fusion_weight if cfg.phenotype_on else 0.0
        fused = self.fusion(ngrid, weight).flat()

        if cfg.effective_ordering == "probability_sorted":
            # nearest-neighbor upsample of the probability grid back to token
            # resolution; plain arrays since ordering is not differentiated
            pu = prob_map.data.data
            pu = np.repeat(np.repeat(pu, 4, axis=0), 4, axis=1)
            agg = aggregate_scan(fused, pu.reshape(-1, cfg.num_classes),
                                 self.ssm, scan_fn=scan_fn)
        else:
            perms = baseline_order(cfg.effective_ordering, grid.height, grid.width)
            agg = aggregate_ordered(fused, perms, self.ssm, scan_fn=scan_fn)

        x = x + agg
        normed2 = nn.layer_norm(x, self.ln2_g, self.ln2_b)
        h = ad.relu(ad.matmul(normed2, self.ffn_w1) + self.ffn_b1)
        x = x + (ad.matmul(h, self.ffn_w2) + self.ffn_b2)
        return TokenGrid.from_flat(x, grid.height, grid.width, grid.scale), prob_map, block_loss


class PatchMerge:
    """2x2 token concatenation with a linear projection; channels double."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.w = Tensor(nn.glorot(rng, (4 * dim, 2 * dim), 4 * dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(2 * dim, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        h, w, c = grid.height, grid.width, grid.channels
        if h % 2 or w % 2:
            raise ValueError(f"patch merge needs even token dims, got {h}x{w}")
        x = grid.data.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4)
        x = x.reshape(h // 2 * (w // 2), 4 * c)
        out = ad.matmul(x, self.w) + self.b
        return TokenGrid.from_flat(out, h // 2, w // 2, grid.scale * 2)


class DecoderBranch:
    """U-Net style: upsample, concat skip, conv; then a two-stage head back
    to input resolution."""

    def __init__(self, level_dims: list[int], out_channels: int, skip: bool,
                 rng: np.random.Generator, dtype=np.float32):
        self.skip = skip
        self.convs: list[tuple[Tensor, Tensor]] = []
        for lvl in range(len(level_dims) - 1, 0, -1):
            in_ch = level_dims[lvl] + (level_dims[lvl - 1] if skip else 0)
            out_ch = level_dims[lvl - 1]
            w = Tensor(nn.glorot(rng, (out_ch, in_ch, 3, 3), in_ch * 9, dtype), requires_grad=True)
            b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
            self.convs.append((w, b))
        d = level_dims[0]
        self.head1_w = Tensor(nn.glorot(rng, (d, d, 3, 3), d * 9, dtype), requires_grad=True)
        self.head1_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.head2_w = Tensor(nn.glorot(rng, (d // 2, d, 3, 3), d * 9, dtype), requires_grad=True)
        self.head2_b = Tensor(np.zeros(d // 2, dtype=dtype), requires_grad=True)
        self.out_w = Tensor(nn.glorot(rng, (out_channels, d // 2, 1, 1), d // 2, dtype),
                            requires_grad=True)
        self.out_b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.convs):
            out[f"{prefix}.up{i}_w"] = w
            out[f"{prefix}.up{i}_b"] = b
        out.update({
            f"{prefix}.head1_w": self.head1_w, f"{prefix}.head1_b": self.head1_b,
            f"{prefix}.head2_w": self.head2_w, f"{prefix}.head2_b": self.head2_b,
            f"{prefix}.out_w": self.out_w, f"{prefix}.out_b": self.out_b,
        })
        return out

    def __call__(self, pyramid: list[Tensor]) -> Tensor:
        # pyramid: per-level NCHW features, shallow -> deep
        x = pyramid[-1]
        for i, (w, b) in enumerate(self.convs):
            lvl = len(pyramid) - 1 - i
            x = nn.upsample_nearest(x, 2)
            if self.skip:
                x = ad.concat([x, pyramid[lvl - 1]], axis=1)
            x = ad.relu(nn.conv2d(x, w, b))
        x = nn.upsample_nearest(x, 2)
        x = ad.relu(nn.conv2d(x, self.head1_w, self.head1_b))
        x = nn.upsample_nearest(x, 2)
        x = ad.relu(nn.conv2d(x, self.head2_w, self.head2_b))
        return nn.conv2d(x, self.out_w, self.out_b)


class Model:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = rng or np.random.default_rng(cfg.seed)
        dtype = cfg.np_dtype
        g = cfg.image_size // 4
        self.embed = PatchEmbed(3, cfg.channels, g, g, rng, mode=cfg.pos_mode, dtype=dtype)
        self.blocks: list[EncoderBlock] = []
        self.merges: list[PatchMerge] = []
        dim = cfg.channels
        for b in range(cfg.blocks):
            self.blocks.append(EncoderBlock(dim, cfg, rng))
            if b + 1 < cfg.blocks:
                self.merges.append(PatchMerge(dim, rng, dtype=dtype))
                dim *= 2
        level_dims = [cfg.channels * (2 ** b) for b in range(cfg.blocks)]
        self.dec_semantic = DecoderBranch(level_dims, 3, cfg.skip_connections, rng, dtype=dtype)
        self.dec_classes = DecoderBranch(level_dims, cfg.num_classes + 1,
                                         cfg.skip_connections, rng, dtype=dtype)
        self.params = self._collect()

    def _collect(self) -> dict[str, Tensor]:
        out = self.embed.named("embed")
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"block{i}"))
        for i, m in enumerate(self.merges):
            out.update(m.named(f"merge{i}"))
        out.update(self.dec_semantic.named("dec_sem"))
        out.update(self.dec_classes.named("dec_cls"))
        return out

    def encode(self, image: Tensor,
               block_labels: list[MultiClassLabel] | None) -> tuple[list[Tensor], list[ClassProbMap], Tensor | None]:
        cfg = self.cfg
        grid = self.embed(image)
        pyramid: list[Tensor] = []
        prob_maps: list[ClassProbMap] = []
        losses: list[Tensor] = []
        for b, blk in enumerate(self.blocks):
            pre = grid
            label = block_labels[b] if block_labels is not None else None
            grid, prob_map, block_loss = blk.forward(grid, label)
            prob_maps.append(prob_map)
            if block_loss is not None:
                losses.append(block_loss)
            # the deepest level is the decoder stem and is always the block
            # output; only lateral skips honor the pre/post-scan choice
            deepest = b == cfg.blocks - 1
            source = grid if (deepest or cfg.skip_source == "post_scan") else pre
            pyramid.append(to_nchw(source))
            if b + 1 < cfg.blocks:
                grid = self.merges[b](grid)
        lp: Tensor | None = None
        if losses:
            lp = losses[0]
            for term in losses[1:]:
                lp = lp + term
            lp = ad.scale(lp, 1.0 / len(losses))  # mean over blocks
        return pyramid, prob_maps, lp

    def forward(self, image: np.ndarray | Tensor,
                block_labels: list[MultiClassLabel] | None = None) -> ModelOutput:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image), dtype=self.cfg.np_dtype)
        pyramid, prob_maps, lp = self.encode(image, block_labels)
        sem = self.dec_semantic(pyramid)
        cls = self.dec_classes(pyramid)
        if lp is None:
            lp = Tensor(np.zeros((), dtype=self.cfg.np_dtype))
        return ModelOutput(semantic=sem, classes=cls, prob_maps=prob_maps, prompt_loss=lp)

    def loss(self, out: ModelOutput, targets: Targets) -> tuple[Tensor, dict[str, float]]:
        cfg = self.cfg
        l_sem = nn.cross_entropy_dice(out.semantic, targets.semantic)
        l_cls = nn.cross_entropy_dice(out.classes, targets.classes)
        total = out.prompt_loss + ad.scale(l_sem, cfg.alpha) + ad.scale(l_cls, cfg.beta)
        parts = {
            "loss": float(total.data),
            "loss_prompt": float(out.prompt_loss.data),
            "loss_semantic": float(l_sem.data),
            "loss_class": float(l_cls.data),
        }
        return total, parts

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, p in self.params.items():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
