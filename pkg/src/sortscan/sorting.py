"""Probability-guided sequence ordering and per-class scan aggregation.

For each class the token sequence is reordered by descending predicted
probability of that class, scanned, restored to raster order, and the
per-class results are summed. Orderings are plain index permutations and
are constants with respect to the gradient tape: the probabilities steer
ordering only, their gradient arrives through the prompt loss.

Also holds the direction-based baseline orderings used for ablations and
the prefix-conditioned entropy probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .prompt import ClassActivation, ClassProbMap, TokenGrid
from .ssm import SSMParams, scan_sequential


@dataclass(frozen=True)
class Permutation:
    """A bijection on token indices plus its precomputed inverse.

    ``forward[k]`` is the original index of the token visited k-th;
    applying forward then inverse restores the original order exactly.
    """

    forward: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_forward(cls, forward: np.ndarray) -> "Permutation":
        forward = np.asarray(forward, dtype=np.intp)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size, dtype=np.intp)
        return cls(forward=forward, inverse=inverse)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        idx = np.arange(n, dtype=np.intp)
        return cls(forward=idx, inverse=idx.copy())

    @property
    def n(self) -> int:
        return self.forward.size

    def apply(self, seq: Tensor) -> Tensor:
        return ad.gather_rows(seq, self.forward)

    def restore(self, seq: Tensor) -> Tensor:
        return ad.gather_rows(seq, self.inverse)


def sort_by_class(probs: ClassProbMap | np.ndarray, class_i: int) -> Permutation:
    """Stable descending sort of token indices by class ``class_i`` (1-based).

    Ties keep ascending original index, so equal probabilities yield the
    identity ordering.
    """
    if isinstance(probs, ClassProbMap):
        p = probs.flat().data
    else:
        p = np.asarray(probs)
        if isinstance(probs, Tensor):
            p = probs.data
    if p.ndim != 2:
        p = p.reshape(-1, p.shape[-1])
    if not 1 <= class_i <= p.shape[1]:
        raise ValueError(f"sort_by_class: class {class_i} out of range 1..{p.shape[1]}")
    order = np.argsort(-p[:, class_i - 1], kind="stable")
    return Permutation.from_forward(order)


class PhenotypeFusion:
    """Class-gated projection fused convexly with the raw tokens.

    x_s = conv3x3(CA(x_e)); the class-activation module is shared with the
    prompt head by default. Returns weight * x_s + (1 - weight) * x_e.
    """

    def __init__(self, dim: int, ca: ClassActivation, rng: np.random.Generator,
                 dtype=np.float32):
        self.ca = ca
        self.w = Tensor(nn.glorot(rng, (dim, dim, 3, 3), dim * 9, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}

    def __call__(self, x_e: TokenGrid, weight: float) -> TokenGrid:
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"phenotype fusion weight must lie in [0, 1], got {weight}")
        from .prompt import from_nchw, to_nchw

        x_s = from_nchw(nn.conv2d(to_nchw(self.ca(x_e)), self.w, self.b), x_e.scale)
        fused = ad.scale(x_s.data, weight) + ad.scale(x_e.data, 1.0 - weight)
        return x_e.with_data(fused)


def baseline_order(kind: str, height: int, width: int) -> list[Permutation]:
    """Direction-based orderings: the ablation baselines.

    raster -> one raster pass; bidirectional -> raster plus reversed;
    cross_scan -> row-major, row-major reversed, column-major,
    column-major reversed.
    """
    n = height * width
    raster = np.arange(n, dtype=np.intp)
    if kind == "raster":
        orders = [raster]
    elif kind == "bidirectional":
        orders = [raster, raster[::-1]]
    elif kind == "cross_scan":
        col_major = raster.reshape(height, width).T.reshape(-1)
        orders = [raster, raster[::-1], col_major, col_major[::-1]]
    else:
        raise ValueError(f"baseline_order: unknown kind {kind!r}")
    return [Permutation.from_forward(o.copy()) for o in orders]


def aggregate_ordered(x_f: Tensor, perms: list[Permutation],
                      params: list[SSMParams], scan_fn=scan_sequential) -> Tensor:
    """Scan under each ordering, restore, and sum positionwise.

    ``params`` holds either one parameter set per ordering or a single
    shared set. Summation runs in ascending ordering index for
    reproducibility.
    """
    if len(params) not in (1, len(perms)):
        raise ValueError(f"aggregate_ordered: {len(params)} param sets for {len(perms)} orderings")
    out: Tensor | None = None
    for k, perm in enumerate(perms):
        if perm.n != x_f.shape[0]:
            raise ValueError(f"aggregate_ordered: permutation length {perm.n} "
                             f"vs {x_f.shape[0]} tokens")
        p = params[k % len(params)] if len(params) > 1 else params[0]
        scanned = scan_fn(perm.apply(x_f), p)
        restored = perm.restore(scanned)
        out = restored if out is None else out + restored
    assert out is not None
    return out


def aggregate_scan(x_f: Tensor, probs_u: ClassProbMap | np.ndarray,
                   params: list[SSMParams], scan_fn=scan_sequential) -> Tensor:
    """Per-class probability-sorted scan aggregation.

    x_f: (tokens, channels); probs_u: per-token class probabilities with
    the same token count. One scan per class, summed after restoring the
    original token order.
    """
    p = probs_u.flat().data if isinstance(probs_u, ClassProbMap) else np.asarray(probs_u)
    if p.shape[0] != x_f.shape[0]:
        raise ValueError(f"aggregate_scan: {p.shape[0]} probability rows for "
                         f"{x_f.shape[0]} tokens")
    num_classes = p.shape[1]
    perms = [sort_by_class(p, i) for i in range(1, num_classes + 1)]
    return aggregate_ordered(x_f, perms, params, scan_fn=scan_fn)


# -- entropy probe -----------------------------------------------------------------

def prefix_predictive_entropy(dists: np.ndarray, order: np.ndarray) -> float:
    """Mean predictive entropy of a causal frequency model along ``order``.

    The model walks the sequence keeping running soft class counts; at each
    position it predicts the renormalized product of the token's own
    distribution and a Laplace-smoothed prefix frequency prior, and the
    entropy (nats) of that prediction is averaged over positions. One-hot
    tokens therefore score zero under every ordering, and a single token
    scores its own marginal entropy. This is a surrogate uncertainty
    measure: the plain joint entropy of a fixed token set is
    order-invariant, so a sequential model is needed to expose ordering
    effects.
    """
    p = np.asarray(dists, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("prefix_predictive_entropy: expected (tokens, classes)")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("prefix_predictive_entropy: rows must be distributions")
    k = p.shape[1]
    counts = np.zeros(k)
    total = 0.0
    ent = 0.0
    for t in order:
        row = p[t]
        if total == 0.0:
            pred = row
        else:
            prior = (counts + 1.0) / (total + k)
            pred = row * prior
            pred = pred / pred.sum()
        nz = pred[pred > 0]
        ent += float(-(nz * np.log(nz)).sum())
        counts += row
        total += 1.0
    return ent / p.shape[0]


def entropy_probe(sequences: list[np.ndarray], rng: np.random.Generator,
                  orderings: tuple[str, ...] = ("sorted", "random", "raster")) -> dict:
    """Paired entropy report for the given orderings over trial sequences.

    "sorted" averages the per-class descending orderings (the same rule
    the scan uses); "random" uses one seeded shuffle per trial; "raster"
    is the identity. Report schema:
        {"trials": int,
         "orderings": {name: {"mean_entropy": float, "per_trial": [...]}},
         "sorted_minus_random": float}
    """
    per: dict[str, list[float]] = {name: [] for name in orderings}
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.float64)
        n, k = seq.shape
        for name in orderings:
            if name == "raster":
                values = [prefix_predictive_entropy(seq, np.arange(n))]
            elif name == "random":
                values = [prefix_predictive_entropy(seq, rng.permutation(n))]
            elif name == "sorted":
                values = [prefix_predictive_entropy(seq, np.argsort(-seq[:, i], kind="stable"))
                          for i in range(k)]
            else:
                raise ValueError(f"entropy_probe: unknown ordering {name!r}")
            per[name].append(float(np.mean(values)))
    report = {
        "trials": len(sequences),
        "orderings": {
            name: {"mean_entropy": float(np.mean(vals)) if vals else 0.0,
                   "per_trial": vals}
            for name, vals in per.items()
        },
    }
    if "sorted" in per and "random" in per and per["sorted"]:
        report["sorted_minus_random"] = (report["orderings"]["sorted"]["mean_entropy"]
                                         - report["orderings"]["random"]["mean_entropy"])
    return report


def mixture_sequences(trials: int, tokens: int, num_classes: int,
                      rng: np.random.Generator, concentration: float = 6.0) -> list[np.ndarray]:
    """Synthetic probe inputs: each token's distribution is a Dirichlet draw
    peaked on a latent class, giving sequences with mixed confidence."""
    out = []
    for _ in range(trials):
        latent = rng.integers(0, num_classes, size=tokens)
        alpha = np.ones((tokens, num_classes))
        alpha[np.arange(tokens), latent] += concentration * rng.random(tokens)
        rows = np.stack([rng.dirichlet(a) for a in alpha])
        out.append(rows)
    return out
