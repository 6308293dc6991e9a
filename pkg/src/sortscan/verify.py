"""Self-check machinery: finite-difference gradient oracles and the
itemized verification suite behind ``sortscan verify``.

The gradient checker is deliberately independent of the tape: it re-runs
the forward computation with perturbed leaf values and central differences,
so a wrong adjoint cannot hide.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| scaled by the largest magnitude present (scale-free)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / denom


def numeric_grad(build: Callable[[], Tensor], leaf: Tensor,
                 eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``build()`` w.r.t. ``leaf``."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build().data)
            flat[i] = orig - eps
            f_minus = float(build().data)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def check_gradients(build: Callable[[], Tensor], leaves: Sequence[Tensor],
                    eps: float = 1e-4, sample: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients of ``build()`` against central differences.

    Returns the max relative error over all checked leaves. With ``sample``
    set, only that many coordinates per leaf are perturbed (for large
    models); the tape gradient is still the full one.
    """
    for leaf in leaves:
        leaf.grad = None
    with ad.tape_scope():
        loss = build()
        loss.backward()
        tape_grads = [None if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, tg in zip(leaves, tape_grads):
        if tg is None:
            raise AssertionError("leaf received no gradient from the tape")
        if sample is None or leaf.data.size <= sample:
            num = numeric_grad(build, leaf, eps=eps)
            worst = max(worst, relative_error(num, tg))
            continue
        idx = (rng or np.random.default_rng(0)).choice(leaf.data.size, size=sample, replace=False)
        flat = leaf.data.reshape(-1)
        num = np.empty(sample)
        with ad.no_grad():
            for k, i in enumerate(np.sort(idx)):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(build().data)
                flat[i] = orig - eps
                f_minus = float(build().data)
                flat[i] = orig
                num[k] = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, relative_error(num, tg.reshape(-1)[np.sort(idx)]))
    return worst


# -- itemized verification suite -------------------------------------------------

def _check_op_gradients() -> tuple[bool, str]:
    from . import nn

    rng = np.random.default_rng(7)

    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)

    cases: list[tuple[str, Callable[[], Tensor], list[Tensor]]] = []

    a, b = t((3, 4)), t((3, 4))
    cases.append(("add", lambda: (a + b).sum(), [a, b]))
    cases.append(("mul", lambda: (a * b).sum(), [a, b]))
    m1, m2 = t((3, 5)), t((5, 2))
    cases.append(("matmul", lambda: ad.matmul(m1, m2).sum(), [m1, m2]))
    s = t((4, 6))
    cases.append(("sigmoid", lambda: ad.sigmoid(s).sum(), [s]))
    cases.append(("softplus", lambda: ad.softplus(s).sum(), [s]))
    cases.append(("exp", lambda: ad.exp(s).sum(), [s]))
    x4 = t((2, 3, 8, 8))
    w3 = t((4, 3, 3, 3))
    cases.append(("conv3x3", lambda: nn.conv2d(x4, w3).sum(), [x4, w3]))
    cases.append(("avg_pool", lambda: nn.avg_pool2d(x4, 4).sum(), [x4]))
    cases.append(("upsample", lambda: nn.upsample_nearest(x4, 2).sum(), [x4]))

    worst = 0.0
    for name, build, leaves in cases:
        err = check_gradients(build, leaves)
        worst = max(worst, err)
        if err >= 1e-5:
            return False, f"{name}: rel err {err:.2e} >= 1e-5"
    return True, f"max rel err {worst:.2e}"


def _check_scan_equivalence(seeds: int = 5) -> tuple[bool, str]:
    from . import ssm

    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(100 + seed)
        params = ssm.init_ssm_params(4, 3, rng, dtype=np.float64)
        for L in (1, 2, 7, 64, 512):
            x = Tensor(rng.standard_normal((L, 4)), dtype=np.float64)
            with ad.tape_scope():
                ys = ssm.scan_sequential(x, params).data
                yp = ssm.scan_parallel(x, params).data
            worst = max(worst, float(np.max(np.abs(ys - yp))))
            if L <= 64:
                yo = ssm.scan_unrolled_reference(x.data, params)
                worst = max(worst, float(np.max(np.abs(ys - yo))))
    ok = worst < 1e-10
    return ok, f"max abs deviation {worst:.2e}"


def _check_label_oracle(cases: int = 100) -> tuple[bool, str]:
    from .prompt import generate_labels, generate_labels_reference

    rng = np.random.default_rng(11)
    for _ in range(cases):
        nc = int(rng.integers(1, 6))
        scale = int(rng.choice([8, 16]))
        h = scale * int(rng.integers(1, 65 // scale + 1))
        w = scale * int(rng.integers(1, 65 // scale + 1))
        mask = rng.integers(0, nc + 1, size=(h, w))
        fast = generate_labels(mask, scale, nc).grid
        slow = generate_labels_reference(mask, scale, nc)
        if not np.array_equal(fast, slow):
            return False, f"mismatch at h={h} w={w} nc={nc} scale={scale}"
    return True, f"{cases} random masks, zero mismatches"


def _check_permutations(cases: int = 1000) -> tuple[bool, str]:
    from .sorting import Permutation, sort_by_class

    rng = np.random.default_rng(13)
    for _ in range(cases):
        n = int(rng.integers(1, 40))
        nc = int(rng.integers(1, 5))
        probs = rng.random((n, nc))
        ci = int(rng.integers(1, nc + 1))
        perm = sort_by_class(probs, ci)
        keys = probs[perm.forward, ci - 1]
        if np.any(np.diff(keys) > 0):
            return False, "not descending"
        if not np.array_equal(np.sort(perm.forward), np.arange(n)):
            return False, "not a bijection"
        if not np.array_equal(perm.inverse[perm.forward], np.arange(n)):
            return False, "inverse broken"
        scaled = sort_by_class(probs * 3.5, ci)
        if not np.array_equal(scaled.forward, perm.forward):
            return False, "argsort not invariant under positive scaling"
        seq = rng.standard_normal((n, 3))
        if not np.array_equal(seq[perm.forward][perm.inverse], seq):
            return False, "round trip failed"
    return True, f"{cases} random cases"


def _check_metric_oracles(cases: int = 50) -> tuple[bool, str]:
    from . import metrics
    from .metrics import oracles

    rng = np.random.default_rng(17)
    for _ in range(cases):
        gt = oracles.random_instance_mask(rng, 16, 16, max_instances=4)
        pred = oracles.random_instance_mask(rng, 16, 16, max_instances=4)
        if abs(metrics.aji(pred, gt) - oracles.aji_bruteforce(pred, gt)) > 1e-12:
            return False, "aji mismatch"
        dq, sq, pq = metrics.panoptic(pred, gt)
        odq, osq, opq = oracles.panoptic_bruteforce(pred, gt)
        if max(abs(dq - odq), abs(sq - osq), abs(pq - opq)) > 1e-12:
            return False, "panoptic mismatch"
        d = metrics.dice(pred.labels > 0, gt.labels > 0)
        if abs(d - oracles.dice_bruteforce(pred.labels > 0, gt.labels > 0)) > 1e-12:
            return False, "dice mismatch"
    return True, f"{cases} random mask pairs"


def run_all(fast: bool = True) -> list[tuple[str, bool, str]]:
    """Run every verification item; returns (name, passed, detail) triples."""
    items = [
        ("gradient-checks", _check_op_gradients),
        ("scan-equivalence", _check_scan_equivalence),
        ("label-generation-oracle", _check_label_oracle),
        ("permutation-properties", _check_permutations),
        ("metric-oracles", _check_metric_oracles),
    ]
    results = []
    for name, fn in items:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # itemized failure, keep going
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        results.append((name, ok, f"{detail} ({dt:.1f}s)"))
    return results
