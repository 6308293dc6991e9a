"""Network-level operations built on the autodiff primitives.

Convolutions run through an im2col lowering so the heavy lifting stays in
BLAS; pooling and upsampling are reshape tricks. Losses return scalar
tensors. The optimizer implements classic SGD with momentum and weight
decay, with velocity buffers persisted across steps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor, accumulate, apply_op


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding 2-d convolution, odd square kernels (1x1 and 3x3 here).

    x: (B, C, H, W); w: (F, C, kh, kw); output (B, F, H, W).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d x and w, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d: channel mismatch (input {C}, weight {Cw})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernels must be odd for same padding")
    ph, pw = kh // 2, kw // 2

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B,C,H,W,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H * W, C * kh * kw)
    wm = w.data.reshape(F, C * kh * kw)
    y = (cols @ wm.T).reshape(B, H, W, F).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data.reshape(1, F, 1, 1)
    y = np.ascontiguousarray(y)

    inputs = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * H * W, F)
        accumulate(w, (gm.T @ cols).reshape(F, C, kh, kw))
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gm @ wm).reshape(B, H, W, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            accumulate(x, dxp[:, :, ph:ph + H, pw:pw + W])

    return apply_op(y, inputs, bw)


# -- pooling / resampling ------------------------------------------------------

def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ValueError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {factor}")
    f = factor
    out = x.data.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))
    inv = x.data.dtype.type(1.0 / (f * f))

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * inv, (B, C, H // f, f, W // f, f))
        accumulate(x, gx.reshape(B, C, H, W))

    return apply_op(np.ascontiguousarray(out), (x,), bw)


def max_pool2d(x: Tensor, factor: int) -> Tensor:
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ValueError(f"max_pool2d: spatial dims {H}x{W} not divisible by {factor}")
    f = factor
    win = x.data.reshape(B, C, H // f, f, W // f, f).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(B, C, H // f, W // f, f * f)
    idx = win.argmax(axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, C, H // f, W // f, f, f).transpose(0, 1, 2, 4, 3, 5)
        accumulate(x, dx.reshape(B, C, H, W))

    return apply_op(np.ascontiguousarray(out), (x,), bw)


def pool_downsample(x: Tensor, factor: int = 4, mode: str = "average") -> Tensor:
    """Window aggregation used by the prompt head (average by default)."""
    if mode == "average":
        return avg_pool2d(x, factor)
    if mode == "max":
        return max_pool2d(x, factor)
    raise ValueError(f"pool_downsample: unknown mode {mode!r}")


def upsample_nearest(x: Tensor, factor: int = 4) -> Tensor:
    B, C, H, W = x.shape
    f = factor
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def bw(g):
        accumulate(x, g.reshape(B, C, H, f, W, f).sum(axis=(3, 5)))

    return apply_op(out, (x,), bw)


# -- normalization -------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; gamma/beta shaped like that axis."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = ad.pow_scalar(var + eps, -0.5)
    return centered * inv_std * gamma + beta


# -- losses ----------------------------------------------------------------------

def binary_cross_entropy(pred: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean per-element binary cross-entropy on probabilities in [0,1]."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"binary_cross_entropy: shape mismatch {pred.shape} vs {t.shape}")
    if t.min() < 0 or t.max() > 1:
        raise ValueError("binary_cross_entropy: targets must lie in [0,1]")
    p = ad.clamp(pred, eps, 1.0 - eps)
    loss = ad.mul(ad.log(p), t) + ad.mul(ad.log(1.0 - p), 1.0 - t)
    return -loss.mean()


def dice_loss(pred: Tensor, target: np.ndarray, smooth: float = 1.0,
              channel_axis: int | None = None) -> Tensor:
    """Soft dice loss; smoothing constant in numerator and denominator.

    With ``channel_axis`` set, computes one dice score per channel and
    returns one minus their mean (multi-class usage on one-hot targets).
    """
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.shape:
        raise ValueError(f"dice_loss: shape mismatch {pred.shape} vs {t.shape}")
    if channel_axis is None:
        inter = (pred * t).sum()
        denom = pred.sum() + float(t.sum())
        frac = ad.div(ad.scale(inter, 2.0) + smooth, denom + smooth)
        return 1.0 - frac
    axes = tuple(i for i in range(pred.ndim) if i != channel_axis % pred.ndim)
    inter = (pred * t).sum(axis=axes)
    denom = pred.sum(axis=axes) + Tensor(t.sum(axis=axes), dtype=pred.data.dtype)
    frac = ad.div(ad.scale(inter, 2.0) + smooth, denom + smooth)
    return 1.0 - frac.mean()


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = ad.stop_gradient(Tensor._wrap(logits.data.max(axis=axis, keepdims=True), False))
    e = ad.exp(logits - shift)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean cross-entropy of (n, K) logits against integer class targets."""
    if logits.ndim != 2:
        raise ValueError("softmax_cross_entropy expects (n, K) logits")
    t = np.asarray(target)
    n, k = logits.shape
    if t.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: target shape {t.shape} != ({n},)")
    if t.min() < 0 or t.max() >= k:
        raise ValueError("softmax_cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez)
    rows = np.arange(n)
    out = np.asarray((lse[:, 0] - z[rows, t]).mean(), dtype=logits.data.dtype)

    def bw(g):
        p = ez / sez
        p[rows, t] -= 1.0
        accumulate(logits, p * (g / n))

    return apply_op(out, (logits,), bw)


def cross_entropy_dice(logits: Tensor, target: np.ndarray) -> Tensor:
    """Composite CE + dice on (1, K, H, W) logits vs integer (H, W) target."""
    _, k, h, w = logits.shape
    flat = logits.transpose(0, 2, 3, 1).reshape(h * w, k)
    ce = softmax_cross_entropy(flat, target.reshape(-1))
    probs = softmax(logits, axis=1)
    onehot = np.zeros((1, k, h, w), dtype=logits.data.dtype)
    for c in range(k):
        onehot[0, c] = target == c
    return ce + dice_loss(probs, onehot, channel_axis=1)


# -- optimizer -------------------------------------------------------------------

def sgd_step(param: Tensor, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float) -> None:
    """In-place classic momentum update; velocity is mutated."""
    g = grad
    if weight_decay:
        g = g + weight_decay * param.data
    velocity *= momentum
    velocity += g
    param.data -= lr * velocity


class SGD:
    """Momentum SGD over a named parameter dict (insertion order fixed).

    ``clip_norm`` rescales the global gradient norm before the update when
    it exceeds the bound (0 disables); the update rule itself is untouched.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0,
                 clip_norm: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"SGD.step: parameter {name!r} has no gradient")
        if self.clip_norm > 0:
            total = np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                                for p in self.params.values()))
            if total > self.clip_norm:
                factor = self.clip_norm / total
                for p in self.params.values():
                    p.grad *= p.grad.dtype.type(factor)
        for name, p in self.params.items():
            sgd_step(p, p.grad, self.velocity[name],
                     self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- initializers ------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape: tuple[int, ...],
           fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
