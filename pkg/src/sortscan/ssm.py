"""Selective state-space scan over token sequences.

Each channel carries a diagonal linear recurrence whose transition and
input terms are token-dependent:

    h_t = Abar_t * h_{t-1} + (delta_t * B_t) * x_t        h_0 = 0
    y_t = C_t . h_t + skip * x_t

with Abar_t = exp(delta_t * A) (zero-order hold on a diagonal negative A)
and delta_t = softplus(x_t @ W_dt + b_dt) > 0. Two evaluation strategies
share this contract: a sequential recurrence and a Blelloch-style parallel
prefix scan over the associative pair combinator
(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, accumulate, apply_op


@dataclass
class SSMParams:
    """Learnable parameters of one scan route.

    The transition is stored in log space (A = -exp(a_log)) so it stays
    strictly negative under gradient updates; initialization follows the
    real-diagonal recipe A[d, n] = -(n + 1).
    """

    a_log: Tensor    # (D, N)
    w_delta: Tensor  # (D, D)
    b_delta: Tensor  # (D,)
    w_b: Tensor      # (D, N)
    w_c: Tensor      # (D, N)
    skip: Tensor     # (D,)

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def transition(self) -> Tensor:
        return ad.neg(ad.exp(self.a_log))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.a_log": self.a_log,
            f"{prefix}.w_delta": self.w_delta,
            f"{prefix}.b_delta": self.b_delta,
            f"{prefix}.w_b": self.w_b,
            f"{prefix}.w_c": self.w_c,
            f"{prefix}.skip": self.skip,
        }


def init_ssm_params(channels: int, state_dim: int, rng: np.random.Generator,
                    dtype=np.float32, dt_init: float = 0.05) -> SSMParams:
    d, n = channels, state_dim
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (d, 1))
    w_delta = rng.standard_normal((d, d)) * (0.5 / np.sqrt(d))
    # softplus^-1(dt_init) so steps start small and positive
    b_delta = np.full(d, np.log(np.expm1(dt_init)))
    w_b = rng.standard_normal((d, n)) / np.sqrt(d)
    w_c = rng.standard_normal((d, n)) / np.sqrt(d)
    skip = np.ones(d)
    return SSMParams(
        a_log=Tensor(a_log.astype(dtype), requires_grad=True),
        w_delta=Tensor(w_delta.astype(dtype), requires_grad=True),
        b_delta=Tensor(b_delta.astype(dtype), requires_grad=True),
        w_b=Tensor(w_b.astype(dtype), requires_grad=True),
        w_c=Tensor(w_c.astype(dtype), requires_grad=True),
        skip=Tensor(skip.astype(dtype), requires_grad=True),
    )


def discretize(a: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold: Abar = exp(delta*A), Bbar = delta*B (simplified).

    a: (D, N) transition; b: (L, N) input projection; delta: (L, D) > 0.
    Returns Abar, Bbar of shape (L, D, N).
    """
    if delta.data.min() <= 0:
        raise ValueError("discretize: delta must be strictly positive")
    L, d = delta.shape
    n = a.shape[1]
    delta_e = delta.reshape(L, d, 1)
    abar = ad.exp(delta_e * a.reshape(1, d, n))
    bbar = delta_e * b.reshape(L, 1, n)
    return abar, bbar


def _recurrence_sequential(abar: Tensor, u: Tensor, c: Tensor) -> Tensor:
    """y[t, d] = sum_n C[t, n] * h[t, d, n] with the step-by-step recurrence."""
    a_, u_, c_ = abar.data, u.data, c.data
    L, d, n = a_.shape
    hs = np.empty_like(u_)
    h = np.zeros((d, n), dtype=u_.dtype)
    for t in range(L):
        h = a_[t] * h + u_[t]
        hs[t] = h
    y = np.einsum("ldn,ln->ld", hs, c_)

    def bw(g):
        _recurrence_backward(g, a_, c_, hs, abar, u, c)

    return apply_op(y, (abar, u, c), bw)


def _recurrence_backward(g, a_, c_, hs, abar, u, c) -> None:
    """Shared adjoint: reverse-time recurrence on dL/dh."""
    L, d, n = a_.shape
    accumulate(c, np.einsum("ldn,ld->ln", hs, g))
    gh = c_[:, None, :] * g[:, :, None]  # per-step contribution to dL/dh
    du = np.empty_like(a_)
    da = np.empty_like(a_)
    carry = np.zeros((d, n), dtype=a_.dtype)
    for t in range(L - 1, -1, -1):
        acc = gh[t] + carry
        du[t] = acc
        da[t] = acc * (hs[t - 1] if t > 0 else 0.0)
        carry = a_[t] * acc
    accumulate(u, du)
    accumulate(abar, da)


def pair_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of s_t = a_t * s_{t-1} + b_t (s_0 = 0) along axis 0.

    Blelloch up/down sweep over the pair combinator with deterministic
    pairing; inputs are padded to a power of two with the identity (1, 0).
    Returns the s sequence (same shape as b).
    """
    L = a.shape[0]
    P = 1 << max(L - 1, 0).bit_length() if L > 1 else 1
    sa = np.ones((P,) + a.shape[1:], dtype=a.dtype)
    sb = np.zeros((P,) + b.shape[1:], dtype=b.dtype)
    sa[:L] = a
    sb[:L] = b
    ea, eb = sa.copy(), sb.copy()

    # up-sweep: right node absorbs left sibling (earlier elements first)
    stride = 1
    while stride < P:
        left = np.arange(stride - 1, P, 2 * stride)
        right = left + stride
        ea[right], eb[right] = ea[right] * ea[left], ea[right] * eb[left] + eb[right]
        stride *= 2

    # down-sweep: turn subtree totals into exclusive prefixes
    ea[-1] = 1.0
    eb[-1] = 0.0
    stride = P // 2
    while stride >= 1:
        left = np.arange(stride - 1, P, 2 * stride)
        right = left + stride
        tl_a, tl_b = ea[left].copy(), eb[left].copy()
        ea[left], eb[left] = ea[right], eb[right]
        ea[right] = tl_a * ea[right]
        eb[right] = tl_a * eb[right] + tl_b
        stride //= 2

    # inclusive = element o exclusive-prefix
    s = sa * eb + sb
    return s[:L]


def _recurrence_parallel(abar: Tensor, u: Tensor, c: Tensor) -> Tensor:
    """Same contract as the sequential recurrence via parallel prefix scans."""
    a_, u_, c_ = abar.data, u.data, c.data
    hs = pair_scan(a_, u_)
    y = np.einsum("ldn,ln->ld", hs, c_)

    def bw(g):
        L = a_.shape[0]
        accumulate(c, np.einsum("ldn,ld->ln", hs, g))
        gh = c_[:, None, :] * g[:, :, None]
        # reverse-time recurrence g_t = gh_t + a_{t+1} * g_{t+1} as a scan
        a_rev = np.concatenate([np.ones_like(a_[:1]), a_[:0:-1]], axis=0)
        gtot = pair_scan(a_rev, gh[::-1])[::-1]
        accumulate(u, gtot)
        da = gtot[1:] * hs[:-1] if L > 1 else np.zeros_like(a_[:0])
        accumulate(abar, np.concatenate([np.zeros_like(a_[:1]), da], axis=0))

    return apply_op(y, (abar, u, c), bw)


def _scan(seq: Tensor, params: SSMParams, recurrence) -> Tensor:
    if seq.ndim != 2:
        raise ValueError(f"scan expects a (length, channels) sequence, got {seq.shape}")
    L, d = seq.shape
    if L < 1:
        raise ValueError("scan: empty sequence")
    if d != params.channels:
        raise ValueError(f"scan: sequence has {d} channels, params expect {params.channels}")
    delta = ad.softplus(ad.matmul(seq, params.w_delta) + params.b_delta.reshape(1, d))
    # softplus is positive in exact arithmetic but can underflow to 0.0;
    # pin it at the smallest normal so the discretization contract holds
    delta = ad.clamp(delta, lo=float(np.finfo(seq.data.dtype).tiny))
    b_proj = ad.matmul(seq, params.w_b)
    c_proj = ad.matmul(seq, params.w_c)
    abar, bbar = discretize(params.transition(), b_proj, delta)
    u = bbar * seq.reshape(L, d, 1)
    y_core = recurrence(abar, u, c_proj)
    return y_core + seq * params.skip.reshape(1, d)


def scan_sequential(seq: Tensor, params: SSMParams) -> Tensor:
    """Reference evaluation: one recurrence step per token."""
    return _scan(seq, params, _recurrence_sequential)


def scan_parallel(seq: Tensor, params: SSMParams) -> Tensor:
    """Prefix-scan evaluation; matches scan_sequential up to fp association."""
    return _scan(seq, params, _recurrence_parallel)


SCAN_IMPLS = {"sequential": scan_sequential, "parallel": scan_parallel}


def scan_unrolled_reference(seq: np.ndarray, params: SSMParams) -> np.ndarray:
    """O(L^2) unrolled-matrix oracle: h_t = sum_s (prod_{r>s} Abar_r) Bbar_s x_s.

    Pure numpy, no recurrence, no tape; used to validate the scans.
    """
    x = np.asarray(seq)
    L, d = x.shape
    a = -np.exp(params.a_log.data)
    delta = np.logaddexp(0, x @ params.w_delta.data + params.b_delta.data)
    bmat = x @ params.w_b.data
    cmat = x @ params.w_c.data
    abar = np.exp(delta[:, :, None] * a[None])
    u = (delta[:, :, None] * bmat[:, None, :]) * x[:, :, None]
    y = np.empty_like(x)
    for t in range(L):
        h = np.zeros((d, params.state_dim), dtype=x.dtype)
        for s in range(t + 1):
            term = u[s].copy()
            for r in range(s + 1, t + 1):
                term = abar[r] * term
            h += term
        y[t] = h @ cmat[t] + params.skip.data * x[t]
    return y
