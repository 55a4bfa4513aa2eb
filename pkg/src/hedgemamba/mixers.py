"""Sequence mixers: softmax attention, Hedgehog linear attention, SSM scan, HedgeMamba.

All mixers take ``X`` of shape ``(..., L, d)`` and return the same shape.
Linear maps are stored ``(d_in, d_out)`` and applied as ``x @ W + b``.
Per-head tensors use the layout ``(..., H, L, head_dim)``.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

log = logging.getLogger("hedgemamba")

NORMALIZER_FLOOR = 1e-9
COMPONENTS = ("ssm", "conv", "gate")


class NormalizerUnderflowError(FloatingPointError):
    """Linear-attention denominator fell below the floor."""


# ---------------------------------------------------------------------------
# parameter bundles


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    num_heads: int
    rotary_fraction: float = 0.0
    wo: Tensor | None = None
    bo: Tensor | None = None

    def __post_init__(self):
        d = self.wq.shape[0]
        if self.num_heads <= 0 or d % self.num_heads:
            raise ShapeError(f"d={d} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.rotary_fraction <= 1.0:
            raise ValueError("rotary_fraction must lie in [0, 1]")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads

    @property
    def rotary_dims(self) -> int:
        return rotary_dims(self.head_dim, self.rotary_fraction)


@dataclass
class HedgehogParams:
    """Feature-map weights, stacked per head: ``w`` (H, dh, dh), ``b`` (H, dh)."""

    w: Tensor
    b: Tensor

    @property
    def feature_dim(self) -> int:
        return 2 * self.w.shape[-1]


@dataclass
class LinearAttentionParams:
    attn: AttentionParams
    hq: HedgehogParams
    hk: HedgehogParams


@dataclass
class SsmParams:
    """Mamba-side extras. A field group is None when its component is absent.

    ``lam`` (H, N, dh) decay rates; ``wd, bd, wu, bu`` the rank-``d_r``
    time-step MLP producing one step size per head; ``conv_w`` (kappa, d)
    depthwise taps; ``gate_w, gate_b`` the SiLU gate branch.
    """

    lam: Tensor | None = None
    wd: Tensor | None = None
    bd: Tensor | None = None
    wu: Tensor | None = None
    bu: Tensor | None = None
    conv_w: Tensor | None = None
    conv_b: Tensor | None = None
    gate_w: Tensor | None = None
    gate_b: Tensor | None = None

    @property
    def components(self) -> frozenset[str]:
        present = set()
        if self.lam is not None:
            present.add("ssm")
        if self.conv_w is not None:
            present.add("conv")
        if self.gate_w is not None:
            present.add("gate")
        return frozenset(present)


@dataclass
class HedgeMambaParams:
    attn: AttentionParams
    hq: HedgehogParams
    hk: HedgehogParams
    ssm: SsmParams


# ---------------------------------------------------------------------------
# helpers


def rotary_dims(head_dim: int, fraction: float) -> int:
    r = int(math.floor(head_dim * fraction))
    return r - (r % 2)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = nx.reshape(x, (*lead, L, num_heads, d // num_heads))
    return nx.swapaxes(x, -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    x = nx.swapaxes(x, -3, -2)
    return nx.reshape(x, (*lead, L, H * dh))


def rotary_tables(length: int, dims: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = 1.0 / base ** (np.arange(0, dims, 2, dtype=np.float64) / dims)
    angles = np.outer(np.arange(length, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def apply_rotary(x: Tensor, dims: int) -> Tensor:
    """GPT-NeoX style rotary embedding on the first ``dims`` features of ``(..., L, F)``."""
    if dims == 0:
        return x
    if dims % 2 or dims > x.shape[-1]:
        raise ShapeError(f"rotary dims {dims} invalid for feature size {x.shape[-1]}")
    cos, sin = rotary_tables(x.shape[-2], dims)
    half = dims // 2
    rot = x[..., :dims]
    rotated = nx.concat([-rot[..., half:], rot[..., :half]], axis=-1)
    out = nx.add(nx.mul(rot, cos), nx.mul(rotated, sin))
    if dims == x.shape[-1]:
        return out
    return nx.concat([out, x[..., dims:]], axis=-1)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def strict_normalizer() -> bool:
    return os.environ.get("HEDGEMAMBA_LOG", "").lower() == "debug"


_underflows = {"events": 0, "entries": 0}


def normalizer_underflows() -> dict[str, int]:
    """Process-wide count of clamped normalizer entries (and calls that clamped any)."""
    return dict(_underflows)


def _normalize(num: Tensor, den: Tensor) -> Tensor:
    low = den.data < NORMALIZER_FLOOR
    if low.any():
        n = int(low.sum())
        msg = f"{n} normalizer entries below {NORMALIZER_FLOOR:g}"
        if strict_normalizer():
            raise NormalizerUnderflowError(msg)
        _underflows["events"] += 1
        _underflows["entries"] += n
        # first occurrence is loud, the rest only show up in debug logs and the counter
        (log.warning if _underflows["events"] == 1 else log.debug)(msg)
    return nx.div(num, nx.maximum(den, NORMALIZER_FLOOR))


# ---------------------------------------------------------------------------
# softmax attention


def softmax_attention(X, p: AttentionParams, causal: bool = True) -> Tensor:
    X = nx.as_tensor(X)
    if X.shape[-1] != p.d:
        raise ShapeError(f"input width {X.shape[-1]} != model width {p.d}")
    L = X.shape[-2]
    q = split_heads(linear(X, p.wq, p.bq), p.num_heads)
    k = split_heads(linear(X, p.wk, p.bk), p.num_heads)
    v = split_heads(linear(X, p.wv, p.bv), p.num_heads)
    q = apply_rotary(q, p.rotary_dims)
    k = apply_rotary(k, p.rotary_dims)
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(p.head_dim))
    weights = nx.softmax(scores, axis=-1, mask=causal_mask(L) if causal else None)
    y = merge_heads(nx.matmul(weights, v))
    if p.wo is not None:
        y = linear(y, p.wo, p.bo)
    return y


# ---------------------------------------------------------------------------
# Hedgehog feature map and linear attention


def hedgehog_map(x, p: HedgehogParams) -> Tensor:
    """``softmax(concat[xW + b, -(xW + b)])`` over the feature axis.

    ``x`` is either a single-head ``(..., dh)`` input with ``w`` (dh, dh), or
    per-head ``(..., H, L, dh)`` with stacked ``w`` (H, dh, dh).
    """
    x = nx.as_tensor(x)
    if p.w.ndim == 2:
        z = nx.add(nx.matmul(x, p.w), p.b)
    else:
        z = nx.add(nx.matmul(x, p.w), nx.reshape(p.b, (p.b.shape[0], 1, p.b.shape[1])))
    return nx.softmax(nx.concat([z, nx.neg(z)], axis=-1), axis=-1)


def _causal_linear_scan(qf: Tensor, kf: Tensor, v: Tensor) -> Tensor:
    """``Y_l = sum_{j<=l} (qf_l . kf_j) v_j`` with an O(F*D) running state."""
    *lead, L, F = qf.shape
    D = v.shape[-1]
    if kf.shape != qf.shape or tuple(v.shape[:-1]) != tuple(kf.shape[:-1]):
        raise ShapeError(f"linear scan shapes {qf.shape}, {kf.shape}, {v.shape}")
    Q, K, V = qf.data, kf.data, v.data
    out = np.empty((*lead, L, D))
    state = np.zeros((*lead, F, D))
    for l in range(L):
        state += K[..., l, :, None] * V[..., l, None, :]
        out[..., l, :] = np.einsum("...f,...fd->...d", Q[..., l, :], state)
    nx._count(2 * int(np.prod(lead, dtype=np.int64)) * L * F * D)

    def adjoint(g):
        gq = np.empty_like(Q)
        state = np.zeros((*lead, F, D))
        for l in range(L):
            state += K[..., l, :, None] * V[..., l, None, :]
            gq[..., l, :] = np.einsum("...fd,...d->...f", state, g[..., l, :])
        gk = np.empty_like(K)
        gv = np.empty_like(V)
        rev = np.zeros((*lead, F, D))
        for l in range(L - 1, -1, -1):
            rev += Q[..., l, :, None] * g[..., l, None, :]
            gk[..., l, :] = np.einsum("...fd,...d->...f", rev, V[..., l, :])
            gv[..., l, :] = np.einsum("...fd,...f->...d", rev, K[..., l, :])
        return gq, gk, gv

    return nx.record(out, (qf, kf, v), adjoint, "causal_linear_scan")


def linear_attention(
    X,
    ap: AttentionParams,
    hq: HedgehogParams,
    hk: HedgehogParams,
    causal: bool = True,
    normalize: bool = True,
) -> Tensor:
    """Hedgehog linear attention; rotary is applied to the features, after the map."""
    X = nx.as_tensor(X)
    if X.shape[-1] != ap.d:
        raise ShapeError(f"input width {X.shape[-1]} != model width {ap.d}")
    q = split_heads(linear(X, ap.wq, ap.bq), ap.num_heads)
    k = split_heads(linear(X, ap.wk, ap.bk), ap.num_heads)
    v = split_heads(linear(X, ap.wv, ap.bv), ap.num_heads)
    qf = apply_rotary(hedgehog_map(q, hq), ap.rotary_dims)
    kf = apply_rotary(hedgehog_map(k, hk), ap.rotary_dims)
    if causal:
        y = _causal_linear_scan(qf, kf, v)
        if normalize:
            den = nx.tsum(nx.mul(qf, nx.cumsum(kf, axis=-2)), axis=-1, keepdims=True)
    else:
        y = nx.matmul(qf, nx.matmul(nx.swapaxes(kf, -1, -2), v))
        if normalize:
            den = nx.tsum(nx.mul(qf, nx.tsum(kf, axis=-2, keepdims=True)), axis=-1, keepdims=True)
    if normalize:
        y = _normalize(y, den)
    y = merge_heads(y)
    if ap.wo is not None:
        y = linear(y, ap.wo, ap.bo)
    return y


# ---------------------------------------------------------------------------
# state-space scan


def _check_scan_shapes(lam, B, C, X):
    *lead, L, N = B.shape
    D = X.shape[-1]
    if C.shape != B.shape or tuple(X.shape[:-1]) != (*lead, L):
        raise ShapeError(f"scan: B {B.shape}, C {C.shape}, X {X.shape} disagree")
    try:
        np.broadcast_shapes(lam.shape, (*lead, L, N, D))
    except ValueError as exc:
        raise ShapeError(f"scan: state matrix {lam.shape} vs {(*lead, L, N, D)}") from exc
    return lead, L, N, D


def ssm_scan(lam, B, C, X) -> Tensor:
    """Sequential recurrence ``h_l = lam_l * h_{l-1} + B_l (x) X_l``, ``Y_l = C_l^T h_l``.

    Shapes: ``lam`` (..., L, N, D), ``B`` and ``C`` (..., L, N), ``X`` (..., L, D).
    ``h_0 = 0``.
    """
    lam, B, C, X = (nx.as_tensor(t) for t in (lam, B, C, X))
    lead, L, N, D = _check_scan_shapes(lam, B, C, X)
    full = (*lead, L, N, D)
    A = np.broadcast_to(lam.data, full)
    Bd, Cd, Xd = B.data, C.data, X.data
    states = np.empty(full)
    h = np.zeros((*lead, N, D))
    for l in range(L):
        h = A[..., l, :, :] * h + Bd[..., l, :, None] * Xd[..., l, None, :]
        states[..., l, :, :] = h
    out = np.einsum("...ln,...lnd->...ld", Cd, states)
    nx._count(3 * int(np.prod(lead, dtype=np.int64)) * L * N * D)

    def adjoint(g):
        gh_all = np.empty(full)
        gh = np.zeros((*lead, N, D))
        for l in range(L - 1, -1, -1):
            if l < L - 1:
                gh = A[..., l + 1, :, :] * gh
            gh = gh + Cd[..., l, :, None] * g[..., l, None, :]
            gh_all[..., l, :, :] = gh
        gC = np.einsum("...ld,...lnd->...ln", g, states)
        gB = np.einsum("...lnd,...ld->...ln", gh_all, Xd) if B.requires_grad else None
        gX = np.einsum("...lnd,...ln->...ld", gh_all, Bd) if X.requires_grad else None
        glam = None
        if lam.requires_grad:
            prev = np.zeros(full)
            prev[..., 1:, :, :] = states[..., :-1, :, :]
            glam = nx._unbroadcast(gh_all * prev, lam.shape)
        return glam, gB, gC, gX

    return nx.record(out, (lam, B, C, X), adjoint, "ssm_scan")


def selective_scan(delta, rate, B, C, X) -> Tensor:
    """:func:`ssm_scan` with ``lam_l = exp(-rate * delta_l)`` formed one step at a time.

    Shapes: ``delta`` (..., H, L), ``rate`` (H, N, D), ``B`` and ``C``
    (..., H, L, N), ``X`` (..., H, L, D). Never materializes the full
    (..., L, N, D) decay tensor, which keeps every per-step array small.
    """
    delta, rate, B, C, X = (nx.as_tensor(t) for t in (delta, rate, B, C, X))
    *lead, L, N = B.shape
    D = X.shape[-1]
    if rate.ndim != 3 or rate.shape[1:] != (N, D) or rate.shape[0] != lead[-1]:
        raise ShapeError(f"rate {rate.shape} does not match heads/state/channels of B {B.shape}, X {X.shape}")
    if delta.shape != (*lead, L) or C.shape != B.shape or X.shape[:-1] != (*lead, L):
        raise ShapeError(f"inconsistent scan shapes: delta {delta.shape}, C {C.shape}, X {X.shape}")
    dd, R, Bd, Cd, Xd = delta.data, rate.data, B.data, C.data, X.data
    states = np.empty((*lead, L, N, D))
    out = np.empty((*lead, L, D))
    h = np.zeros((*lead, N, D))
    for l in range(L):
        A = np.exp(-R * dd[..., l, None, None])
        h = A * h + Bd[..., l, :, None] * Xd[..., l, None, :]
        states[..., l, :, :] = h
        out[..., l, :] = np.einsum("...n,...nd->...d", Cd[..., l, :], h)
    nx._count(3 * int(np.prod(lead, dtype=np.int64)) * L * N * D)

    def adjoint(g):
        gh = np.zeros((*lead, N, D))
        gdelta = np.zeros_like(dd)
        grate = np.zeros((*lead, N, D))
        gB = np.empty_like(Bd)
        gX = np.empty_like(Xd)
        A_next = None
        for l in range(L - 1, -1, -1):
            if A_next is not None:
                gh *= A_next
            gh += Cd[..., l, :, None] * g[..., l, None, :]
            A = np.exp(-R * dd[..., l, None, None])
            if l > 0:
                # d h_l / d A_l = h_{l-1};  d A_l / d delta_l = -rate * A_l
                t = gh * states[..., l - 1, :, :] * A
                gdelta[..., l] = -np.einsum("...nd,...nd->...", t, np.broadcast_to(R, t.shape))
                grate -= t * dd[..., l, None, None]
            gB[..., l, :] = np.einsum("...nd,...d->...n", gh, Xd[..., l, :])
            gX[..., l, :] = np.einsum("...nd,...n->...d", gh, Bd[..., l, :])
            A_next = A
        gC = np.einsum("...ld,...lnd->...ln", g, states)
        return gdelta, nx._unbroadcast(grate, R.shape), gB, gC, gX

    return nx.record(out, (delta, rate, B, C, X), adjoint, "selective_scan")


def ssm_unrolled(lam, B, C, X, return_matrix: bool = False):
    """Materialize ``A[i, j] = C_i^T (prod_{k=j+1..i} lam_k) B_j`` and apply it to X.

    O(L^2) oracle for :func:`ssm_scan`; no gradient recording. ``A`` has shape
    (..., L, L, D): one lower-triangular mixing matrix per channel.
    """
    lam, B, C, X = (nx.as_tensor(t).data for t in (lam, B, C, X))
    *lead, L, N = B.shape
    D = X.shape[-1]
    lam = np.broadcast_to(lam, (*lead, L, N, D))
    A = np.zeros((*lead, L, L, D))
    for j in range(L):
        prod = np.ones((*lead, N, D))
        for i in range(j, L):
            if i > j:
                prod = prod * lam[..., i, :, :]
            A[..., i, j, :] = np.einsum("...n,...nd,...n->...d", C[..., i, :], prod, B[..., j, :])
    Y = np.einsum("...ijd,...jd->...id", A, X)
    return (Tensor(Y), A) if return_matrix else Tensor(Y)


def expand_for_normalization(V, lam) -> tuple[Tensor, Tensor]:
    """Append an all-ones value block and duplicate the state matrix along channels."""
    V, lam = nx.as_tensor(V), nx.as_tensor(lam)
    ones = Tensor(np.ones(V.shape))
    return nx.concat([V, ones], axis=-1), nx.concat([lam, lam], axis=-1)


# ---------------------------------------------------------------------------
# HedgeMamba


def causal_conv(X, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal conv: ``Y_l = b + sum_i w[i] * X[l - kappa + 1 + i]``."""
    X = nx.as_tensor(X)
    kappa = w.shape[0]
    if kappa < 1 or w.shape[1] != X.shape[-1]:
        raise ShapeError(f"conv kernel {w.shape} vs input width {X.shape[-1]}")
    L = X.shape[-2]
    if kappa > 1:
        pad = Tensor(np.zeros((*X.shape[:-2], kappa - 1, X.shape[-1])))
        Xp = nx.concat([pad, X], axis=-2)
    else:
        Xp = X
    y = b
    for i in range(kappa):
        y = nx.add(y, nx.mul(w[i], Xp[..., i : i + L, :]))
    return y


def time_step(X, ssm: SsmParams) -> Tensor:
    """Per-head step sizes ``softplus((X Wd + bd) Wu + bu)``, shape (..., L, H)."""
    return nx.softplus(linear(linear(X, ssm.wd, ssm.bd), ssm.wu, ssm.bu))


def state_matrix(delta: Tensor, lam: Tensor) -> Tensor:
    """``exp(-lam * delta)`` broadcast to (..., H, L, N, dh) from delta (..., H, L)."""
    d = nx.reshape(delta, (*delta.shape, 1, 1))
    lam = nx.reshape(lam, (lam.shape[0], 1, *lam.shape[1:]))
    return nx.exp(nx.neg(nx.mul(lam, d)))


def hedgemamba_forward(X, p: HedgeMambaParams, enabled=None) -> Tensor:
    """HedgeMamba mixer. Components not in ``enabled`` act as the identity."""
    X = nx.as_tensor(X)
    ap, ssm = p.attn, p.ssm
    enabled = ssm.components if enabled is None else frozenset(enabled)
    missing = enabled - ssm.components
    if missing:
        raise ShapeError(f"components {sorted(missing)} enabled but their parameters are absent")
    if X.shape[-1] != ap.d:
        raise ShapeError(f"input width {X.shape[-1]} != model width {ap.d}")
    H, dh = ap.num_heads, ap.head_dim

    gate = nx.silu(linear(X, ssm.gate_w, ssm.gate_b)) if "gate" in enabled else None
    xc = causal_conv(X, ssm.conv_w, ssm.conv_b) if "conv" in enabled else X

    Bf = hedgehog_map(split_heads(linear(xc, ap.wk, ap.bk), H), p.hk)
    Cf = hedgehog_map(split_heads(linear(xc, ap.wq, ap.bq), H), p.hq)
    Cf = apply_rotary(Cf, ap.rotary_dims)
    Bf = apply_rotary(Bf, ap.rotary_dims)
    V = split_heads(linear(xc, ap.wv, ap.bv), H)

    if "ssm" in enabled:
        delta = nx.swapaxes(time_step(xc, ssm), -1, -2)  # (..., H, L)
        rate = ssm.lam
        Bf = nx.mul(Bf, nx.reshape(delta, (*delta.shape, 1)))
    else:
        # zero rate gives Lambda == 1 for every step
        delta = Tensor(np.zeros(Bf.shape[:-1]))
        rate = Tensor(np.zeros((H, Bf.shape[-1], dh)))
    # exp(-[rate; rate] * delta) == [Lambda; Lambda], so expanding the rate expands Lambda
    V2, rate2 = expand_for_normalization(V, rate)
    scan = selective_scan(delta, rate2, Bf, Cf, V2)
    y = _normalize(scan[..., :dh], scan[..., dh:])
    y = merge_heads(y)
    if gate is not None:
        y = nx.mul(y, gate)
    if ap.wo is not None:
        y = linear(y, ap.wo, ap.bo)
    return y


# ---------------------------------------------------------------------------
# initializers


def _uniform(rng, shape, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


def init_attention(
    d: int, num_heads: int, rng: np.random.Generator, rotary_fraction: float = 0.0,
    out_proj: bool = True, std: float = 0.02,
) -> AttentionParams:
    def w():
        return Tensor(rng.normal(0.0, std, size=(d, d)))

    def b():
        return Tensor(np.zeros(d))

    return AttentionParams(
        wq=w(), bq=b(), wk=w(), bk=b(), wv=w(), bv=b(),
        num_heads=num_heads, rotary_fraction=rotary_fraction,
        wo=w() if out_proj else None, bo=b() if out_proj else None,
    )


def init_hedgehog(num_heads: int, head_dim: int, rng: np.random.Generator) -> HedgehogParams:
    """Default ``nn.Linear``-style init: uniform in +-1/sqrt(head_dim)."""
    return HedgehogParams(
        w=_uniform(rng, (num_heads, head_dim, head_dim), head_dim),
        b=_uniform(rng, (num_heads, head_dim), head_dim),
    )
