"""Stage-2 initialization: lift a trained Hedgehog mixer into HedgeMamba.

The query/key/value/output maps and both feature maps are copied unchanged;
the Mamba-side components start as exact or near-exact identities so the
converted mixer reproduces the Hedgehog output at step 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import mixers as mx
from . import numerics as nx
from .numerics import ShapeError, Tensor


def softplus_inverse(y: float = 1.0) -> float:
    """Closed form ``ln(e^y - 1)``; 0.5413248546129181 for y = 1."""
    return math.log(math.expm1(y))


def silu_inverse_one() -> float:
    """Root of ``z * sigmoid(z) = 1`` on [1, 2], found by bisection (~1.27846454)."""

    def f(z):
        return z * special.expit(z) - 1.0

    root, info = optimize.bisect(f, 1.0, 2.0, xtol=1e-15, full_output=True)
    if not info.converged or abs(f(root)) > 1e-12:
        raise ArithmeticError("bisection for silu^-1(1) did not converge")
    return root


def init_state_identity(
    num_heads: int, state_size: int, head_dim: int, d_rank: int
) -> tuple[Tensor, Tensor, Tensor]:
    """Decay rates and time-step up-projection giving Lambda = 1 and Delta = 1."""
    lam = Tensor(np.zeros((num_heads, state_size, head_dim)))
    wu = Tensor(np.zeros((d_rank, num_heads)))
    bu = Tensor(np.full(num_heads, softplus_inverse(1.0)))
    return lam, wu, bu


def init_conv_identity(kappa: int, d: int) -> tuple[Tensor, Tensor]:
    if kappa < 1:
        raise ValueError("kernel size must be >= 1")
    w = np.zeros((kappa, d))
    w[-1] = 1.0
    return Tensor(w), Tensor(np.zeros(d))


def init_gate_identity(d: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((d, d))), Tensor(np.full(d, silu_inverse_one()))


def _copy(t: Tensor | None) -> Tensor | None:
    return None if t is None else Tensor(t.data.copy())


def copy_attention(p: mx.AttentionParams) -> mx.AttentionParams:
    return mx.AttentionParams(
        wq=_copy(p.wq), bq=_copy(p.bq), wk=_copy(p.wk), bk=_copy(p.bk),
        wv=_copy(p.wv), bv=_copy(p.bv), num_heads=p.num_heads,
        rotary_fraction=p.rotary_fraction, wo=_copy(p.wo), bo=_copy(p.bo),
    )


def copy_hedgehog(p: mx.HedgehogParams) -> mx.HedgehogParams:
    return mx.HedgehogParams(w=_copy(p.w), b=_copy(p.b))


def substitute_linear_attention(
    layer: mx.LinearAttentionParams,
    components=mx.COMPONENTS,
    kappa: int = 4,
    d_rank: int = 8,
    rng: np.random.Generator | None = None,
) -> mx.HedgeMambaParams:
    """Map B <- phi_k(K(X)), C <- phi_q(Q(X)), X <- V(X), Lambda <- 1.

    Every requested Mamba component is initialized to the identity. The
    time-step down-projection is random, which is harmless because its
    up-projection starts at zero.
    """
    if not isinstance(layer, mx.LinearAttentionParams):
        raise TypeError("substitution needs a Hedgehog linear-attention layer")
    unknown = set(components) - set(mx.COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    ap = layer.attn
    H, dh, d = ap.num_heads, ap.head_dim, ap.d
    if layer.hq.w.shape != (H, dh, dh) or layer.hk.w.shape != (H, dh, dh):
        raise ShapeError("feature-map weights do not match the attention head layout")
    rng = np.random.default_rng(0) if rng is None else rng
    ssm = mx.SsmParams()
    if "ssm" in components:
        ssm.lam, ssm.wu, ssm.bu = init_state_identity(H, layer.hk.feature_dim, dh, d_rank)
        bound = 1.0 / math.sqrt(d)
        ssm.wd = Tensor(rng.uniform(-bound, bound, size=(d, d_rank)))
        ssm.bd = Tensor(rng.uniform(-bound, bound, size=d_rank))
    if "conv" in components:
        ssm.conv_w, ssm.conv_b = init_conv_identity(kappa, d)
    if "gate" in components:
        ssm.gate_w, ssm.gate_b = init_gate_identity(d)
    return mx.HedgeMambaParams(
        attn=copy_attention(ap), hq=copy_hedgehog(layer.hq), hk=copy_hedgehog(layer.hk), ssm=ssm
    )


@dataclass
class IdentityInitReport:
    """Max deviation of each Mamba component from the identity on a probe input."""

    deviations: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float = 1e-6) -> bool:
        return all(v < tol for v in self.deviations.values())


def identity_report(p: mx.HedgeMambaParams, X) -> IdentityInitReport:
    X = nx.as_tensor(X)
    ssm = p.ssm
    report = IdentityInitReport()
    with nx.no_grad():
        if ssm.gate_w is not None:
            gate = nx.silu(mx.linear(X, ssm.gate_w, ssm.gate_b))
            report.deviations["gate"] = float(np.abs(gate.data - 1.0).max())
        if ssm.conv_w is not None:
            conv = mx.causal_conv(X, ssm.conv_w, ssm.conv_b)
            report.deviations["conv"] = float(np.abs(conv.data - X.data).max())
        if ssm.lam is not None:
            delta = mx.time_step(X, ssm)
            lam = mx.state_matrix(nx.swapaxes(delta, -1, -2), ssm.lam)
            report.deviations["delta"] = float(np.abs(delta.data - 1.0).max())
            report.deviations["ssm"] = float(np.abs(lam.data - 1.0).max())
    return report
