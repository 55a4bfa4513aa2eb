"""
Sequence mixers side by side
============================

Softmax attention, Hedgehog linear attention and a state-space scan all
mix information across positions. This walk-through builds each one on the
same input, checks the identities that tie them together, and counts how
their cost grows with sequence length.
"""

import numpy as np

from hedgemamba import data as dt
from hedgemamba import mixers as mx

rng = np.random.default_rng(0)
L, d, H = 6, 8, 2
X = rng.standard_normal((L, d))

# %% softmax attention, quadratic in L
ap = mx.init_attention(d, H, rng, rotary_fraction=0.5, std=0.4)
print("softmax attention output", mx.softmax_attention(X, ap).shape)

# %% the Hedgehog feature map: positive features that sum to one
hq, hk = mx.init_hedgehog(H, d // H, rng), mx.init_hedgehog(H, d // H, rng)
phi = mx.hedgehog_map(rng.standard_normal((H, L, d // H)), hq).data
print("feature dim", phi.shape[-1], "min", phi.min().round(4), "row sums", phi.sum(-1)[0].round(12))

# %% linear attention: same scores, computed with a running state
y = mx.linear_attention(X, ap, hq, hk)
print("hedgehog attention output", y.shape)

# %% a scan with unit decay is unnormalized linear attention
N, D = 4, 3
B, C, V = rng.standard_normal((L, N)), rng.standard_normal((L, N)), rng.standard_normal((L, D))
scan = mx.ssm_scan(np.ones((L, N, D)), B, C, V).data
print("unit decay vs masked C B^T V:", np.abs(scan - np.tril(C @ B.T) @ V).max())

# %% with decay the scan equals its unrolled L x L form
lam = rng.uniform(0.5, 1.0, (L, N, D))
y_scan = mx.ssm_scan(lam, B, C, V).data
y_unrolled, A = mx.ssm_unrolled(lam, B, C, V, return_matrix=True)
print("scan vs unrolled:", np.abs(y_scan - y_unrolled.data).max())
print("mixing matrix for channel 0 is lower triangular:", np.allclose(np.triu(A[..., 0], 1), 0))

# %% expanding the state computes the normalizer in the same scan
V2, lam2 = mx.expand_for_normalization(V, lam)
both = mx.ssm_scan(lam2, B, C, V2).data
print("value block + ones block:", both.shape, "normalizer = scan of ones:",
      np.allclose(both[:, D:], mx.ssm_scan(lam, B, C, np.ones((L, D))).data))

# %% counted multiply-adds vs sequence length
lengths = [64, 128, 256, 512, 1024]
for kind in dt.BENCH_MIXERS:
    curve = dt.flop_bench(kind, lengths)
    print(f"{kind:>10}: cost ~ L^{curve.exponent:.3f}  ({curve.multadds[0]} -> {curve.multadds[-1]} mult-adds)")
