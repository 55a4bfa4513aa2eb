"""
From Hedgehog to HedgeMamba without changing a single output
============================================================

The Hedgehog maps become the B and C paths of a selective scan, the value
projection feeds the scanned input, and the decay, convolution and gate
start out as identities. The converted model should therefore produce the
same logits as the one it came from.
"""

import math

import numpy as np

from hedgemamba import bridge
from hedgemamba import data as dt
from hedgemamba import model as md
from hedgemamba import numerics as nx

# %% the two constants behind the identity inits
print("softplus^-1(1) =", bridge.softplus_inverse(1.0), " check:", math.log(math.e - 1))
z = bridge.silu_inverse_one()
print("silu^-1(1)     =", z, " silu(z) =", z / (1 + math.exp(-z)))

# %% a Hedgehog model, nudged away from its init so the check is not trivial
cfg = md.ModelConfig(mixer_kind="hedgehog", d_model=32, n_layers=2, n_heads=2, d_mlp=64, seed=1)
hh = md.init_model(cfg)
rng = np.random.default_rng(1)
for t in hh.parameters().values():
    t.data = t.data + rng.normal(0, 0.05, t.shape)

hm = md.convert_mixer(hh, "hedgemamba")
print("extra parameters from the conversion:", hm.num_parameters() - hh.num_parameters(),
      "=", md.mamba_extra_parameters(hm.config))

# %% each added component is an identity on a probe input
probe = rng.standard_normal((16, 32)) * 3
report = bridge.identity_report(hm.layers[0].mixer, probe)
for name, dev in report.deviations.items():
    print(f"  {name:>5} deviation from identity: {dev:.2e}")

# %% same logits, same perplexity
corpus = dt.synthetic_corpus(50_000, seed=2)
ids = corpus.val_ids[:128].reshape(2, 64)
with nx.no_grad():
    gap = np.abs(md.lm_forward(ids, hm).data - md.lm_forward(ids, hh).data).max()
print("max logit difference:", gap)
print("val PPL hedgehog  :", dt.perplexity(hh, corpus.val_ids, 64))
print("val PPL hedgemamba:", dt.perplexity(hm, corpus.val_ids, 64))

# %% switching one component away from identity breaks the match
layer = hm.layers[0].mixer
layer.ssm.gate_b.data[:] = 0.0
with nx.no_grad():
    gap = np.abs(md.lm_forward(ids, hm).data - md.lm_forward(ids, hh).data).max()
print("after zeroing the gate bias, max logit difference:", round(float(gap), 4))
