"""
Two-stage distillation on a toy corpus
======================================

A small softmax teacher is trained on synthetic text. Its attention is then
replaced by Hedgehog linear attention whose feature maps are fitted by
matching each block's output (stage 1), the layer is converted to
HedgeMamba, and everything except the embeddings is fine-tuned with
cross-entropy (stage 2). We compare how the token budget is split.

Sizes are kept tiny so the script runs in a couple of minutes; the
acceptance tests use a larger teacher and budget.
"""

import time

from hedgemamba import data as dt
from hedgemamba import distill as ds
from hedgemamba import model as md

corpus = dt.synthetic_corpus(200_000, seed=0)
print(dt.detokenize(corpus.ids[:160]).decode())

# %% teacher
t0 = time.time()
teacher = md.init_model(md.ModelConfig(d_model=32, n_layers=2, n_heads=2, d_mlp=128, seed=0))
m = ds.train_teacher(teacher, corpus, 400, batch_size=8, seq_len=32, peak_lr=3e-3, val_windows=64)
print(f"teacher PPL {m.initial_val_ppl:.2f} -> {m.final_val_ppl:.2f} ({time.time() - t0:.0f}s)")

# %% one split, stage by stage
plan = ds.DistillPlan(total_tokens=200 * 8 * 32, split_s1_percent=10, batch_size=8, seq_len=32,
                      peak_lr_s1=1e-2, peak_lr_s2=3e-4, val_windows=64)
print(f"stage 1: {plan.stage1_steps} steps, stage 2: {plan.stage2_steps} steps")
result = ds.run_distillation(teacher, corpus, plan)
print(f"cosine matching loss {result.stage1.losses[0]:.3f} -> {result.stage1.losses[-1]:.3f}")
print(f"PPL after stage 1 {result.stage1.final_val_ppl:.2f}, after stage 2 {result.final_ppl:.2f}")

# %% the split sweep
for split in (100, 50, 10, 0):
    plan = ds.DistillPlan(total_tokens=200 * 8 * 32, split_s1_percent=split, batch_size=8, seq_len=32,
                          peak_lr_s1=1e-2, peak_lr_s2=3e-4, val_windows=64)
    r = ds.run_distillation(teacher, corpus, plan)
    print(f"{split:>3}/{100 - split:<3} -> {r.student.config.mixer_kind:<10} PPL {r.final_ppl:.3f}")
