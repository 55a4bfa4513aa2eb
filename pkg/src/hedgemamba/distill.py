"""Two-stage distillation engine.

Stage 1 trains only the Hedgehog feature maps with a per-layer cosine
matching loss against the frozen teacher. Stage 2 fine-tunes everything
except the input/output embeddings with next-token cross-entropy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as dt
from . import model as md
from . import numerics as nx
from .numerics import NonFiniteError, Tensor

log = logging.getLogger("hedgemamba")


class FrozenParameterError(RuntimeError):
    """A parameter that should have stayed fixed was modified."""


@dataclass
class DistillPlan:
    total_tokens: int
    split_s1_percent: float = 10.0
    batch_size: int = 16
    seq_len: int = 128
    peak_lr_s1: float = 1e-2
    peak_lr_s2: float | None = None
    warmup_fraction: float = 0.1
    min_lr_factor: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    seed: int = 0
    match_point: str = "block"
    eval_interval: int = 0
    val_windows: int | None = 64

    def __post_init__(self):
        if not 0.0 <= self.split_s1_percent <= 100.0:
            raise ValueError("split_s1_percent must lie in [0, 100]")
        if self.total_tokens < 0 or self.total_tokens % self.tokens_per_step:
            raise ValueError(
                f"total_tokens={self.total_tokens} must be a non-negative multiple of "
                f"batch_size*seq_len={self.tokens_per_step}"
            )
        if self.match_point not in ("block", "mixer"):
            raise ValueError("match_point must be 'block' or 'mixer'")
        if self.peak_lr_s2 is None:
            self.peak_lr_s2 = self.peak_lr_s1 / 10.0

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def total_steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    @property
    def stage1_steps(self) -> int:
        # stage 1 takes the floor, stage 2 the remainder
        return int(math.floor(self.total_steps * self.split_s1_percent / 100.0 + 1e-9))

    @property
    def stage2_steps(self) -> int:
        return self.total_steps - self.stage1_steps

    @property
    def tokens_s1(self) -> int:
        return self.stage1_steps * self.tokens_per_step

    @property
    def tokens_s2(self) -> int:
        return self.stage2_steps * self.tokens_per_step

    def schedule(self, stage: int) -> "Schedule":
        steps = self.stage1_steps if stage == 1 else self.stage2_steps
        peak = self.peak_lr_s1 if stage == 1 else self.peak_lr_s2
        return Schedule(steps, peak, int(round(self.warmup_fraction * steps)), self.min_lr_factor)


@dataclass
class Schedule:
    total_steps: int
    peak_lr: float
    warmup_steps: int
    min_lr_factor: float = 0.1


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warm-up from 0, then cosine decay reaching ``min_lr_factor * peak`` at the last step."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    peak, w = schedule.peak_lr, schedule.warmup_steps
    if step < w:
        return peak * step / w
    span = schedule.total_steps - 1 - w
    progress = 1.0 if span <= 0 else (step - w) / span
    m = schedule.min_lr_factor
    return peak * (m + (1.0 - m) * 0.5 * (1.0 + math.cos(math.pi * progress)))


# ---------------------------------------------------------------------------
# losses


def stage1_loss(teacher_outputs, student_outputs) -> Tensor:
    """Mean of ``1 - cos(teacher, student)`` over layers and positions.

    A zero-norm vector has cosine 0 with anything, so it contributes 1.
    """
    if len(teacher_outputs) != len(student_outputs):
        raise ValueError(f"{len(teacher_outputs)} teacher layers vs {len(student_outputs)} student layers")
    if not teacher_outputs:
        raise ValueError("need at least one layer")
    terms = []
    for t, s in zip(teacher_outputs, student_outputs):
        t, s = nx.as_tensor(t), nx.as_tensor(s)
        if t.shape != s.shape:
            raise nx.ShapeError(f"teacher {t.shape} vs student {s.shape}")
        dot = nx.tsum(nx.mul(t, s), axis=-1)
        norms = nx.mul(nx.tsum(nx.square(t), axis=-1), nx.tsum(nx.square(s), axis=-1))
        cos = nx.div(dot, nx.sqrt(nx.maximum(norms, 1e-300)))
        terms.append(nx.mean(nx.sub(1.0, cos)))
    total = terms[0]
    for term in terms[1:]:
        total = nx.add(total, term)
    return nx.mul(total, 1.0 / len(terms))


def stage2_loss(logits, targets) -> Tensor:
    """Mean next-token NLL; ``targets[t]`` is the token following position t."""
    logits = nx.as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise nx.ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError("target id out of range")
    return nx.neg(nx.mean(nx.pick(nx.log_softmax(logits, axis=-1), targets)))


# ---------------------------------------------------------------------------
# optimizer


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for t in params.values():
        if t.grad is not None:
            if not np.all(np.isfinite(t.grad)):
                raise NonFiniteError("non-finite gradient")
            sq += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def decays(name: str, t: Tensor) -> bool:
    """Weight decay goes to matrices and higher-rank tensors, not biases or norm gains."""
    return t.ndim >= 2


@dataclass
class AdamW:
    params: dict[str, Tensor]
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    eps: float = 1e-8
    decay_filter: Callable[[str, Tensor], bool] = decays
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        """Decoupled weight decay, then the bias-corrected Adam update. Clears grads."""
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            data = p.data
            if self.weight_decay and self.decay_filter(name, p):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def optimizer_step(params: dict[str, Tensor], opt: AdamW, lr: float, grad_clip: float = 1.0) -> float:
    """Clip the global gradient norm, then apply one AdamW update. Returns the pre-clip norm."""
    norm = clip_grad_norm(params, grad_clip)
    opt.step(lr)
    return norm


# ---------------------------------------------------------------------------
# trainability


def is_feature_map(name: str) -> bool:
    return ".mixer.hq." in name or ".mixer.hk." in name


def is_embedding(name: str) -> bool:
    return name in ("embed", "head")


def all_but_embeddings(name: str) -> bool:
    return not is_embedding(name)


def set_trainable(model: md.Model, predicate: Callable[[str], bool]) -> dict[str, Tensor]:
    trainable = {}
    for name, t in model.parameters().items():
        t.requires_grad = bool(predicate(name))
        t.grad = None
        if t.requires_grad:
            trainable[name] = t
    return trainable


def snapshot(model: md.Model, names=None) -> dict[str, np.ndarray]:
    params = model.parameters()
    return {n: params[n].data.copy() for n in (params if names is None else names)}


def assert_unchanged(model: md.Model, snap: dict[str, np.ndarray], what: str = "frozen") -> None:
    params = model.parameters()
    drifted = [n for n, arr in snap.items() if not np.array_equal(params[n].data, arr)]
    if drifted:
        raise FrozenParameterError(f"{what} parameters changed: {drifted[:5]}")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class StageMetrics:
    stage: str
    records: list[dict] = field(default_factory=list)
    initial_val_ppl: float | None = None
    final_val_ppl: float | None = None
    tokens: int = 0

    def add(self, **record) -> dict:
        self.records.append(record)
        return record

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]


class MetricsLog:
    """Append-only ``key=value`` lines, one record per line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(format_record(record) + "\n")


def format_record(record: dict) -> str:
    parts = []
    for k, v in record.items():
        if isinstance(v, float):
            v = repr(v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def read_metrics(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for item in line.split():
            k, _, v = item.partition("=")
            try:
                rec[k] = int(v)
            except ValueError:
                try:
                    rec[k] = float(v)
                except ValueError:
                    rec[k] = v
        out.append(rec)
    return out


StepHook = Callable[[int, md.Model], None]


def _val_ppl(model, corpus: dt.Corpus, plan: DistillPlan) -> float:
    return dt.perplexity(model, corpus.val_ids, plan.seq_len, max_windows=plan.val_windows)


def _should_eval(step: int, steps: int, interval: int) -> bool:
    return step == steps - 1 or (interval > 0 and (step + 1) % interval == 0)


# ---------------------------------------------------------------------------
# stages


def run_stage1(
    teacher: md.Model,
    student: md.Model,
    corpus: dt.Corpus,
    plan: DistillPlan,
    metrics_log: MetricsLog | None = None,
    evaluate: bool = True,
    on_step: StepHook | None = None,
) -> StageMetrics:
    """Train only the Hedgehog feature maps to match teacher layer outputs."""
    if student.config.mixer_kind != "hedgehog":
        raise ValueError("stage 1 needs a Hedgehog student")
    steps = plan.stage1_steps
    trainable = set_trainable(student, is_feature_map)
    set_trainable(teacher, lambda n: False)
    frozen = snapshot(student, [n for n in student.parameters() if n not in trainable])
    teacher_snap = snapshot(teacher)
    metrics = StageMetrics("1")
    if evaluate:
        metrics.initial_val_ppl = _val_ppl(student, corpus, plan)
    opt = AdamW(trainable, betas=plan.betas, weight_decay=plan.weight_decay)
    sched = plan.schedule(1)
    batches = dt.train_batches(corpus, plan.seq_len, plan.batch_size, seed=[plan.seed, 1])
    for step in range(steps):
        x, _ = next(batches)
        with nx.no_grad():
            _, t_hidden = md.lm_forward(x, teacher, return_hidden=plan.match_point)
        _, s_hidden = md.lm_forward(x, student, return_hidden=plan.match_point)
        loss = stage1_loss(t_hidden, s_hidden)
        nx.backward(loss)
        lr = lr_at(step, sched)
        optimizer_step(trainable, opt, lr, plan.grad_clip)
        metrics.tokens += plan.tokens_per_step
        rec = {"stage": 1, "step": step, "tokens": metrics.tokens, "loss": loss.item(), "lr": lr}
        if evaluate and _should_eval(step, steps, plan.eval_interval):
            rec["val_ppl"] = _val_ppl(student, corpus, plan)
        metrics.add(**rec)
        if metrics_log:
            metrics_log.write(rec)
        if on_step:
            on_step(step, student)
    nx.reset_tape()
    assert_unchanged(student, frozen)
    assert_unchanged(teacher, teacher_snap, "teacher")
    if evaluate:
        metrics.final_val_ppl = metrics.records[-1]["val_ppl"] if steps else metrics.initial_val_ppl
    set_trainable(student, lambda n: False)
    return metrics


def run_stage2(
    student: md.Model,
    corpus: dt.Corpus,
    plan: DistillPlan,
    trainable_mask: Callable[[str], bool] = all_but_embeddings,
    metrics_log: MetricsLog | None = None,
    steps: int | None = None,
    stage_label: str = "2",
    evaluate: bool = True,
    on_step: StepHook | None = None,
) -> StageMetrics:
    """Cross-entropy fine-tuning of every parameter selected by ``trainable_mask``."""
    steps = plan.stage2_steps if steps is None else steps
    trainable = set_trainable(student, trainable_mask)
    frozen = snapshot(student, [n for n in student.parameters() if n not in trainable])
    metrics = StageMetrics(stage_label)
    if evaluate:
        metrics.initial_val_ppl = _val_ppl(student, corpus, plan)
    opt = AdamW(trainable, betas=plan.betas, weight_decay=plan.weight_decay)
    sched = plan.schedule(2) if steps == plan.stage2_steps else Schedule(
        steps, plan.peak_lr_s2, int(round(plan.warmup_fraction * steps)), plan.min_lr_factor
    )
    batches = dt.train_batches(corpus, plan.seq_len, plan.batch_size, seed=[plan.seed, 2])
    for step in range(steps):
        x, y = next(batches)
        loss = stage2_loss(md.lm_forward(x, student), y)
        nx.backward(loss)
        lr = lr_at(step, sched)
        optimizer_step(trainable, opt, lr, plan.grad_clip)
        metrics.tokens += plan.tokens_per_step
        rec = {"stage": stage_label, "step": step, "tokens": metrics.tokens, "loss": loss.item(), "lr": lr}
        if evaluate and _should_eval(step, steps, plan.eval_interval):
            rec["val_ppl"] = _val_ppl(student, corpus, plan)
        metrics.add(**rec)
        if metrics_log:
            metrics_log.write(rec)
        if on_step:
            on_step(step, student)
    nx.reset_tape()
    assert_unchanged(student, frozen)
    if evaluate:
        metrics.final_val_ppl = metrics.records[-1]["val_ppl"] if steps else metrics.initial_val_ppl
    set_trainable(student, lambda n: False)
    return metrics


def train_teacher(
    model: md.Model,
    corpus: dt.Corpus,
    steps: int,
    batch_size: int = 16,
    seq_len: int = 128,
    peak_lr: float = 3e-3,
    seed: int = 0,
    metrics_log: MetricsLog | None = None,
    evaluate: bool = True,
    val_windows: int | None = 64,
    on_step: StepHook | None = None,
) -> StageMetrics:
    """Pretrain a softmax-attention model with the stage-2 machinery, all parameters trainable."""
    plan = DistillPlan(
        total_tokens=steps * batch_size * seq_len, split_s1_percent=0.0, batch_size=batch_size,
        seq_len=seq_len, peak_lr_s1=peak_lr, peak_lr_s2=peak_lr, seed=seed, val_windows=val_windows,
    )
    return run_stage2(model, corpus, plan, lambda n: True, metrics_log, stage_label="teacher", evaluate=evaluate,
                      on_step=on_step)


@dataclass
class DistillResult:
    student: md.Model
    stage1: StageMetrics
    stage2: StageMetrics

    @property
    def final_ppl(self) -> float:
        return self.stage2.final_val_ppl


def run_distillation(
    teacher: md.Model,
    corpus: dt.Corpus,
    plan: DistillPlan,
    mixer: str = "hedgemamba",
    components=("ssm", "conv", "gate"),
    metrics_log: MetricsLog | None = None,
    kappa: int | None = None,
    d_rank: int | None = None,
    after_stage1: Callable[[md.Model], None] | None = None,
    on_step: StepHook | None = None,
) -> DistillResult:
    """Full recipe: Hedgehog stage 1, bridge conversion, stage 2.

    With no stage-2 steps the student stays a pure Hedgehog model.
    """
    if mixer not in ("hedgehog", "hedgemamba"):
        raise ValueError("student mixer must be 'hedgehog' or 'hedgemamba'")
    student = md.convert_mixer(teacher, "hedgehog", seed=plan.seed)
    s1 = run_stage1(teacher, student, corpus, plan, metrics_log, on_step=on_step)
    if after_stage1 is not None:
        after_stage1(student)
    if mixer == "hedgemamba" and plan.stage2_steps > 0:
        student = md.convert_mixer(
            student, "hedgemamba", components=components, kappa=kappa, d_rank=d_rank, seed=plan.seed
        )
    s2 = run_stage2(student, corpus, plan, metrics_log=metrics_log, on_step=on_step)
    log.info("distill split=%s/%s final val ppl %.4f", plan.split_s1_percent,
             100 - plan.split_s1_percent, s2.final_val_ppl)
    return DistillResult(student, s1, s2)
