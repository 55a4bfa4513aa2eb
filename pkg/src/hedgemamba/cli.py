"""Command-line entry point: corpus generation, teacher training, distillation, eval, bench, sweep.

Configuration comes from defaults, then an optional ``key = value`` file
(``--config``), then command-line flags. Every checkpoint header carries the
full resolved configuration under ``run.*`` keys.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path


from . import data as dt
from . import distill as ds
from . import mixers as mx
from . import model as md
from .numerics import NonFiniteError

log = logging.getLogger("hedgemamba")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# files written under --out
TEACHER_CKPT = "teacher.ckpt"
STUDENT_CKPT = "student.ckpt"
STAGE1_CKPT = "student_stage1.ckpt"
CORPUS_FILE = "corpus.txt"


class UsageError(Exception):
    """Bad flags, config keys or input files."""


@dataclass
class RunConfig:
    # model
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_mlp: int = 256
    rotary_fraction: float = 0.25
    mixer: str = "hedgemamba"
    components: str = "ssm,conv,gate"
    kappa: int = 4
    d_rank: int = 8
    # data
    corpus: str = ""
    corpus_bytes: int = 1_000_000
    val_fraction: float = 0.01
    # schedule
    tokens: int = 262_144
    split: str = "10/90"
    batch: int = 8
    seq_len: int = 64
    lr_s1: float = 1e-2
    lr_s2: float = 0.0
    warmup_fraction: float = 0.1
    min_lr_factor: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    match_point: str = "block"
    eval_interval: int = 0
    val_windows: int = 0
    checkpoint_interval: int = 0
    # teacher
    teacher: str = ""
    teacher_steps: int = 2000
    teacher_lr: float = 3e-3
    # eval / bench / sweep
    checkpoint: str = ""
    bench_mixers: str = "softmax,hedgehog,hedgemamba,scan"
    bench_lengths: str = "64,128,256,512,1024"
    bench_d: int = 8
    sweep_splits: str = "100/0,50/50,10/90,0/100"
    workers: int = 1
    # run
    seed: int = 0
    out: str = "runs"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def items(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    # derived views

    def split_pair(self) -> tuple[float, float]:
        return parse_split(self.split)

    def component_tuple(self) -> tuple[str, ...]:
        comps = tuple(c.strip() for c in self.components.split(",") if c.strip())
        unknown = set(comps) - set(mx.COMPONENTS)
        if unknown:
            raise UsageError(f"unknown components {sorted(unknown)}; choose from {','.join(mx.COMPONENTS)}")
        return comps

    def model_config(self, mixer_kind: str = "softmax") -> md.ModelConfig:
        return md.ModelConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_layers=self.n_layers,
            n_heads=self.n_heads, d_mlp=self.d_mlp, rotary_fraction=self.rotary_fraction,
            mixer_kind=mixer_kind, components=self.component_tuple(), kappa=self.kappa,
            d_rank=self.d_rank, seed=self.seed,
        )

    def plan(self) -> ds.DistillPlan:
        s1, _ = self.split_pair()
        return ds.DistillPlan(
            total_tokens=self.tokens, split_s1_percent=s1, batch_size=self.batch, seq_len=self.seq_len,
            peak_lr_s1=self.lr_s1, peak_lr_s2=self.lr_s2 or None, warmup_fraction=self.warmup_fraction,
            min_lr_factor=self.min_lr_factor, grad_clip=self.grad_clip, weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2), seed=self.seed, match_point=self.match_point,
            eval_interval=self.eval_interval, val_windows=self.val_windows or None,
        )


def parse_split(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in str(text).split("/"))
    except ValueError:
        raise UsageError(f"split must look like S1/S2, got {text!r}") from None
    if a < 0 or b < 0 or abs(a + b - 100.0) > 1e-9:
        raise UsageError(f"split {text!r} must be two non-negative percentages summing to 100")
    return a, b


def _coerce(name: str, raw: str):
    field_type = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    try:
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {name!r}: cannot parse {raw!r} as {field_type}") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    items = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{p}:{lineno}: expected key = value")
        if key not in known:
            raise UsageError(f"{p}:{lineno}: unknown config key {key!r}")
        items[key] = value.strip()
    return items


FLAG_KEYS = ("out", "seed", "split", "mixer", "components", "tokens", "seq_len", "batch",
             "checkpoint", "teacher", "corpus", "workers")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    cfg = RunConfig()
    if args.config:
        cfg = cfg.replace(**{k: _coerce(k, v) for k, v in read_config_file(args.config).items()})
    for item in args.set or []:
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in {f.name for f in dataclasses.fields(RunConfig)}:
            raise UsageError(f"--set expects a known key=value, got {item!r}")
        cfg = cfg.replace(**{key: _coerce(key, value.strip())})
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg = cfg.replace(**{key: value})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    parse_split(cfg.split)
    cfg.component_tuple()
    if cfg.mixer not in md.MIXER_KINDS:
        raise UsageError(f"--mixer must be one of {'|'.join(md.MIXER_KINDS)}")
    if cfg.match_point not in ("block", "mixer"):
        raise UsageError("match_point must be block or mixer")
    for name in ("tokens", "batch", "seq_len", "teacher_steps", "workers", "corpus_bytes"):
        if getattr(cfg, name) < (0 if name in ("tokens", "teacher_steps") else 1):
            raise UsageError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# helpers


def out_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_corpus(cfg: RunConfig) -> dt.Corpus:
    if cfg.corpus:
        return dt.Corpus.from_files([s for s in cfg.corpus.split(",") if s], cfg.val_fraction)
    return dt.synthetic_corpus(cfg.corpus_bytes, seed=0, val_fraction=cfg.val_fraction)


def header(cfg: RunConfig, **extra) -> dict[str, str]:
    items = {f"run.{k}": v for k, v in cfg.items().items()}
    items.update({k: str(v) for k, v in extra.items()})
    return items


def round_tokens(cfg: RunConfig) -> RunConfig:
    per_step = cfg.batch * cfg.seq_len
    if cfg.tokens % per_step:
        rounded = max(per_step, round(cfg.tokens / per_step) * per_step)
        log.warning("tokens=%d is not a multiple of batch*seq_len=%d; using %d", cfg.tokens, per_step, rounded)
        cfg = cfg.replace(tokens=rounded)
    return cfg


def checkpoint_hook(cfg: RunConfig, directory: Path, stage: str):
    if cfg.checkpoint_interval <= 0:
        return None

    def hook(step, model):
        if (step + 1) % cfg.checkpoint_interval == 0:
            md.save_checkpoint(directory / f"{stage}_step{step + 1}.ckpt", model, header(cfg, step=step + 1))

    return hook


ARCH_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "rotary_fraction")


def load_teacher(cfg: RunConfig) -> md.Model:
    path = Path(cfg.teacher) if cfg.teacher else Path(cfg.out) / TEACHER_CKPT
    if not path.is_file():
        raise UsageError(f"teacher checkpoint not found: {path} (run train-teacher first or pass --teacher)")
    teacher, _ = md.load_checkpoint(path)
    if teacher.config.mixer_kind != "softmax":
        raise UsageError(f"{path} holds a {teacher.config.mixer_kind} model, not a softmax teacher")
    want = cfg.model_config()
    mismatch = [k for k in ARCH_KEYS if getattr(teacher.config, k) != getattr(want, k)]
    if mismatch:
        detail = ", ".join(f"{k}: config {getattr(want, k)} vs checkpoint {getattr(teacher.config, k)}" for k in mismatch)
        raise UsageError(f"teacher checkpoint does not match config ({detail})")
    return teacher


# ---------------------------------------------------------------------------
# commands


def cmd_gen_corpus(cfg: RunConfig) -> Path:
    path = out_dir(cfg) / CORPUS_FILE
    path.write_text(dt.synthetic_text(cfg.corpus_bytes, seed=cfg.seed))
    log.info("wrote %d bytes to %s", path.stat().st_size, path)
    print(path)
    return path


def cmd_train_teacher(cfg: RunConfig) -> Path:
    out = out_dir(cfg)
    corpus = load_corpus(cfg)
    model = md.init_model(cfg.model_config("softmax"))
    metrics_path = out / "teacher.metrics"
    metrics_path.unlink(missing_ok=True)
    m = ds.train_teacher(
        model, corpus, cfg.teacher_steps, batch_size=cfg.batch, seq_len=cfg.seq_len,
        peak_lr=cfg.teacher_lr, seed=cfg.seed, metrics_log=ds.MetricsLog(metrics_path),
        val_windows=cfg.val_windows or None, on_step=checkpoint_hook(cfg, out, "teacher"),
    )
    path = out / TEACHER_CKPT
    md.save_checkpoint(path, model, header(cfg, stage="teacher", tokens_seen=m.tokens))
    print(f"teacher val_ppl={m.final_val_ppl:.6f} checkpoint={path}")
    return path


def _distill_into(cfg: RunConfig, teacher: md.Model, corpus: dt.Corpus, out: Path) -> ds.DistillResult:
    out.mkdir(parents=True, exist_ok=True)
    cfg = round_tokens(cfg)
    plan = cfg.plan()
    metrics_path = out / "distill.metrics"
    metrics_path.unlink(missing_ok=True)
    mixer = "hedgehog" if cfg.mixer == "softmax" else cfg.mixer
    if cfg.mixer == "softmax":
        log.warning("softmax is not a student mixer; distilling into hedgehog")

    def save_stage1(student):
        md.save_checkpoint(out / STAGE1_CKPT, student, header(cfg, stage="1", tokens_seen=plan.tokens_s1))

    result = ds.run_distillation(
        teacher, corpus, plan, mixer=mixer, components=cfg.component_tuple(),
        metrics_log=ds.MetricsLog(metrics_path), kappa=cfg.kappa, d_rank=cfg.d_rank,
        after_stage1=save_stage1, on_step=checkpoint_hook(cfg, out, "distill"),
    )
    md.save_checkpoint(out / STUDENT_CKPT, result.student, header(cfg, stage="2", tokens_seen=plan.total_tokens))
    return result


def cmd_distill(cfg: RunConfig) -> ds.DistillResult:
    teacher = load_teacher(cfg)
    result = _distill_into(cfg, teacher, load_corpus(cfg), out_dir(cfg))
    print(
        f"split={cfg.split} mixer={result.student.config.mixer_kind} "
        f"stage1_ppl={result.stage1.final_val_ppl:.6f} final_ppl={result.final_ppl:.6f}"
    )
    return result


@dataclass
class EvalReport:
    checkpoint: str
    mixer: str
    perplexity: float
    tokens: int
    layer_match_loss: list[float] = dataclasses.field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"checkpoint={self.checkpoint}", f"mixer={self.mixer}",
               f"perplexity={self.perplexity!r}", f"tokens={self.tokens}"]
        out += [f"layer{i}_match_loss={v!r}" for i, v in enumerate(self.layer_match_loss)]
        return out


def layer_match_losses(teacher: md.Model, student: md.Model, corpus: dt.Corpus, seq_len: int,
                       max_windows: int | None, match_point: str = "block") -> list[float]:
    x, _ = dt.validation_windows(corpus.val_ids, seq_len, max_windows)
    from .numerics import no_grad

    with no_grad():
        _, th = md.lm_forward(x, teacher, return_hidden=match_point)
        _, sh = md.lm_forward(x, student, return_hidden=match_point)
        return [ds.stage1_loss([t], [s]).item() for t, s in zip(th, sh)]


def cmd_eval(cfg: RunConfig) -> EvalReport:
    if not cfg.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    if not Path(cfg.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {cfg.checkpoint}")
    model, _ = md.load_checkpoint(cfg.checkpoint)
    corpus = load_corpus(cfg)
    windows = cfg.val_windows or None
    ppl = dt.perplexity(model, corpus.val_ids, cfg.seq_len, max_windows=windows)
    n_win = len(dt.validation_windows(corpus.val_ids, cfg.seq_len, windows)[0])
    report = EvalReport(cfg.checkpoint, model.config.mixer_kind, ppl, n_win * cfg.seq_len)
    if cfg.teacher and model.config.mixer_kind != "softmax":
        report.layer_match_loss = layer_match_losses(
            load_teacher(cfg), model, corpus, cfg.seq_len, windows, cfg.match_point
        )
    path = out_dir(cfg) / "eval_report.txt"
    path.write_text("\n".join(report.lines()) + "\n")
    print(f"perplexity={ppl!r}")
    return report


def cmd_bench(cfg: RunConfig) -> Path:
    try:
        lengths = [int(x) for x in cfg.bench_lengths.split(",") if x]
    except ValueError:
        raise UsageError(f"bench_lengths must be comma-separated ints, got {cfg.bench_lengths!r}") from None
    mixers = [m for m in cfg.bench_mixers.split(",") if m]
    bad = set(mixers) - set(dt.BENCH_MIXERS)
    if bad:
        raise UsageError(f"unknown bench mixers {sorted(bad)}; choose from {','.join(dt.BENCH_MIXERS)}")
    try:
        curves = [dt.flop_bench(m, lengths, d=cfg.bench_d, seed=cfg.seed) for m in mixers]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    path = out_dir(cfg) / "bench.csv"
    dt.write_bench_csv(curves, path)
    for c in curves:
        print(f"{c.mixer}: fitted exponent {c.exponent:.4f}")
    return path


def cmd_sweep(cfg: RunConfig) -> dict[str, float]:
    """One distillation per split, each under ``<out>/split_<s1>_<s2>/``."""
    teacher = load_teacher(cfg)
    corpus = load_corpus(cfg)
    splits = [s.strip() for s in cfg.sweep_splits.split(",") if s.strip()]
    for s in splits:
        parse_split(s)
    root = out_dir(cfg)
    results: dict[str, float] = {}
    lock = threading.Lock()

    def arm(split: str):
        a, b = parse_split(split)
        arm_cfg = cfg.replace(split=split)
        res = _distill_into(arm_cfg, md.copy_model(teacher), corpus, root / f"split_{a:g}_{b:g}")
        with lock:
            results[split] = res.final_ppl
        print(f"split={split} final_ppl={res.final_ppl:.6f}")

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for f in [pool.submit(arm, s) for s in splits]:
                f.result()
    else:
        for s in splits:
            arm(s)
    lines = ["split,final_ppl"] + [f"{s},{results[s]!r}" for s in splits]
    (root / "sweep.csv").write_text("\n".join(lines) + "\n")
    return results


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--split", metavar="S1/S2", help="token budget split in percent, e.g. 10/90")
    common.add_argument("--mixer", choices=md.MIXER_KINDS)
    common.add_argument("--components", metavar="LIST", help="comma-separated subset of ssm,conv,gate")
    common.add_argument("--tokens", type=int, metavar="N", help="total distillation tokens")
    common.add_argument("--seq-len", dest="seq_len", type=int, metavar="N")
    common.add_argument("--batch", type=int, metavar="N")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint to evaluate")
    common.add_argument("--teacher", metavar="PATH", help="teacher checkpoint")
    common.add_argument("--corpus", metavar="PATHS", help="comma-separated corpus files")
    common.add_argument("--workers", type=int, metavar="N", help="parallel sweep arms")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    parser = _Parser(prog="hedgemamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def configure_logging() -> None:
    level_name = os.environ.get("HEDGEMAMBA_LOG", "info").lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"HEDGEMAMBA_LOG must be one of {'|'.join(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(message)s", force=True)


def main(argv=None) -> int:
    try:
        configure_logging()
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
