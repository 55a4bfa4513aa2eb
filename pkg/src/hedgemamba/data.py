"""Byte-level corpus handling, batching, perplexity and the mult-add benchmark."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import bridge
from . import mixers as mx
from . import numerics as nx

VOCAB_SIZE = 256


class CorpusError(ValueError):
    pass


def tokenize_bytes(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass
class Corpus:
    ids: np.ndarray
    val_start: int
    sources: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 < self.val_start < len(self.ids):
            raise CorpusError("train/val boundary must split the corpus into two non-empty parts")

    @property
    def train_ids(self) -> np.ndarray:
        return self.ids[: self.val_start]

    @property
    def val_ids(self) -> np.ndarray:
        return self.ids[self.val_start :]

    @classmethod
    def from_ids(cls, ids, val_fraction: float = 0.01, sources=()) -> "Corpus":
        ids = np.asarray(ids, dtype=np.int64)
        n_val = max(1, int(round(len(ids) * val_fraction)))
        return cls(ids=ids, val_start=len(ids) - n_val, sources=tuple(sources))

    @classmethod
    def from_files(cls, paths: str | Path | Sequence, val_fraction: float = 0.01) -> "Corpus":
        if isinstance(paths, (str, Path)):
            paths = [paths]
        chunks = []
        for p in paths:
            p = Path(p)
            if not p.is_file():
                raise CorpusError(f"corpus file not found: {p}")
            chunks.append(p.read_bytes())
        return cls.from_ids(tokenize_bytes(b"".join(chunks)), val_fraction, sources=[str(p) for p in paths])


# ---------------------------------------------------------------------------
# synthetic corpus

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_lexicon(rng, size):
    words = set()
    while len(words) < size:
        n = rng.integers(1, 4)
        words.add("".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(n)))
    return sorted(words)


def synthetic_text(n_bytes: int = 1_000_000, seed: int = 0) -> str:
    """Structured toy text: a small grammar, key/value recall and repeated spans.

    Roughly a third of the lines need information from earlier in the line
    (recall a value bound to a key, or repeat a random span), so a
    sequence mixer with real lookback beats one that only averages.
    """
    rng = np.random.default_rng(seed)
    nouns = _make_lexicon(rng, 60)
    verbs = _make_lexicon(rng, 25)
    adjs = _make_lexicon(rng, 20)
    # sparse bigram preference between verbs and nouns
    affinity = rng.dirichlet(np.full(len(nouns), 0.2), size=len(verbs))
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        kind = rng.random()
        if kind < 0.55:
            v = int(rng.integers(len(verbs)))
            subj = nouns[int(rng.integers(len(nouns)))]
            obj = nouns[int(rng.choice(len(nouns), p=affinity[v]))]
            adj = f"{adjs[int(rng.integers(len(adjs)))]} " if rng.random() < 0.5 else ""
            line = f"the {subj} {verbs[v]} the {adj}{obj}."
        elif kind < 0.8:
            keys = rng.choice(len(nouns), size=3, replace=False)
            vals = rng.integers(0, 100, size=3)
            binds = " ".join(f"{nouns[k]}={v}" for k, v in zip(keys, vals))
            ask = int(rng.integers(3))
            line = f"{binds} ? {nouns[keys[ask]]}={vals[ask]}"
        else:
            span = "".join(rng.choice(list(_CONSONANTS + _VOWELS), size=int(rng.integers(5, 12))))
            line = f"copy {span} | {span}"
        if rng.random() < 0.05:
            pos = int(rng.integers(len(line)))
            line = line[:pos] + chr(int(rng.integers(33, 127))) + line[pos + 1 :]
        parts.append(line)
        total += len(line) + 1
    return "\n".join(parts)[:n_bytes]


def synthetic_corpus(n_bytes: int = 1_000_000, seed: int = 0, val_fraction: float = 0.01) -> Corpus:
    return Corpus.from_ids(tokenize_bytes(synthetic_text(n_bytes, seed)), val_fraction, sources=("synthetic",))


# ---------------------------------------------------------------------------
# batching


def window_offsets(start: int, stop: int, seq_len: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Start offsets of training windows, ``batch_size`` per draw.

    Offsets are drawn uniformly (PCG64 seeded by ``seed``) from every
    position whose ``seq_len + 1`` window fits inside ``[start, stop)``.
    """
    hi = stop - seq_len - 1
    if hi < start:
        raise CorpusError(f"region of {stop - start} tokens is too small for seq_len={seq_len}")
    rng = np.random.default_rng(seed)
    while True:
        yield rng.integers(start, hi + 1, size=batch_size)


def make_batches(
    ids, seq_len: int, batch_size: int, seed: int = 0, start: int = 0, stop: int | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless (inputs, targets) pairs of shape (batch, seq_len); targets are inputs shifted by one."""
    ids = np.asarray(ids)
    stop = len(ids) if stop is None else stop
    offsets = window_offsets(start, stop, seq_len, batch_size, seed)
    span = np.arange(seq_len + 1)
    for off in offsets:
        win = ids[off[:, None] + span]
        yield win[:, :-1], win[:, 1:]


def train_batches(corpus: Corpus, seq_len: int, batch_size: int, seed: int = 0):
    return make_batches(corpus.ids, seq_len, batch_size, seed, start=0, stop=corpus.val_start)


# ---------------------------------------------------------------------------
# evaluation


def validation_windows(val_ids, seq_len: int, max_windows: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    val_ids = np.asarray(val_ids)
    n = (len(val_ids) - 1) // seq_len
    if max_windows is not None:
        n = min(n, max_windows)
    if n <= 0:
        raise CorpusError("validation split is too small for one window")
    x = val_ids[: n * seq_len].reshape(n, seq_len)
    y = val_ids[1 : n * seq_len + 1].reshape(n, seq_len)
    return x, y


def window_nll(model, inputs, targets) -> np.ndarray:
    """Summed next-token NLL per window, no gradient recording."""
    from .model import lm_forward

    with nx.no_grad():
        logits = lm_forward(inputs, model)
        logp = nx.log_softmax(logits, axis=-1).data
    picked = np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)[..., 0]
    return -picked.sum(axis=-1)


def perplexity(model, val_ids, seq_len: int, batch_size: int = 16, max_windows: int | None = None) -> float:
    """``exp`` of mean next-token NLL over non-overlapping validation windows."""
    x, y = validation_windows(val_ids, seq_len, max_windows)
    sums = []
    for i in range(0, len(x), batch_size):
        sums.extend(window_nll(model, x[i : i + batch_size], y[i : i + batch_size]).tolist())
    return math.exp(math.fsum(sums) / (len(x) * seq_len))


# ---------------------------------------------------------------------------
# complexity benchmark

BENCH_MIXERS = ("softmax", "hedgehog", "hedgemamba", "scan")


@dataclass
class BenchCurve:
    mixer: str
    lengths: list[int]
    multadds: list[int]
    exponent: float


def fit_exponent(lengths, costs) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(lengths, float)), np.log(np.asarray(costs, float)), 1)
    return float(slope)


def _bench_forward(kind: str, L: int, d: int, n_heads: int, rng):
    X = nx.Tensor(rng.standard_normal((L, d)))
    if kind == "scan":
        N = d
        lam = rng.uniform(0.5, 1.0, size=(L, N, d))
        B, C = rng.standard_normal((L, N)), rng.standard_normal((L, N))
        return lambda: mx.ssm_scan(lam, B, C, X)
    ap = mx.init_attention(d, n_heads, rng, out_proj=False)
    if kind == "softmax":
        return lambda: mx.softmax_attention(X, ap)
    hq = mx.init_hedgehog(n_heads, d // n_heads, rng)
    hk = mx.init_hedgehog(n_heads, d // n_heads, rng)
    if kind == "hedgehog":
        return lambda: mx.linear_attention(X, ap, hq, hk)
    if kind == "hedgemamba":
        p = bridge.substitute_linear_attention(mx.LinearAttentionParams(ap, hq, hk), d_rank=2, rng=rng)
        return lambda: mx.hedgemamba_forward(X, p)
    raise ValueError(f"unknown mixer {kind!r}; choose from {BENCH_MIXERS}")


def flop_bench(mixer_kind: str, lengths: Sequence[int], d: int = 8, n_heads: int = 1, seed: int = 0) -> BenchCurve:
    """Count forward-pass multiply-adds for each length and fit ``cost ~ c * L^p``."""
    lengths = [int(L) for L in lengths]
    if len(lengths) < 2 or any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("need at least two strictly increasing lengths")
    costs = []
    for L in lengths:
        fwd = _bench_forward(mixer_kind, L, d, n_heads, np.random.default_rng(seed))
        with nx.no_grad(), nx.count_multadds() as counter:
            fwd()
        costs.append(counter.total)
    return BenchCurve(mixer_kind, lengths, costs, fit_exponent(lengths, costs))


def write_bench_csv(curves: Sequence[BenchCurve], path) -> None:
    lines = ["mixer,L,multadds"]
    for c in curves:
        lines += [f"{c.mixer},{L},{n}" for L, n in zip(c.lengths, c.multadds)]
    lines += [f"# fitted_exponent mixer={c.mixer} p={c.exponent:.4f}" for c in curves]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
