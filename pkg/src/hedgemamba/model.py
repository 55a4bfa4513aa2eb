"""Pythia-style decoder LM with a swappable sequence mixer, plus checkpoint I/O."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import bridge
from . import mixers as mx
from . import numerics as nx
from .numerics import ShapeError, Tensor

MIXER_KINDS = ("softmax", "hedgehog", "hedgemamba")
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_mlp: int = 256
    rotary_fraction: float = 0.25
    mixer_kind: str = "softmax"
    components: tuple[str, ...] = mx.COMPONENTS
    kappa: int = 4
    d_rank: int = 8
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.components, str):
            self.components = tuple(c for c in self.components.split(",") if c)
        self.components = tuple(c for c in mx.COMPONENTS if c in set(self.components))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.mixer_kind not in MIXER_KINDS:
            raise ValueError(f"mixer_kind must be one of {MIXER_KINDS}")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.name == "components":
                kwargs[f.name] = tuple(c for c in raw.split(",") if c)
            elif f.name == "mixer_kind":
                kwargs[f.name] = raw
            elif f.name == "rotary_fraction":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class LayerNormParams:
    g: Tensor
    b: Tensor


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


Mixer = mx.AttentionParams | mx.LinearAttentionParams | mx.HedgeMambaParams


@dataclass
class LayerState:
    ln1: LayerNormParams
    mixer: Mixer
    ln2: LayerNormParams
    mlp: MlpParams


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    layers: list[LayerState]
    ln_f: LayerNormParams
    head: Tensor = field(repr=False)

    def parameters(self) -> dict[str, Tensor]:
        return dict(named_parameters(self))

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclass fields and lists, yielding every Tensor with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, list):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(getattr(obj, f.name), name)


# ---------------------------------------------------------------------------
# forward


def layer_norm(x, p: LayerNormParams, eps: float = LN_EPS) -> Tensor:
    mu = nx.mean(x, axis=-1, keepdims=True)
    xc = nx.sub(x, mu)
    var = nx.mean(nx.square(xc), axis=-1, keepdims=True)
    return nx.add(nx.mul(nx.div(xc, nx.sqrt(nx.add(var, eps))), p.g), p.b)


def mlp_forward(x, p: MlpParams) -> Tensor:
    return mx.linear(nx.gelu(mx.linear(x, p.w1, p.b1)), p.w2, p.b2)


def mixer_forward(x, mixer: Mixer) -> Tensor:
    if isinstance(mixer, mx.AttentionParams):
        return mx.softmax_attention(x, mixer, causal=True)
    if isinstance(mixer, mx.LinearAttentionParams):
        return mx.linear_attention(x, mixer.attn, mixer.hq, mixer.hk, causal=True, normalize=True)
    if isinstance(mixer, mx.HedgeMambaParams):
        return mx.hedgemamba_forward(x, mixer)
    raise TypeError(f"unknown mixer {type(mixer).__name__}")


def block_forward(x, layer: LayerState, return_mixer: bool = False):
    """Parallel streams: ``x + mixer(ln1(x)) + mlp(ln2(x))``."""
    x = nx.as_tensor(x)
    mix = mixer_forward(layer_norm(x, layer.ln1), layer.mixer)
    mlp = mlp_forward(layer_norm(x, layer.ln2), layer.mlp)
    out = nx.add(nx.add(x, mix), mlp)
    return (out, mix) if return_mixer else out


def lm_forward(tokens, model: Model, return_hidden: str | None = None):
    """Logits of shape (..., L, vocab).

    ``return_hidden`` in {"block", "mixer"} additionally returns one tensor
    per layer taken at that point.
    """
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise IndexError(f"token id out of range [0, {model.config.vocab_size})")
    h = nx.take_rows(model.embed, tokens)
    hidden = []
    for layer in model.layers:
        h, mix = block_forward(h, layer, return_mixer=True)
        if return_hidden == "block":
            hidden.append(h)
        elif return_hidden == "mixer":
            hidden.append(mix)
    logits = nx.matmul(layer_norm(h, model.ln_f), model.head)
    return (logits, hidden) if return_hidden else logits


# ---------------------------------------------------------------------------
# construction


def _normal(rng, shape, std=0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def _ln(d) -> LayerNormParams:
    return LayerNormParams(g=Tensor(np.ones(d)), b=Tensor(np.zeros(d)))


def init_model(config: ModelConfig) -> Model:
    """Fresh weights; Hedgehog/HedgeMamba kinds are built by converting a random teacher."""
    rng = np.random.default_rng(config.seed)
    d, H = config.d_model, config.n_heads
    layers = []
    for _ in range(config.n_layers):
        attn = mx.init_attention(d, H, rng, rotary_fraction=config.rotary_fraction)
        mlp = MlpParams(
            w1=_normal(rng, (d, config.d_mlp)), b1=Tensor(np.zeros(config.d_mlp)),
            w2=_normal(rng, (config.d_mlp, d)), b2=Tensor(np.zeros(d)),
        )
        layers.append(LayerState(ln1=_ln(d), mixer=attn, ln2=_ln(d), mlp=mlp))
    model = Model(
        config=dataclasses.replace(config, mixer_kind="softmax"),
        embed=_normal(rng, (config.vocab_size, d)),
        layers=layers,
        ln_f=_ln(d),
        head=_normal(rng, (d, config.vocab_size)),
    )
    if config.mixer_kind in ("hedgehog", "hedgemamba"):
        model = convert_mixer(model, "hedgehog", seed=config.seed)
    if config.mixer_kind == "hedgemamba":
        model = convert_mixer(
            model, "hedgemamba", components=config.components, kappa=config.kappa,
            d_rank=config.d_rank, seed=config.seed,
        )
    return dataclasses.replace(model, config=config)


def _copy_tree(obj):
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy())
    if isinstance(obj, list):
        return [_copy_tree(o) for o in obj]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, ModelConfig):
        return dataclasses.replace(obj, **{f.name: _copy_tree(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init})
    return obj


def copy_model(model: Model) -> Model:
    return _copy_tree(model)


def convert_mixer(
    model: Model,
    target_kind: str,
    components=mx.COMPONENTS,
    kappa: int | None = None,
    d_rank: int | None = None,
    seed: int = 0,
) -> Model:
    """Swap every layer's mixer; all other parameters are copied bit-exactly.

    softmax -> hedgehog keeps the Q/K/V/O maps and adds freshly initialized
    feature maps. hedgehog -> hedgemamba applies the bridge substitution.
    """
    src = model.config.mixer_kind
    cfg = model.config
    kappa = cfg.kappa if kappa is None else kappa
    d_rank = cfg.d_rank if d_rank is None else d_rank
    rng = np.random.default_rng(seed + 7919)
    new = copy_model(model)
    if target_kind == "hedgehog":
        if src != "softmax":
            raise ValueError(f"cannot convert {src} to hedgehog")
        for layer in new.layers:
            ap = layer.mixer
            layer.mixer = mx.LinearAttentionParams(
                attn=ap,
                hq=mx.init_hedgehog(ap.num_heads, ap.head_dim, rng),
                hk=mx.init_hedgehog(ap.num_heads, ap.head_dim, rng),
            )
        new.config = dataclasses.replace(cfg, mixer_kind="hedgehog")
    elif target_kind == "hedgemamba":
        if src != "hedgehog":
            raise ValueError(f"hedgemamba conversion needs a hedgehog source, got {src}")
        for layer in new.layers:
            layer.mixer = bridge.substitute_linear_attention(
                layer.mixer, components=components, kappa=kappa, d_rank=d_rank, rng=rng
            )
        new.config = dataclasses.replace(
            cfg, mixer_kind="hedgemamba", components=tuple(components), kappa=kappa, d_rank=d_rank
        )
    else:
        raise ValueError(f"unsupported target mixer {target_kind!r}")
    return new


def mamba_extra_parameters(config: ModelConfig) -> int:
    """Parameters HedgeMamba adds on top of the Hedgehog model with the same shape."""
    d, H, dh = config.d_model, config.n_heads, config.head_dim
    per_layer = 0
    if "ssm" in config.components:
        per_layer += H * (2 * dh) * dh + d * config.d_rank + config.d_rank + config.d_rank * H + H
    if "conv" in config.components:
        per_layer += config.kappa * d + d
    if "gate" in config.components:
        per_layer += d * d + d
    return per_layer * config.n_layers


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"HGMBCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode_header(items: dict[str, str]) -> bytes:
    lines = []
    for k, v in items.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"header entry {k!r} is not representable")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_header(raw: bytes) -> dict[str, str]:
    items = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            items[k] = v
    return items


def save_checkpoint(path, model: Model, extra: dict[str, str] | None = None) -> None:
    """Write header (magic, version, key=value config) then named float64 blobs."""
    items = {f"model.{k}": v for k, v in model.config.to_items().items()}
    for k, v in (extra or {}).items():
        items[k] = str(v)
    header = _encode_header(items)
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(b"f8")
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
        header = _decode_header(bytes(view[pos : pos + hlen]))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            tag = bytes(view[pos : pos + 2])
            pos += 2
            if tag != b"f8":
                raise CheckpointError(f"{path}: unsupported dtype tag {tag!r}")
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            blobs[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return header, blobs


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    header, blobs = read_checkpoint(path)
    cfg = ModelConfig.from_items({k[6:]: v for k, v in header.items() if k.startswith("model.")})
    model = init_model(cfg)
    params = model.parameters()
    if set(params) != set(blobs):
        raise CheckpointError(
            f"{path}: parameter names do not match config "
            f"(missing {sorted(set(params) - set(blobs))[:3]}, extra {sorted(set(blobs) - set(params))[:3]})"
        )
    for name, t in params.items():
        if t.shape != blobs[name].shape:
            raise ShapeError(f"{path}: {name} has shape {blobs[name].shape}, expected {t.shape}")
        t.data = blobs[name]
    extra = {k: v for k, v in header.items() if not k.startswith("model.")}
    return model, extra
