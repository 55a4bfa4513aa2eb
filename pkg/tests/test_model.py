import math
import struct

import numpy as np
import pytest

from hedgemamba import data as dt
from hedgemamba import model as md
from hedgemamba import numerics as nx
from hedgemamba.numerics import Tensor

import oracles

SMALL = dict(d_model=16, n_layers=2, n_heads=2, d_mlp=32, vocab_size=32)


def small(kind="softmax", **kw):
    return md.init_model(md.ModelConfig(mixer_kind=kind, **{**SMALL, **kw}))


def perturb(model, rng, scale=0.3):
    """Move every parameter off its init so equivalence checks are not trivially true."""
    for t in model.parameters().values():
        t.data = t.data + rng.normal(0, scale, t.shape)
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        md.ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        md.ModelConfig(vocab_size=1)
    with pytest.raises(ValueError):
        md.ModelConfig(mixer_kind="rnn")


def test_config_items_round_trip():
    cfg = md.ModelConfig(mixer_kind="hedgemamba", components=("gate", "ssm"), rotary_fraction=0.5, seed=4)
    assert md.ModelConfig.from_items(cfg.to_items()) == cfg
    assert cfg.components == ("ssm", "gate")


def test_block_with_zeroed_streams_is_identity():
    m = small()
    layer = m.layers[0]
    for t in (layer.mixer.wo, layer.mixer.bo, layer.mlp.w2, layer.mlp.b2):
        t.data[:] = 0.0
    x = np.random.default_rng(0).standard_normal((5, 16))
    np.testing.assert_array_equal(md.block_forward(Tensor(x), layer).data, x)


def test_teacher_block_matches_straight_line_oracle():
    rng = np.random.default_rng(1)
    m = perturb(small(), rng, 0.1)
    layer = m.layers[0]
    x = rng.standard_normal((6, 16))
    a = layer.mixer
    mix = oracles.attention_loops(
        oracles.layer_norm(x, layer.ln1.g.data, layer.ln1.b.data),
        a.wq.data, a.bq.data, a.wk.data, a.bk.data, a.wv.data, a.bv.data, a.num_heads,
        a.rotary_fraction, a.wo.data, a.bo.data,
    )
    h = oracles.layer_norm(x, layer.ln2.g.data, layer.ln2.b.data)
    mlp = oracles.gelu(h @ layer.mlp.w1.data + layer.mlp.b1.data) @ layer.mlp.w2.data + layer.mlp.b2.data
    np.testing.assert_allclose(md.block_forward(Tensor(x), layer).data, x + mix + mlp, atol=1e-10)


def test_identity_hedgemamba_block_matches_hedgehog_block():
    rng = np.random.default_rng(2)
    hh = perturb(small("hedgehog"), rng, 0.1)
    hm = md.convert_mixer(hh, "hedgemamba")
    x = Tensor(rng.standard_normal((2, 7, 16)))
    for a, b in zip(hh.layers, hm.layers):
        np.testing.assert_allclose(md.block_forward(x, b).data, md.block_forward(x, a).data, atol=1e-8)


def test_zero_layer_model_is_head_of_normed_embedding():
    m = small(n_layers=0)
    ids = np.array([3, 1, 4, 1, 5])
    e = m.embed.data[ids]
    expected = oracles.layer_norm(e, m.ln_f.g.data, m.ln_f.b.data) @ m.head.data
    np.testing.assert_allclose(md.lm_forward(ids, m).data, expected, atol=1e-12)


def test_uniform_logits_cross_entropy_is_log_vocab():
    m = small()
    m.head.data[:] = 0.0
    ids = np.arange(10) % 32
    logits = md.lm_forward(ids[None, :-1], m)
    nll = dt.window_nll(m, ids[None, :-1], ids[None, 1:]).sum() / 9
    assert logits.shape == (1, 9, 32)
    np.testing.assert_allclose(nll, math.log(32), rtol=1e-14)


def test_lm_forward_is_deterministic_across_inits():
    ids = np.random.default_rng(0).integers(0, 32, 16)
    a = md.lm_forward(ids, small(seed=3)).data
    b = md.lm_forward(ids, small(seed=3)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, md.lm_forward(ids, small(seed=4)).data)


def test_out_of_range_token_raises():
    with pytest.raises(IndexError):
        md.lm_forward(np.array([0, 32]), small())
    with pytest.raises(TypeError):
        md.lm_forward(np.array([0.0, 1.0]), small())


@pytest.mark.parametrize("kind", md.MIXER_KINDS)
def test_lm_forward_is_causal(kind):
    rng = np.random.default_rng(5)
    m = perturb(small(kind), rng, 0.1)
    ids = rng.integers(0, 32, 6)
    base = md.lm_forward(ids, m).data
    for t in range(6):
        alt = ids.copy()
        alt[t] = (alt[t] + 1) % 32
        diff = np.abs(md.lm_forward(alt, m).data - base).max(axis=-1)
        assert np.all(diff[:t] == 0.0)
        assert diff[t] > 0


def test_hidden_outputs_per_layer():
    m = small()
    ids = np.arange(5)
    _, blocks = md.lm_forward(ids, m, return_hidden="block")
    _, mixes = md.lm_forward(ids, m, return_hidden="mixer")
    assert len(blocks) == len(mixes) == 2
    assert blocks[0].shape == mixes[0].shape == (5, 16)


def test_softmax_to_hedgehog_keeps_everything_else_bit_exact():
    t = small(seed=7)
    h = md.convert_mixer(t, "hedgehog")
    tp, hp = t.parameters(), h.parameters()
    for name, value in tp.items():
        key = name.replace(".mixer.", ".mixer.attn.") if ".mixer." in name else name
        np.testing.assert_array_equal(hp[key].data, value.data)
    assert hp["layers.0.mixer.attn.wq"] is not tp["layers.0.mixer.wq"]


def test_hedgehog_to_hedgemamba_logits_and_loss_unchanged():
    rng = np.random.default_rng(8)
    hh = perturb(small("hedgehog"), rng, 0.1)
    hm = md.convert_mixer(hh, "hedgemamba")
    ids = rng.integers(0, 32, (3, 12))
    np.testing.assert_allclose(md.lm_forward(ids, hm).data, md.lm_forward(ids, hh).data, atol=1e-6)
    val = rng.integers(0, 32, 400)
    a = dt.perplexity(hh, val, 16)
    b = dt.perplexity(hm, val, 16)
    assert abs(math.log(a) - math.log(b)) < 1e-5


def test_converting_non_hedgehog_to_hedgemamba_fails():
    with pytest.raises(ValueError):
        md.convert_mixer(small(), "hedgemamba")
    with pytest.raises(ValueError):
        md.convert_mixer(small("hedgehog"), "hedgehog")


@pytest.mark.parametrize("components", [("ssm",), ("conv",), ("gate",), ("ssm", "conv", "gate"), ()])
def test_extra_parameter_count_is_exact(components):
    hh = small("hedgehog")
    hm = md.convert_mixer(hh, "hedgemamba", components=components)
    cfg = hm.config
    d, H, dh, L = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.n_layers
    per_layer = {
        "ssm": H * 2 * dh * dh + d * cfg.d_rank + cfg.d_rank + cfg.d_rank * H + H,
        "conv": cfg.kappa * d + d,
        "gate": d * d + d,
    }
    expected = L * sum(per_layer[c] for c in components)
    assert hm.num_parameters() - hh.num_parameters() == expected == md.mamba_extra_parameters(cfg)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = perturb(small("hedgemamba", components=("ssm", "gate")), np.random.default_rng(9))
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, m, {"note": "a=b c"})
    back, extra = md.load_checkpoint(path)
    assert back.config == m.config
    assert extra == {"note": "a=b c"}
    for name, t in m.parameters().items():
        np.testing.assert_array_equal(back.parameters()[name].data, t.data)
    md.save_checkpoint(tmp_path / "again.ckpt", back, extra)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    m = small(n_layers=0)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, m)
    raw = path.read_bytes()
    assert raw[:8] == md.MAGIC
    version, hlen = struct.unpack_from("<II", raw, 8)
    assert version == md.VERSION
    header = raw[16 : 16 + hlen].decode()
    assert "model.mixer_kind=softmax" in header.splitlines()
    (count,) = struct.unpack_from("<I", raw, 16 + hlen)
    assert count == len(m.parameters())
    pos = 20 + hlen
    (nlen,) = struct.unpack_from("<H", raw, pos)
    name = raw[pos + 2 : pos + 2 + nlen].decode()
    pos += 2 + nlen
    assert raw[pos : pos + 2] == b"f8"
    ndim = raw[pos + 2]
    shape = struct.unpack_from(f"<{ndim}Q", raw, pos + 3)
    data = np.frombuffer(raw, "<f8", int(np.prod(shape)), pos + 3 + 8 * ndim).reshape(shape)
    np.testing.assert_array_equal(data, m.parameters()[name].data)


def test_checkpoint_corruption_is_detected(tmp_path):
    m = small(n_layers=1)
    path = tmp_path / "m.ckpt"
    md.save_checkpoint(path, m)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(md.CheckpointError, match="magic"):
        md.load_checkpoint(bad)
    bad.write_bytes(raw[:8] + struct.pack("<I", md.VERSION + 1) + raw[12:])
    with pytest.raises(md.CheckpointError, match="version"):
        md.load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(md.CheckpointError):
        md.load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(md.CheckpointError, match="trailing"):
        md.load_checkpoint(bad)


def test_model_gradient_reaches_every_parameter():
    m = small("hedgemamba", d_model=8, d_mlp=8, vocab_size=8, n_layers=1)
    perturb(m, np.random.default_rng(3), 0.2)
    for t in m.parameters().values():
        t.requires_grad = True
    ids = np.array([[1, 2, 3, 4]])
    loss = nx.tsum(md.lm_forward(ids, m))
    nx.backward(nx.mul(loss, loss))
    assert all(t.grad is not None for t in m.parameters().values())
