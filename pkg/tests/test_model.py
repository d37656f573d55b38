import numpy as np
import pytest

from seqpar.attention import AttentionConfig
from seqpar.comm import CommFabric
from seqpar.model import ModelConfig, PositionIdError, TinyDecoder, init_params, param_shapes
from seqpar.partition import ShardLayout
from seqpar.tensor import Tensor, take
from seqpar.verification import model_logits

SMALL = ModelConfig(vocab=16, layers=1, hidden=16, hs=4, kv_hs=2, head_dim=4)


def _tokens(n=32, vocab=16, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=n)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=40)
    with pytest.raises(ValueError):
        ModelConfig(hs=6, kv_hs=4)
    with pytest.raises(ValueError):
        ModelConfig(hidden=42, hs=6, kv_hs=6, head_dim=7)


def test_init_is_seeded_and_independent_of_anything_else():
    a, b = init_params(SMALL), init_params(SMALL)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert [n for n, _ in param_shapes(SMALL)] == list(a)
    assert np.all(a["final_norm"] == 1.0)
    c = init_params(ModelConfig(**{**SMALL.to_dict(), "seed": 1}))
    assert not np.array_equal(a["embed"], c["embed"])


@pytest.mark.parametrize("engine,sp", [("ulysses", 2), ("dummy_head", 4), ("xtuner", 4), ("ring_zigzag", 2),
                                       ("ring_zigzag", 4), ("usp", 4)])
def test_sharded_logits_match_single_device(engine, sp):
    model = TinyDecoder(ModelConfig(vocab=16, layers=2, hidden=24, hs=6, kv_hs=3, head_dim=4))
    toks = _tokens()
    ref = model_logits(model, toks)
    got = model_logits(model, toks, engine, sp)
    assert np.max(np.abs(got - ref)) < 1e-10


def test_local_position_ids_break_parity():
    model = TinyDecoder(ModelConfig())
    toks = _tokens(64, 64)
    ref = model_logits(model, toks)
    good = model_logits(model, toks, "ulysses", 2)
    bad = model_logits(model, toks, "ulysses", 2, local_positions=True)
    assert np.max(np.abs(good - ref)) < 1e-10
    assert np.max(np.abs(bad - ref)) > 1e-3


def test_missing_position_ids_is_an_error():
    model = TinyDecoder(SMALL)
    lay = ShardLayout.build("naive", 2, 16)
    attn = AttentionConfig(hs=4, kv_hs=2, dim=4, engine="ulysses", sp=2)
    f = CommFabric(2, 2)
    with pytest.raises(PositionIdError):
        f.run(lambda c: model.forward(_tokens(8)[None], None, c.sp_group, lay, attn))


def test_zero_layers_never_touch_attention():
    cfg = ModelConfig(vocab=16, layers=0, hidden=16, hs=4, kv_hs=4, head_dim=4)
    model = TinyDecoder(cfg)
    toks = _tokens(16)
    lay = ShardLayout.build("naive", 2, 16)
    attn = AttentionConfig(hs=4, dim=4, engine="ulysses", sp=2)
    f = CommFabric(2, 2)
    out = f.run(lambda c: model.forward(toks[None, c.rank * 8:(c.rank + 1) * 8], lay.owned(c.rank),
                                        c.sp_group, lay, attn).data)
    assert f.flops == [0, 0] and f.bytes_sent(0) == f.bytes_sent(1) == 0
    e = model.params["embed"].data[toks]
    normed = e / np.sqrt(np.mean(e * e, axis=-1, keepdims=True) + cfg.norm_eps)
    expected = normed @ model.params["lm_head"].data
    assert np.max(np.abs(np.concatenate(out, axis=1)[0] - expected)) < 1e-14


def test_clone_is_independent():
    m = TinyDecoder(SMALL)
    c = m.clone(requires_grad=False)
    c.params["embed"].data[0, 0] += 1.0
    assert m.params["embed"].data[0, 0] != c.params["embed"].data[0, 0]
    assert not c.params["embed"].requires_grad
