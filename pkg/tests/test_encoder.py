import numpy as np
import pytest
from scipy.special import erf

from adrp import tensor as T
from adrp.adapters import AdapterConfig, AdapterSet
from adrp.encoder import (ATTN, FF, EncoderConfig, EncoderWeights, Hook, TaskHead, classify, embed,
                          encode, transformer_layer)
from adrp.errors import ContractError, DimensionError
from adrp.tensor import LN_EPS, Tensor


def small(layers=2, d=8, dtype="float32", **kw):
    return EncoderConfig(num_layers=layers, hidden=d, heads=2, ff_dim=16, max_seq=16, vocab_size=12,
                         dtype=dtype, **kw)


def ln64(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def layer64(h, lw, heads):
    """Step-by-step float64 recomputation of one post-LN transformer layer."""
    w = {k: t.data.astype(np.float64) for k, t in lw.tensors().items()}
    b, s, d = h.shape
    hd = d // heads
    q, k, v = h @ w["wq"], h @ w["wk"], h @ w["wv"]
    out = np.zeros_like(h)
    for bi in range(b):
        for hi in range(heads):
            sl = slice(hi * hd, (hi + 1) * hd)
            sc = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(hd)
            p = np.exp(sc - sc.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            out[bi, :, sl] = p @ v[bi, :, sl]
    a = out @ w["wo"]
    h1 = ln64(h + a, w["ln1_gain"], w["ln1_bias"])
    z = h1 @ w["w1"]
    f = (0.5 * z * (1 + erf(z / np.sqrt(2)))) @ w["w2"]
    return ln64(h1 + f, w["ln2_gain"], w["ln2_bias"])


def scrambled_weights(cfg, seed=0, scale=0.3):
    w = EncoderWeights.initialize(cfg)
    rng = np.random.default_rng(seed)
    for t in w.parameters():
        t.data = rng.normal(0, scale, t.shape).astype(t.dtype)
    return w


def test_zero_output_weights_give_double_layer_norm():
    cfg = small()
    w = EncoderWeights.initialize(cfg)
    w.layers[0].wo.data[:] = 0
    w.layers[0].w2.data[:] = 0
    h = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8)).astype(np.float32))
    out = transformer_layer(h, 0, cfg, w).data
    ref = ln64(ln64(h.data.astype(np.float64), 1, 0), 1, 0)
    np.testing.assert_allclose(out, ref, atol=1e-5)


def test_zero_up_adapter_is_identity_within_layer():
    cfg = small()
    w = EncoderWeights.initialize(cfg)
    ad = AdapterSet.initialize(AdapterConfig("pfeiffer", 2.0), cfg, np.random.default_rng(0))
    h = Tensor(np.random.default_rng(1).normal(size=(2, 3, 8)).astype(np.float32))
    hooks = [hk for hk in ad.hooks() if hk.layer == 0]
    np.testing.assert_allclose(transformer_layer(h, 0, cfg, w, hooks).data,
                               transformer_layer(h, 0, cfg, w).data, atol=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_layer_matches_float64_recomputation(seed):
    cfg = small(dtype="float64")
    w = scrambled_weights(cfg, seed)
    h = np.random.default_rng(seed + 10).normal(size=(2, 3, 8))
    out = transformer_layer(Tensor(h), 0, cfg, w).data
    np.testing.assert_allclose(out, layer64(h, w.layers[0], cfg.heads), atol=1e-10)


def test_float32_layer_close_to_float64_oracle():
    cfg = small()
    w = scrambled_weights(cfg, 5)
    h = np.random.default_rng(6).normal(size=(2, 3, 8)).astype(np.float32)
    out = transformer_layer(Tensor(h), 0, cfg, w).data
    np.testing.assert_allclose(out, layer64(h.astype(np.float64), w.layers[0], cfg.heads), atol=1e-4)


def test_hook_validation():
    cfg = small()
    w = EncoderWeights.initialize(cfg)
    h = Tensor(np.zeros((1, 2, 8), dtype=np.float32))
    ident = lambda x: x
    with pytest.raises(ContractError):
        transformer_layer(h, 0, cfg, w, [Hook(1, FF, ident)])
    with pytest.raises(ContractError):
        transformer_layer(h, 0, cfg, w, [Hook(0, "mid", ident)])
    with pytest.raises(ContractError):
        transformer_layer(h, 0, cfg, w, [Hook(0, FF, ident)], [Hook(0, FF, ident, "fusion")])
    with pytest.raises(DimensionError):
        transformer_layer(Tensor(np.zeros((1, 2, 4))), 0, cfg, w)


def test_encode_drop_all_equals_bare_encoder():
    cfg = small(layers=3)
    w = EncoderWeights.initialize(cfg)
    ad = AdapterSet.initialize(AdapterConfig("houlsby", 2.0), cfg, np.random.default_rng(0), up_std=0.5)
    tok = np.random.default_rng(1).integers(0, 12, size=(2, 5))
    bare = encode(tok, cfg, w).data
    assert encode(tok, cfg, w, ad.hooks(), drop_n=3).data.tobytes() == bare.tobytes()
    assert not np.allclose(encode(tok, cfg, w, ad.hooks(), drop_n=0).data, bare)


def test_encode_drop_zero_runs_every_hook():
    cfg = small(layers=3)
    w = EncoderWeights.initialize(cfg)
    calls = []
    hooks = [Hook(i, p, (lambda h, i=i, p=p: calls.append((i, p)) or h)) for i in range(3) for p in (ATTN, FF)]
    encode(np.zeros((1, 4), dtype=int), cfg, w, hooks, drop_n=0)
    assert sorted(calls) == sorted((i, p) for i in range(3) for p in (ATTN, FF))
    calls.clear()
    encode(np.zeros((1, 4), dtype=int), cfg, w, hooks, drop_n=2)
    assert sorted(calls) == [(2, ATTN), (2, FF)]


@pytest.mark.parametrize("drop_n", [1, 2, 3])
def test_prefix_activations_identical_across_tasks(drop_n):
    cfg = small(layers=4)
    w = EncoderWeights.initialize(cfg)
    tok = np.random.default_rng(0).integers(0, 12, size=(2, 6))
    acts = []
    for seed in (1, 2):
        ad = AdapterSet.initialize(AdapterConfig("pfeiffer", 2.0), cfg, np.random.default_rng(seed), up_std=0.5)
        collect = []
        encode(tok, cfg, w, ad.hooks(), drop_n=drop_n, collect=collect)
        acts.append(collect)
    for i in range(drop_n):
        assert acts[0][i].data.tobytes() == acts[1][i].data.tobytes()
    assert not np.allclose(acts[0][drop_n].data, acts[1][drop_n].data)


def test_encode_input_validation():
    cfg = small()
    w = EncoderWeights.initialize(cfg)
    with pytest.raises(ContractError):
        encode(np.zeros((1, 4), dtype=int), cfg, w, drop_n=3)
    with pytest.raises(ContractError):
        embed(np.zeros((1, 17), dtype=int), cfg, w)
    with pytest.raises(ContractError):
        embed(np.full((1, 2), 12), cfg, w)
    with pytest.raises(ContractError):
        embed(np.zeros(4, dtype=int), cfg, w)


def test_attention_mask_hides_padding():
    cfg = small()
    w = scrambled_weights(cfg)
    tok = np.array([[0, 3, 4, 5, 7, 8]])
    mask = np.array([[1, 1, 1, 0, 0, 0]])
    a = encode(tok, cfg, w, attention_mask=mask).data[:, :3]
    tok2 = tok.copy()
    tok2[0, 3:] = [1, 1, 1]
    b = encode(tok2, cfg, w, attention_mask=mask).data[:, :3]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_weights_initialization_is_seeded():
    cfg = small()
    a, b = EncoderWeights.initialize(cfg), EncoderWeights.initialize(cfg)
    c = EncoderWeights.initialize(cfg, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a.snapshot().values(), b.snapshot().values()))
    assert not np.array_equal(a.tok_emb.data, c.tok_emb.data)


def test_config_validation():
    with pytest.raises(ContractError):
        EncoderConfig(hidden=10, heads=4)
    with pytest.raises(ContractError):
        EncoderConfig(dtype="float16")
    assert EncoderConfig.bert_base().hidden == 768


# classify ----------------------------------------------------------------------------------

def test_classify_zero_weight_returns_bias():
    head = TaskHead(Tensor(np.zeros((4, 2))), Tensor(np.array([1.0, 2.0])))
    out = classify(Tensor(np.random.default_rng(0).normal(size=(3, 5, 4))), head).data
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0], (3, 1)))


def test_classify_pools_first_token():
    head = TaskHead(Tensor(np.array([[1.0, 0.0], [0.0, 2.0]])), Tensor(np.array([0.5, -0.5])))
    h = np.zeros((1, 3, 2))
    h[0, 0] = [3.0, 4.0]
    h[0, 1:] = 99.0
    assert classify(Tensor(h), head).data.tolist() == [[3.5, 7.5]]


def test_classify_softmax_rows_sum_to_one():
    head = TaskHead.initialize(8, 3, np.random.default_rng(0))
    logits = classify(Tensor(np.random.default_rng(1).normal(size=(4, 2, 8)).astype(np.float32)), head)
    assert np.abs(T.softmax(logits).data.sum(-1) - 1).max() < 1e-6


def test_classify_dimension_error():
    head = TaskHead.initialize(8, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        classify(Tensor(np.zeros((1, 2, 4))), head)


@pytest.mark.parametrize("n", [0, 2, 3])
def test_prefix_matches_fully_dropped_run(n):
    cfg = small(layers=3)
    w = EncoderWeights.initialize(cfg)
    ad = AdapterSet.initialize(AdapterConfig("pfeiffer", 2.0), cfg, np.random.default_rng(0), up_std=0.5)
    tok = np.random.default_rng(1).integers(0, 12, (2, 5))
    a, b = [], []
    encode(tok, cfg, w, ad.hooks(), drop_n=n, collect=a)
    encode(tok, cfg, w, ad.hooks(), drop_n=3, collect=b)
    for i in range(n):
        assert a[i].data.tobytes() == b[i].data.tobytes()
