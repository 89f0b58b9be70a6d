import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adsformer import autograd as ag
from adsformer.adpm import (ADPM, ADPMConfig, ADPMConfigError, ADPMInputs, AdsformerBlock, adpm_forward, mhsa,
                            default_component3_specs)
from adsformer.autograd import Tensor
from adsformer.embeddings import EmbeddingTable, PretrainedBundle
from adsformer.gradcheck import grad_check
from adsformer.optim import Adam
from adsformer.ranking import DCNConfig, PersonalizedRanker, RankerConfig, bce_loss
from adsformer.sequences import PaddedBatch

VOCAB = {"listing": 20, "shop": 6, "taxonomy": 4}
SMALL_C3 = [("listing", "favorite", 3), ("shop", "cart_add", 2), ("taxonomy", "purchase", 2)]


def small_config(**kw):
    base = dict(d1=8, num_heads=2, max_len=8, pretrained_flavors=("skipgram",), component3_specs=SMALL_C3,
                vocab_sizes=dict(VOCAB))
    base.update(kw)
    return ADPMConfig(**base)


def bundle(seed=0, flavors=("skipgram",)):
    rng = np.random.default_rng(seed)
    dims = {"air": 256, "visual": 256, "skipgram": 64}
    return PretrainedBundle({f: EmbeddingTable.frozen(rng.normal(size=(VOCAB["listing"], dims[f])), f)
                             for f in flavors})


def random_batch(rng, B, M, vocab, lengths=None):
    lengths = rng.integers(0, M + 1, size=B) if lengths is None else np.asarray(lengths)
    mask = np.arange(M)[None, :] < lengths[:, None]
    idx = np.where(mask, rng.integers(1, vocab, size=(B, M)), 0)
    return PaddedBatch(idx, mask, lengths)


def random_inputs(config, rng, B=4, M=8, lengths=None):
    seqs = {}
    for key in config.required_keys():
        kind = key.split(":")[0]
        seqs[key] = random_batch(rng, B, M, VOCAB[kind], lengths)
    return ADPMInputs(rng.integers(1, VOCAB["listing"], size=B), seqs)


def pad_more(inputs, extra):
    seqs = {k: PaddedBatch(np.pad(b.indices, ((0, 0), (0, extra))), np.pad(b.mask, ((0, 0), (0, extra))),
                           b.lengths) for k, b in inputs.sequences.items()}
    return ADPMInputs(inputs.target, seqs)


def loop_attention(x, mask, Wq, Wk, Wv, Wh):
    """Single-head attention with explicit scalar loops."""
    P, d = x.shape
    dh = Wq.shape[1]
    q = [[sum(x[i, a] * Wq[a, c] for a in range(d)) for c in range(dh)] for i in range(P)]
    k = [[sum(x[i, a] * Wk[a, c] for a in range(d)) for c in range(dh)] for i in range(P)]
    v = [[sum(x[i, a] * Wv[a, c] for a in range(d)) for c in range(dh)] for i in range(P)]
    out = np.zeros((P, Wh.shape[1]))
    for i in range(P):
        s = [sum(q[i][c] * k[j][c] for c in range(dh)) / math.sqrt(dh) + (0.0 if mask[j] else -1e9)
             for j in range(P)]
        top = max(s)
        e = [math.exp(t - top) for t in s]
        z = sum(e)
        ctx = [sum(e[j] / z * v[j][c] for j in range(P)) for c in range(dh)]
        for o in range(Wh.shape[1]):
            out[i, o] = sum(ctx[c] * Wh[c, o] for c in range(dh))
    return out


class TestMHSA:
    def weights(self, rng, d, heads, dh):
        return [Tensor(rng.normal(size=s)) for s in [(d, heads * dh)] * 3 + [(heads * dh, d)]]

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 3))
        Ws = self.weights(rng, 3, 1, 3)
        got = mhsa(Tensor(x), np.ones((1, 2), bool), *Ws, num_heads=1, head_dim=3).data[0]
        want = loop_attention(x[0], [True, True], *[W.data for W in Ws])
        assert np.abs(got - want).max() < 1e-10

    def test_masked_key_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 3, 4))
        Ws = self.weights(rng, 4, 1, 2)
        mask = np.array([[True, True, False]])
        got = mhsa(Tensor(x), mask, *Ws, num_heads=1, head_dim=2).data[0]
        assert np.abs(got - loop_attention(x[0], mask[0], *[W.data for W in Ws])).max() < 1e-10

    def test_singleton_attends_to_itself(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 1, 4))
        Wq, Wk, Wv, Wh = self.weights(rng, 4, 2, 2)
        got = mhsa(Tensor(x), np.ones((1, 1), bool), Wq, Wk, Wv, Wh, num_heads=2, head_dim=2).data
        np.testing.assert_allclose(got, x @ Wv.data @ Wh.data, atol=1e-12)

    def test_identical_keys_give_uniform_weights(self):
        rng = np.random.default_rng(3)
        row = rng.normal(size=4)
        x = np.tile(row, (1, 5, 1))
        mask = np.array([[True, True, True, False, False]])
        Wq, Wk, Wv, Wh = self.weights(rng, 4, 1, 4)
        # distinct values, identical keys: the output is the mean of the unmasked values
        Wk = Tensor(np.zeros((4, 4)))
        x2 = x.copy()
        x2[0, :, :] += rng.normal(size=(5, 4))
        got = mhsa(Tensor(x2), mask, Wq, Wk, Wv, Wh, num_heads=1, head_dim=4).data[0]
        want = (x2[0, :3] @ Wv.data).mean(axis=0) @ Wh.data
        np.testing.assert_allclose(got, np.tile(want, (5, 1)), atol=1e-12)


class TestBlock:
    def test_dropout_zero_train_equals_eval(self):
        rng = np.random.default_rng(0)
        block = AdsformerBlock(8, 2, 4, 4, 0.0, 0.2, rng)
        x = Tensor(rng.normal(size=(3, 5, 8)))
        mask = np.ones((3, 5), bool)
        a = block(x, mask, training=True, rng=np.random.default_rng(1)).data
        assert np.array_equal(a, block(x, mask, training=False).data)

    def test_sublayer_order(self):
        rng = np.random.default_rng(4)
        block = AdsformerBlock(4, 1, 4, 4, 0.0, 0.2, rng)
        x = rng.normal(size=(1, 3, 4))
        mask = np.ones((1, 3), bool)

        def ln(v):
            return (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + 1e-5)

        p = {t.name.split(".")[1]: t.data for t in block.parameters()}
        a = loop_attention(x[0], mask[0], p["W_q"], p["W_k"], p["W_v"], p["W_h"])
        h1 = ln(x[0] + a)
        act = np.where(h1 > 0, h1, 0.2 * h1)
        want = ln(h1 + (act @ p["ffn_w1"] + p["ffn_b1"]) @ p["ffn_w2"] + p["ffn_b2"])
        np.testing.assert_allclose(block(Tensor(x), mask, False).data[0], want, atol=1e-9)


class TestADPMWidths:
    def test_ctr_default_width(self):
        cfg = ADPMConfig(vocab_sizes=dict(VOCAB))
        assert cfg.output_dim == 32 + 256 + 3 * (32 + 16 + 8) == 456
        u = ADPM(cfg, np.random.default_rng(0), bundle(flavors=("air",)))(random_inputs(cfg, np.random.default_rng(1))).u
        assert u.shape == (4, 456)

    def test_pccvr_default_width(self):
        cfg = ADPMConfig(num_heads=2, pretrained_flavors=("skipgram", "visual"), vocab_sizes=dict(VOCAB))
        assert cfg.output_dim == 32 + 64 + 256 + 168 == 520
        out = ADPM(cfg, np.random.default_rng(0), bundle(flavors=("skipgram", "visual")))(
            random_inputs(cfg, np.random.default_rng(1)))
        assert out.u.shape == (4, 520) and out.o2.shape == (4, 320)

    def test_component3_default_specs(self):
        specs = default_component3_specs()
        assert len(specs) == 9 and sum(d for *_, d in specs) == 168

    def test_only_component2_u_is_o2(self):
        cfg = small_config(use_component1=False, use_component3=False)
        out = ADPM(cfg, np.random.default_rng(0), bundle())(random_inputs(cfg, np.random.default_rng(2)))
        assert out.o1 is None and out.o3 is None
        assert np.array_equal(out.u.data, out.o2.data)

    def test_fixed_concat_order(self):
        cfg = small_config()
        out = ADPM(cfg, np.random.default_rng(0), bundle())(random_inputs(cfg, np.random.default_rng(3)))
        np.testing.assert_array_equal(out.u.data, np.concatenate([out.o1.data, out.o2.data, out.o3.data], axis=1))


class TestADPMErrors:
    def test_no_component(self):
        with pytest.raises(ADPMConfigError, match="at least one"):
            small_config(use_component1=False, use_component2=False, use_component3=False).validate()

    def test_missing_frozen_table(self):
        with pytest.raises(ADPMConfigError, match="air"):
            ADPM(small_config(pretrained_flavors=("air",)), np.random.default_rng(0), bundle())

    def test_bad_pooling(self):
        with pytest.raises(ADPMConfigError, match="pooling"):
            small_config(pooling_mode="sum").validate()

    def test_missing_sequences(self):
        cfg = small_config()
        model = ADPM(cfg, np.random.default_rng(0), bundle())
        inputs = random_inputs(cfg, np.random.default_rng(0))
        del inputs.sequences["listing:view"]
        with pytest.raises(ADPMConfigError, match="listing:view"):
            model(inputs)

    def test_functional_entry_checks_config(self):
        cfg = small_config()
        model = ADPM(cfg, np.random.default_rng(0), bundle())
        inputs = random_inputs(cfg, np.random.default_rng(0))
        out = adpm_forward(inputs.target, inputs.sequences, cfg, model)
        assert np.array_equal(out.u.data, model(inputs).u.data)
        with pytest.raises(ADPMConfigError):
            adpm_forward(inputs.target, inputs.sequences, small_config(), model)


class TestADPMBehaviour:
    def test_empty_sequences(self):
        cfg = small_config()
        model = ADPM(cfg, np.random.default_rng(0), bundle())
        inputs = random_inputs(cfg, np.random.default_rng(0), lengths=[0, 0, 0, 0])
        out = model(inputs)
        assert not out.o2.data.any() and not out.o3.data.any()
        enc = model.encoder
        x = enc.listing_table.weights.data[inputs.target][:, None, :] + enc.position_table.weights.data[:1]
        h = enc.blocks[0](Tensor(x), np.ones((4, 1), bool), False).data[:, 0]
        np.testing.assert_allclose(out.o1.data, h, atol=1e-12)

    def test_max_equals_avg_without_history(self):
        rng = np.random.default_rng(5)
        inputs = random_inputs(small_config(), rng, lengths=[0, 0, 0, 0])
        a = ADPM(small_config(pooling_mode="max"), np.random.default_rng(1), bundle())(inputs).u.data
        b = ADPM(small_config(pooling_mode="avg"), np.random.default_rng(1), bundle())(inputs).u.data
        assert np.array_equal(a, b)

    @given(st.integers(0, 2**31), st.integers(1, 10))
    def test_masking_invariance(self, seed, extra):
        rng = np.random.default_rng(seed)
        cfg = small_config(max_len=20)
        model = ADPM(cfg, rng, bundle())
        inputs = random_inputs(cfg, rng, M=6)
        a = model(inputs).u.data
        b = model(pad_more(inputs, extra)).u.data
        assert np.abs(a - b).max() < 1e-9

    @given(st.integers(0, 2**31))
    def test_permutation_invariance_without_positions(self, seed):
        rng = np.random.default_rng(seed)
        cfg = small_config(use_component2=False, use_component3=False)
        model = ADPM(cfg, rng, bundle())
        model.encoder.position_table.weights.data[:] = 0.0
        inputs = random_inputs(cfg, rng, M=8)
        perm = rng.permutation(8)
        b = inputs.sequences["listing:view"]
        shuffled = ADPMInputs(inputs.target, {"listing:view": PaddedBatch(b.indices[:, perm], b.mask[:, perm],
                                                                          b.lengths)})
        assert np.abs(model(inputs).o1.data - model(shuffled).o1.data).max() < 1e-10

    def test_positions_make_order_matter(self):
        rng = np.random.default_rng(8)
        cfg = small_config(use_component2=False, use_component3=False)
        model = ADPM(cfg, rng, bundle())
        model.encoder.position_table.weights.data[:] = rng.normal(size=model.encoder.position_table.weights.shape)
        inputs = random_inputs(cfg, rng, M=8, lengths=[8, 8, 8, 8])
        b = inputs.sequences["listing:view"]
        flipped = ADPMInputs(inputs.target, {"listing:view": PaddedBatch(b.indices[:, ::-1], b.mask, b.lengths)})
        assert np.abs(model(inputs).o1.data - model(flipped).o1.data).max() > 1e-6

    def test_frozen_tables_unchanged_trainable_tables_move(self):
        rng = np.random.default_rng(0)
        cfg = small_config()
        tables = bundle()
        ranker = PersonalizedRanker(RankerConfig(adpm=cfg, dcn=DCNConfig(deep_sizes=(4,))), rng, tables)
        before = tables["skipgram"].checksum()
        c1 = ranker.adpm.encoder.listing_table.weights.data.copy()
        c3 = {k: t.weights.data.copy() for k, t in ranker.adpm.component3.items()}
        inputs = random_inputs(cfg, rng, lengths=[8, 8, 8, 8])
        opt = Adam(ranker.parameters(), lr_max=0.01)
        opt.zero_grad()
        ag.backward(bce_loss(ranker.forward(np.zeros((4, 0)), inputs, training=True), [1, 0, 1, 0]))
        opt.step()
        assert tables["skipgram"].checksum() == before
        assert not np.array_equal(c1, ranker.adpm.encoder.listing_table.weights.data)
        for k, t in ranker.adpm.component3.items():
            assert not np.array_equal(c3[k], t.weights.data)


def test_full_model_gradient_check():
    rng = np.random.default_rng(11)
    cfg = small_config(d1=8, num_heads=2)
    ranker = PersonalizedRanker(RankerConfig(context_dim=3, adpm=cfg, dcn=DCNConfig(deep_sizes=(6, 4))),
                                rng, bundle())
    inputs = random_inputs(cfg, rng, B=4, M=8)
    ctx = rng.normal(size=(4, 3))
    y = np.array([1.0, 0.0, 1.0, 0.0])
    report = grad_check(lambda: bce_loss(ranker.forward(ctx, inputs, training=True), y),
                        ranker.parameters(), max_coords=25, rng=np.random.default_rng(0))
    assert report.passed, str(report)
