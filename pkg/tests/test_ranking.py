import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adsformer import autograd as ag
from adsformer.autograd import ShapeError, Tensor
from adsformer.checkpoint import CheckpointError, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from adsformer.ranking import DCN, DCNConfig, PersonalizedRanker, RankerConfig, bce_loss, cross_layer, desk_deep_sizes
from adsformer.training import PreparedData, TrainConfig, train_ranker


class TestCrossLayer:
    def test_zero_weights_is_identity(self):
        x0, xl = Tensor(np.array([[1.0, -2.0, 3.0]])), Tensor(np.array([[0.5, 0.25, -1.0]]))
        out = cross_layer(x0, xl, Tensor(np.zeros((3, 3))), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, xl.data)

    def test_unit_bias_doubles(self):
        x0 = Tensor(np.array([[1.0, -2.0, 3.0]]))
        out = cross_layer(x0, x0, Tensor(np.zeros((3, 3))), Tensor(np.ones(3)))
        np.testing.assert_array_equal(out.data, 2 * x0.data)

    def test_scalar_case(self):
        out = cross_layer(Tensor(np.array([[2.0]])), Tensor(np.array([[3.0]])), Tensor(np.array([[1.0]])),
                          Tensor(np.zeros(1)))
        assert out.data.item() == 9.0

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            cross_layer(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))


class TestBCE:
    @pytest.mark.parametrize("p, want", [(0.5, 0.693147), (0.25, 1.386294)])
    def test_hand_values(self, p, want):
        assert abs(bce_loss(Tensor(np.array([p])), [1]).item() - want) < 1e-6

    def test_clamp_near_one(self):
        loss = bce_loss(Tensor(np.array([0.9999999])), [1]).item()
        assert np.isfinite(loss) and loss < 1e-6

    def test_clamp_exact_zero_and_one(self):
        loss = bce_loss(Tensor(np.array([0.0, 1.0])), [1, 0]).item()
        assert abs(loss + np.log(1e-7)) < 1e-9

    @given(st.integers(0, 2**31), st.integers(1, 30))
    def test_logit_gradient_closed_form(self, seed, n):
        rng = np.random.default_rng(seed)
        z = Tensor(rng.normal(0, 3, size=n), requires_grad=True)
        y = rng.integers(0, 2, size=n)
        p = ag.sigmoid(z)
        ag.backward(bce_loss(p, y))
        # the clamp is inactive away from saturation
        ok = (p.data > 1e-7) & (p.data < 1 - 1e-7)
        assert np.abs(z.grad - (p.data - y) / n)[ok].max(initial=0) < 1e-10


class TestDCN:
    def test_desk_sizes(self):
        assert desk_deep_sizes("ctr") == (100, 50, 5, 10)
        assert desk_deep_sizes("pccvr") == (48, 24)
        assert DCNConfig("ctr").resolved().num_cross == 4 and DCNConfig("pccvr").resolved().num_cross == 2

    def test_zero_head_gives_half(self):
        rng = np.random.default_rng(0)
        net = DCN(5, DCNConfig(), rng)
        net.head_W.data[:] = 0
        p = net.forward(Tensor(rng.normal(size=(7, 5))))
        np.testing.assert_array_equal(p.data, np.full(7, 0.5))

    def test_eval_deterministic_and_open_interval(self):
        rng = np.random.default_rng(1)
        net = DCN(5, DCNConfig(), rng)
        x = Tensor(rng.normal(size=(9, 5)) * 50)
        a, b = net.forward(x).data, net.forward(x).data
        assert np.array_equal(a, b)
        assert ((a > 0) & (a < 1)).all()
        assert (np.abs(net.logits(x).data) > 40).any()

    def test_input_width_checked(self):
        with pytest.raises(ShapeError):
            DCN(5, DCNConfig(), np.random.default_rng(0)).forward(Tensor(np.ones((2, 4))))

    @pytest.mark.parametrize("topology", ["parallel", "serial"])
    def test_topologies_and_no_cross(self, topology):
        rng = np.random.default_rng(2)
        for num_cross in (0, 2):
            net = DCN(4, DCNConfig("pccvr", num_cross=num_cross, topology=topology), rng)
            assert len(net.cross) == num_cross
            assert net.forward(Tensor(rng.normal(size=(3, 4)))).shape == (3,)

    def test_bad_topology(self):
        with pytest.raises(ValueError, match="topology"):
            DCNConfig(topology="ring").resolved()

    @given(st.integers(0, 2**31))
    def test_one_quarter_lipschitz_in_logit(self, seed):
        rng = np.random.default_rng(seed)
        z1, z2 = rng.normal(0, 5, size=2)
        p1, p2 = ag.sigmoid(Tensor(np.array([z1, z2]))).data
        assert abs(p1 - p2) <= 0.25 * abs(z1 - z2) + 1e-15


def tiny_ranker(task="ctr", seed=0):
    return PersonalizedRanker(RankerConfig(task=task, context_dim=4, dcn=DCNConfig(task, deep_sizes=(6, 3))),
                              np.random.default_rng(seed))


class TestRanker:
    def test_pccvr_rejects_unclicked_rows(self):
        data = PreparedData(np.ones((4, 4)), None, np.array([1.0, 0, 0, 0]), np.array([True, True, False, True]))
        with pytest.raises(ValueError, match="clicked"):
            train_ranker(tiny_ranker("pccvr"), data, TrainConfig(batch_size=2), np.random.default_rng(0))

    def test_pccvr_estimator_trains_on_clicked_only(self, small_data):
        from adsformer.estimators import AdsformerRanker
        train, _ = small_data
        est = AdsformerRanker(task="pccvr", components=(), deep_sizes=(4,), max_steps=2, batch_size=32)
        est.fit(train)
        assert est.n_train_rows_ == int(train.impressions.click.sum())

    def test_empty_wide_input_rejected(self):
        with pytest.raises(ValueError):
            PersonalizedRanker(RankerConfig(context_dim=0), np.random.default_rng(0))

    def test_state_dict_round_trip(self, tmp_path):
        a, b = tiny_ranker(seed=0), tiny_ranker(seed=1)
        rng = np.random.default_rng(3)
        data = PreparedData(rng.normal(size=(16, 4)), None, rng.integers(0, 2, 16).astype(float), np.ones(16, bool))
        train_ranker(a, data, TrainConfig(batch_size=8), rng)
        save_checkpoint(tmp_path / "a.ckpt", a.state_dict())
        state, _ = load_checkpoint(tmp_path / "a.ckpt")
        b.load_state_dict(state)
        x = Tensor(rng.normal(size=(5, 4)))
        assert np.array_equal(a.dcn.forward(x).data, b.dcn.forward(x).data)
        assert "deep0.bn.running_mean" in state


class TestCheckpointFile:
    def test_round_trip_is_byte_identical(self, tmp_path):
        sections = {"w": np.arange(6.0).reshape(2, 3) / 3, "b": np.array([np.pi]), "s": np.array(2.5)}
        raw = dumps_checkpoint(sections, {"k": [1, 2]})
        back, meta = loads_checkpoint(raw)
        assert meta == {"k": [1, 2]} and back["s"].shape == ()
        assert dumps_checkpoint(back, meta) == raw

    def test_corruption_detected(self):
        raw = bytearray(dumps_checkpoint({"w": np.ones(3)}))
        raw[-1] ^= 1
        with pytest.raises(CheckpointError, match="checksum"):
            loads_checkpoint(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            loads_checkpoint(b"PK\x03\x04")

    def test_truncation_detected(self):
        raw = dumps_checkpoint({"w": np.ones(3)})
        with pytest.raises(CheckpointError):
            loads_checkpoint(raw[:-4])

    def test_names_without_whitespace(self):
        with pytest.raises(CheckpointError):
            dumps_checkpoint({"a b": np.ones(1)})
