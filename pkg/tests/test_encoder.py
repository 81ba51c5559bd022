import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclsim.encoder import (
    D_FEAT,
    HIDDEN,
    FeatureVector,
    LayoutMismatchError,
    ParamVector,
    ema_update,
    encode,
    forward_embed,
    init_encoder,
    init_predictor,
    param_l1_distance,
)
from fclsim.numerics import DegenerateVectorError, ShapeError
from fclsim.protocol.sync import aggregate_params

LAYOUT = (("a", (2,)), ("b", (1, 3)))


def pv(values, layout=LAYOUT):
    return ParamVector(np.asarray(values, dtype=float), layout)


def random_pv(rng, n=5):
    return ParamVector(rng.normal(size=n), (("w", (n,)),))


class TestParamVector:
    def test_length_must_match_layout(self):
        with pytest.raises(ShapeError):
            pv([1.0, 2.0])

    def test_values_read_only(self):
        p = pv(np.arange(5.0))
        with pytest.raises(ValueError):
            p.values[0] = 3.0

    def test_arrays_round_trip(self):
        p = pv(np.arange(5.0))
        arrs = p.arrays()
        assert arrs["a"].tolist() == [0.0, 1.0] and arrs["b"].tolist() == [[2.0, 3.0, 4.0]]
        back = ParamVector.from_arrays(arrs.items())
        assert back.layout == p.layout and np.array_equal(back.values, p.values)

    def test_wire_bytes(self):
        assert pv(np.arange(5.0)).n_bytes == 20

    def test_serialization_round_trip(self):
        rng = np.random.default_rng(0)
        enc = init_encoder(rng, 16)
        back = ParamVector.from_bytes(enc.to_bytes())
        assert back.layout == enc.layout
        np.testing.assert_array_equal(back.values, enc.values.astype(np.float32))
        assert len(enc.to_bytes()) > enc.n_bytes

    def test_bad_blob(self):
        with pytest.raises(ValueError):
            ParamVector.from_bytes(b"nope")


class TestNetworks:
    def test_sizes(self):
        rng = np.random.default_rng(0)
        enc = init_encoder(rng, 256)
        pred = init_predictor(rng)
        assert len(enc) == 256 * HIDDEN + HIDDEN + HIDDEN * D_FEAT + D_FEAT == 18528
        assert len(pred) == 2112

    def test_zero_weights_degenerate(self):
        enc = init_encoder(np.random.default_rng(0), 16)
        zero = enc.with_values(np.zeros(len(enc)))
        with pytest.raises(DegenerateVectorError):
            forward_embed(zero, np.random.default_rng(1).uniform(size=(4, 4)))

    def test_deterministic(self):
        enc = init_encoder(np.random.default_rng(0), 16)
        img = np.random.default_rng(1).uniform(size=(4, 4))
        a, b = forward_embed(enc, img), forward_embed(enc, img)
        assert a.embedding.tobytes() == b.embedding.tobytes()

    def test_embedding_unit_norm_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            enc = init_encoder(rng, 64)
            f = forward_embed(enc, rng.uniform(size=(8, 8)), client_id=3, volume_id=7, partition=2)
            assert abs(np.linalg.norm(f.embedding) - 1.0) <= 1e-9
            assert (f.client_id, f.volume_id, f.partition) == (3, 7, 2)

    def test_shape_mismatch(self):
        enc = init_encoder(np.random.default_rng(0), 16)
        with pytest.raises(ShapeError):
            forward_embed(enc, np.zeros((5, 5)))
        with pytest.raises(ShapeError):
            encode(enc, np.zeros((2, 5, 5)))

    def test_feature_vector_requires_unit_norm(self):
        with pytest.raises(ValueError):
            FeatureVector(np.array([1.0, 1.0]), 0, 0, 0)


class TestEma:
    def test_m_one_keeps_target(self):
        t, o = pv(np.ones(5)), pv(np.zeros(5))
        assert ema_update(t, o, 1.0) is t

    def test_arithmetic(self):
        out = ema_update(pv(np.ones(5)), pv(np.zeros(5)), 0.99)
        np.testing.assert_allclose(out.values, 0.99)

    @pytest.mark.parametrize("m", [0.0, -0.1, 1.5])
    def test_m_range(self, m):
        with pytest.raises(ValueError):
            ema_update(pv(np.ones(5)), pv(np.zeros(5)), m)

    def test_layout_mismatch(self):
        other = ParamVector(np.zeros(5), (("a", (5,)),))
        with pytest.raises(LayoutMismatchError):
            ema_update(pv(np.ones(5)), other, 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.999))
    def test_contraction(self, seed, m):
        rng = np.random.default_rng(seed)
        xi, theta = random_pv(rng, 9), random_pv(rng, 9)
        lhs = param_l1_distance(ema_update(xi, theta, m), theta)
        assert lhs == pytest.approx(m * param_l1_distance(xi, theta), rel=1e-12, abs=1e-15)

    def test_commutes_with_aggregation(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            xis = [random_pv(rng) for _ in range(4)]
            thetas = [random_pv(rng) for _ in range(4)]
            n = rng.integers(1, 10, size=4)
            m = rng.uniform(0.5, 0.999)
            a = aggregate_params([(ema_update(x, t, m), c) for x, t, c in zip(xis, thetas, n)])
            b = ema_update(aggregate_params(list(zip(xis, n))), aggregate_params(list(zip(thetas, n))), m)
            np.testing.assert_allclose(a.values, b.values, atol=1e-12)


class TestDistance:
    def test_zero(self):
        p = pv(np.arange(5.0))
        assert param_l1_distance(p, p) == 0.0

    def test_arithmetic(self):
        lay = (("w", (2,)),)
        assert param_l1_distance(pv([1.0, 3.0], lay), pv([2.0, 5.0], lay)) == 1.5

    def test_metric_properties(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a, b, c = (random_pv(rng) for _ in range(3))
            assert param_l1_distance(a, b) == param_l1_distance(b, a)
            assert param_l1_distance(a, c) <= param_l1_distance(a, b) + param_l1_distance(b, c) + 1e-15

    def test_layout_mismatch(self):
        with pytest.raises(LayoutMismatchError):
            param_l1_distance(pv(np.ones(5)), ParamVector(np.zeros(5), (("a", (5,)),)))
