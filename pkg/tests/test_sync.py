import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fclsim.encoder import LayoutMismatchError, ParamVector, param_l1_distance
from fclsim.protocol import CommLedger
from fclsim.protocol.sync import (
    aggregate_params,
    calibrate_alpha,
    client_distance,
    predict_distance,
    ptnu,
    ptnu_steps,
)


def pv(values, layout=None):
    values = np.asarray(values, dtype=float)
    return ParamVector(values, layout or (("w", (values.size,)),))


class TestAggregate:
    def test_weighted_mean(self):
        assert aggregate_params([(pv([0.0]), 1), (pv([4.0]), 3)]).values.tolist() == [3.0]

    def test_identical_models_bit_identical(self):
        rng = np.random.default_rng(0)
        p = pv(rng.normal(size=50))
        out = aggregate_params([(p, n) for n in (3, 7, 11, 13)])
        assert out.values.tobytes() == p.values.tobytes()

    def test_linearity(self):
        rng = np.random.default_rng(1)
        models = [(pv(rng.normal(size=6)), int(rng.integers(1, 9))) for _ in range(5)]
        a = 2.5 * aggregate_params(models).values
        b = aggregate_params([(pv(2.5 * p.values), n) for p, n in models]).values
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            aggregate_params([])
        with pytest.raises(LayoutMismatchError):
            aggregate_params([(pv([1.0, 2.0]), 1), (pv([1.0, 2.0], (("v", (2,)),)), 1)])
        with pytest.raises(ValueError):
            aggregate_params([(pv([1.0]), 0), (pv([2.0]), 0)])


class TestPtnu:
    def test_already_close(self):
        theta, xi = pv(np.zeros(4)), pv(np.full(4, 0.1))
        out, steps = ptnu(theta, xi, 0.2, 0.5, return_steps=True)
        assert steps == 0 and out is xi

    def test_halving_example(self):
        out, steps = ptnu(pv(np.zeros(4)), pv(np.ones(4)), 0.2, 0.5, return_steps=True)
        assert steps == 3
        np.testing.assert_array_equal(out.values, 0.125)
        assert param_l1_distance(pv(np.zeros(4)), out) == 0.125

    def test_exact_boundary_stops(self):
        # d0 equals the target: strict '>' guard means no step
        assert ptnu(pv(np.zeros(2)), pv(np.ones(2)), 1.0, 0.9, return_steps=True)[1] == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 0.999), st.floats(1e-3, 0.99))
    def test_geometric_law(self, seed, m_d, frac):
        rng = np.random.default_rng(seed)
        theta, xi = pv(rng.normal(size=20)), pv(rng.normal(size=20))
        d0 = param_l1_distance(theta, xi)
        d_target = frac * d0
        ratio = math.log(d_target / d0) / math.log(m_d)
        assume(abs(ratio - round(ratio)) > 1e-9)  # exact ties are decided by rounding
        out, steps = ptnu(theta, xi, d_target, m_d, return_steps=True)
        assert steps == ptnu_steps(d0, d_target, m_d) == max(0, math.ceil(math.log(d_target / d0) / math.log(m_d)))
        d = param_l1_distance(theta, out)
        assert d <= d_target
        assert d == pytest.approx(m_d**steps * d0, rel=1e-12, abs=1e-12)

    def test_zero_target_returns_online(self):
        theta = pv([1.0, 2.0])
        out = ptnu(theta, pv([0.0, 0.0]), 0.0, 0.9)
        assert out.values.tolist() == theta.values.tolist()
        same = pv([1.0, 2.0])
        assert ptnu(theta, same, 0.0, 0.9) is same

    @pytest.mark.parametrize("d_target, m_d", [(-0.1, 0.9), (math.inf, 0.9), (0.1, 1.0), (0.1, 0.0)])
    def test_invalid_arguments(self, d_target, m_d):
        with pytest.raises(ValueError):
            ptnu(pv([0.0]), pv([1.0]), d_target, m_d)

    def test_non_finite_inputs(self):
        bad = ParamVector.__new__(ParamVector)
        object.__setattr__(bad, "values", np.array([np.nan]))
        object.__setattr__(bad, "layout", (("w", (1,)),))
        with pytest.raises(ValueError):
            ptnu(pv([0.0]), bad, 0.1, 0.9)


class TestDistancePrediction:
    def test_client_distance(self):
        rng = np.random.default_rng(2)
        a, b = pv(rng.normal(size=8)), pv(rng.normal(size=8))
        assert client_distance(a, a) == 0.0
        assert client_distance(a, b) == param_l1_distance(a, b)

    def test_single_client(self):
        assert predict_distance([0.7], 0.5) == (0.7, 0.35)

    def test_arithmetic(self):
        DP, d = predict_distance([1.0, 3.0], 0.9)
        assert DP == 2.0 and d == pytest.approx(1.8)

    def test_errors(self):
        with pytest.raises(ValueError):
            predict_distance([], 1.0)
        with pytest.raises(ValueError):
            predict_distance([1.0], 0.0)

    def test_upper_bound_equal_weights(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            theta = pv(rng.normal(size=30))
            targets = [pv(rng.normal(size=30) * rng.uniform(0.1, 3)) for _ in range(n)]
            exact = param_l1_distance(theta, aggregate_params([(t, 5) for t in targets]))
            DP, _ = predict_distance([client_distance(theta, t) for t in targets], 1.0)
            assert exact <= DP + 1e-12


class TestCalibration:
    def test_examples(self):
        assert calibrate_alpha(2.0, 2.0) == 1.0
        assert calibrate_alpha(1.8, 2.0) == pytest.approx(0.9)

    def test_exact_after_calibration(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            DP = rng.uniform(0.01, 5)
            d = DP * rng.uniform(0, 1)
            assert calibrate_alpha(d, DP) * DP == pytest.approx(d, abs=1e-12)

    def test_zero_cases(self):
        assert calibrate_alpha(0.0, 0.0, alpha=0.7) == 0.7
        with pytest.raises(ZeroDivisionError):
            calibrate_alpha(0.1, 0.0)


class TestLedger:
    def test_totals_and_filters(self):
        led = CommLedger()
        led.record(1, 0, "down", "online_net", 100)
        led.record(1, 0, "up", "scalar", 8)
        led.record(2, 1, "up", "online_net", 100)
        assert led.total() == 208
        assert led.total(round=1) == 108
        assert led.total(direction="up", component="online_net") == 100
        assert led.total(client=1) == 100
        assert led.by_component()["scalar"] == 8
        assert led.by_round() == {1: 108, 2: 100}

    @pytest.mark.parametrize(
        "args", [(1, 0, "sideways", "scalar", 8), (1, 0, "up", "gradients", 8), (1, 0, "up", "scalar", -1)]
    )
    def test_rejects_bad_records(self, args):
        with pytest.raises(ValueError):
            CommLedger().record(*args)

    def test_csv_round_trip(self, tmp_path):
        led = CommLedger()
        led.record(3, 2, "up", "features", 1234)
        led.record(3, 2, "down", "target_net", 4)
        led.to_csv(tmp_path / "l.csv")
        text = (tmp_path / "l.csv").read_text()
        assert text.splitlines()[0] == "round,client,direction,component,bytes"
        back = CommLedger.from_csv(tmp_path / "l.csv")
        assert back.entries == led.entries

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            CommLedger.from_csv(tmp_path / "x.csv")
