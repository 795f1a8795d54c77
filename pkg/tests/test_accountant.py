import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsd.accountant import (PrivacyLedger, budget_infimum, calibrate_sigma, dpsd_budget, dpsd_epsilon_at,
                             dpsd_epsilon_composed, l2_sensitivity, rdp_compose, rdp_gaussian, rdp_self_compose,
                             rdp_to_dp)
from oracles import budget_oracle

# 50-digit grid + golden-section reference (tests/oracles/budget_oracle.py)
GOLDEN = {
    (1e-3, 10, 256, 200, 100.0, 1e-5): (0.045634870632399957, 243.4265031),
    (1e-3, 3, 256, 300, 100.0, 1e-5): (0.0294699740197895, 351.2090131),
    (1e-2, 10, 64, 50, 10.0, 1e-6): (1.6814010796437417, 14.20619664),
}
BASE = dict(beta=1e-3, n_classes=10, batch_size=256, iterations=200, sigma=100.0, delta=1e-5)


class TestPrimitives:
    def test_sensitivity(self):
        assert l2_sensitivity(1e-3, 10) == pytest.approx(6.3246e-3, abs=1e-7)
        assert l2_sensitivity(0.5, 1) == 1.0
        assert l2_sensitivity(0.0, 7) == 0.0

    def test_gaussian(self):
        assert rdp_gaussian(1.0, 1.0, 2.0) == 1.0
        assert rdp_gaussian(1.0, 10.0, 2.0) == pytest.approx(rdp_gaussian(1.0, 1.0, 2.0) / 100, rel=1e-15)
        assert rdp_gaussian(0.0, 3.0, 5.0) == 0.0

    def test_gaussian_rejects(self):
        with pytest.raises(ValueError):
            rdp_gaussian(1.0, 0.0, 2.0)
        with pytest.raises(ValueError):
            rdp_gaussian(1.0, 1.0, 1.0)

    def test_compose(self):
        assert rdp_compose([(4.0, 0.3), (4.0, 0.3)]) == (4.0, 0.6)
        assert rdp_compose([])[1] == 0.0
        entries = [(3.0, 0.1)] * 37
        total = 0.0
        for _, e in entries:
            total += e
        assert rdp_compose(entries)[1] == pytest.approx(total, rel=1e-15)
        assert rdp_self_compose(3.0, 0.1, 37)[1] == rdp_compose(entries)[1]

    def test_compose_mixed_orders(self):
        with pytest.raises(ValueError, match="mixed"):
            rdp_compose([(2.0, 0.1), (3.0, 0.1)])

    def test_to_dp_closed_form(self):
        expected = math.log(0.5) - (math.log(0.5) + math.log(2.0))
        assert rdp_to_dp(2.0, 0.0, 0.5) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(-0.6931, abs=1e-4)

    def test_to_dp_limit(self):
        assert rdp_to_dp(1e6, 0.25, 0.99) == pytest.approx(0.25, abs=1e-4)

    def test_to_dp_decreasing_in_delta(self):
        deltas = np.logspace(-12, -0.01, 40)
        eps = [rdp_to_dp(7.5, 0.4, d) for d in deltas]
        assert all(a > b for a, b in zip(eps, eps[1:]))

    def test_to_dp_rejects(self):
        with pytest.raises(ValueError):
            rdp_to_dp(1.0, 0.1, 1e-5)
        with pytest.raises(ValueError):
            rdp_to_dp(2.0, 0.1, 1.0)


class TestBudget:
    @pytest.mark.parametrize("args", list(GOLDEN))
    def test_golden(self, args):
        eps, order = dpsd_budget(*args)
        want_eps, want_q = GOLDEN[args]
        assert abs(eps - want_eps) < 1e-9
        assert order == pytest.approx(want_q, rel=1e-6)

    def test_oracle_live(self):
        eps, q = budget_oracle.budget(1e-3, 10, 256, 200, 100, 1e-5, points=800)
        assert abs(float(eps) - GOLDEN[(1e-3, 10, 256, 200, 100.0, 1e-5)][0]) < 1e-12

    def test_doubling_iterations_increases(self):
        a = dpsd_budget(**BASE).epsilon
        b = dpsd_budget(**{**BASE, "iterations": 400}).epsilon
        assert b > a

    def test_zero_iterations_is_conversion_offset(self):
        eps, _ = dpsd_budget(**{**BASE, "iterations": 0})
        grid = 1 + np.exp(np.linspace(-10, math.log(1e7), 200_001))
        offset = np.log((grid - 1) / grid) - (math.log(1e-5) + np.log(grid)) / (grid - 1)
        assert eps == pytest.approx(offset.min(), abs=1e-9)
        assert eps == budget_infimum(1e-5)

    @pytest.mark.parametrize("axis,values", [
        ("beta", [1e-4, 3e-4, 1e-3, 3e-3, 1e-2]),
        ("n_classes", [2, 3, 5, 10, 100]),
        ("batch_size", [8, 32, 64, 256, 1024]),
        ("iterations", [1, 10, 50, 200, 1000]),
    ])
    def test_strictly_increasing(self, axis, values):
        eps = [dpsd_budget(**{**BASE, axis: v}).epsilon for v in values]
        assert all(a < b for a, b in zip(eps, eps[1:]))

    @pytest.mark.parametrize("axis,values", [
        ("sigma", [1.0, 10.0, 50.0, 100.0, 1000.0]),
        ("delta", [1e-9, 1e-7, 1e-5, 1e-3, 1e-1]),
    ])
    def test_strictly_decreasing(self, axis, values):
        eps = [dpsd_budget(**{**BASE, axis: v}).epsilon for v in values]
        assert all(a > b for a, b in zip(eps, eps[1:]))

    def test_argmin_optimality(self):
        eps, _ = dpsd_budget(**BASE)
        probes = 1 + np.exp(np.random.default_rng(0).uniform(-12, math.log(1e7), 100))
        args = BASE.values()
        assert all(dpsd_epsilon_at(q, *args) >= eps for q in probes)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(1.0001, 1e6), st.floats(1e-5, 1.0), st.integers(1, 100), st.integers(1, 1024),
           st.integers(0, 5000), st.floats(0.1, 1e4), st.floats(1e-12, 0.5))
    def test_two_paths(self, q, beta, c, b, T, sigma, delta):
        a = dpsd_epsilon_at(q, beta, c, b, T, sigma, delta)
        z = dpsd_epsilon_composed(q, beta, c, b, T, sigma, delta)
        assert abs(a - z) <= 1e-12 * max(1.0, abs(a))

    def test_zero_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            dpsd_budget(**{**BASE, "sigma": 0.0})


class TestCalibrate:
    @pytest.mark.parametrize("target", [0.1, 1.0, 8.0])
    def test_round_trip(self, target):
        sigma = calibrate_sigma(target, 1e-3, 3, 256, 300, 1e-5)
        eps = dpsd_budget(1e-3, 3, 256, 300, sigma, 1e-5).epsilon
        assert eps <= target
        assert target - eps < 1e-6

    def test_golden(self):
        assert calibrate_sigma(1.0, 1e-3, 3, 256, 300, 1e-5) == pytest.approx(3.8833251439607466, rel=1e-9)

    def test_larger_target_smaller_sigma(self):
        sigmas = [calibrate_sigma(t, 1e-3, 10, 64, 100, 1e-5) for t in (0.5, 1.0, 2.0, 4.0)]
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    def test_unreachable(self):
        floor = budget_infimum(1e-5)
        with pytest.raises(ValueError, match="infimum"):
            calibrate_sigma(floor - 0.01, 1e-3, 3, 256, 300, 1e-5)


class TestLedger:
    def test_data_ledger_recomputes(self):
        ledger = PrivacyLedger.for_data(1e-3, 10, 256, 100.0, 1e-5)
        for _ in range(200):
            ledger.record_annotation(256)
        assert ledger.iterations == 200 and ledger.queries == 51_200
        assert abs(ledger.epsilon - dpsd_budget(**BASE).epsilon) < 1e-9

    def test_data_ledger_batch_mismatch(self):
        ledger = PrivacyLedger.for_data(1e-3, 10, 256, 100.0, 1e-5)
        with pytest.raises(ValueError):
            ledger.record_annotation(100)

    def test_no_noise_is_infinite(self):
        ledger = PrivacyLedger.for_data(1e-3, 3, 8, 0.0, 1e-5)
        ledger.record_annotation(8)
        assert ledger.epsilon == math.inf
        assert ledger.to_dict()["epsilon"] == "inf"

    @pytest.mark.parametrize("rounds", [1, 10, 1000])
    def test_label_ledger_constant(self, rounds):
        ledger = PrivacyLedger.for_labels(2.0)
        for _ in range(rounds):
            ledger.record_annotation(64)
        assert ledger.epsilon == 2.0

    def test_label_ledger_rejects_second_budget(self):
        ledger = PrivacyLedger.for_labels(2.0)
        ledger.register_labels(2.0)
        with pytest.raises(ValueError, match="already"):
            ledger.register_labels(3.0)

    def test_render(self):
        ledger = PrivacyLedger.for_data(1e-3, 10, 256, 100.0, 1e-5)
        ledger.record_annotation(256)
        doc = ledger.to_dict()
        assert set(doc) == {"mode", "parameters", "epsilon", "delta", "q_opt"}
        assert "optimal order" in ledger.render()
        assert "LabelDP" in PrivacyLedger.for_labels(1.0).to_json()
