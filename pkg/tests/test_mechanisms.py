import itertools
import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_simplex
from dpsd.mechanisms import (AnnotationBatch, PrivacyConfig, annotate, annotate_data_sensitive,
                             annotate_label_sensitive, gaussian_perturb, normalize_gradient, project_to_simplex,
                             randomized_response, rr_frequency_audit, rr_keep_probability, standard_normal,
                             topk_indices, topk_mask)

vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e6, 1e6, allow_nan=False))


def brute_force_topk(v, k):
    """Reference rule: sort (value desc, index asc) and keep the first k."""
    ranked = sorted(range(len(v)), key=lambda j: (-v[j], j))
    return sorted(ranked[:k])


class TestTopK:
    def test_mask_example(self):
        np.testing.assert_array_equal(topk_mask([3.0, 1.0, 2.0], 2), [3.0, 0.0, 2.0])

    def test_mask_full_k_identity(self):
        v = np.array([0.3, -1.0, 2.5, 0.0])
        np.testing.assert_array_equal(topk_mask(v, 4), v)

    def test_mask_ties_lower_index(self):
        np.testing.assert_array_equal(topk_mask([1.0, 1.0, 1.0], 2), [1.0, 1.0, 0.0])

    def test_indices_examples(self):
        np.testing.assert_array_equal(topk_indices([0.1, 0.5, 0.2, 0.2], 2), [1, 2])
        np.testing.assert_array_equal(topk_indices([0.1, 0.5, 0.2, 0.2], 4), [0, 1, 2, 3])
        np.testing.assert_array_equal(topk_indices(np.full(5, 0.2), 2), [0, 1])

    @pytest.mark.parametrize("values", [(1, 1, 2, 2), (0, 0, 0, 1), (3, 1, 3, 1), (5, 5, 5, 5)])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_tie_rule_over_permutations(self, values, k):
        for perm in set(itertools.permutations(values)):
            v = np.array(perm, dtype=float)
            np.testing.assert_array_equal(topk_indices(v, k), brute_force_topk(v, k))

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_mask([1.0, 2.0, 3.0], k)

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.data())
    def test_mask_properties(self, v, data):
        k = data.draw(st.integers(1, len(v)))
        out = topk_mask(v, k)
        kept = brute_force_topk(v, k)
        np.testing.assert_array_equal(out[kept], v[kept])
        dropped = np.setdiff1d(np.arange(len(v)), kept)
        np.testing.assert_array_equal(out[dropped], 0.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(0, 1e6)), st.data())
    def test_mask_idempotent_nonnegative(self, v, data):
        # with negative kept entries the zeroed slots would outrank them on a second pass
        k = data.draw(st.integers(1, len(v)))
        out = topk_mask(v, k)
        np.testing.assert_array_equal(topk_mask(out, k), out)

    def test_batch_rows(self):
        v = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 5.0]])
        np.testing.assert_array_equal(topk_mask(v, 1), [[3.0, 0, 0], [0, 5.0, 0]])


class TestNormalize:
    def test_zero(self):
        np.testing.assert_array_equal(normalize_gradient(np.zeros(4), 1e-3, 1e-4), 0.0)

    def test_closed_form(self):
        np.testing.assert_allclose(normalize_gradient([3.0, 4.0], 1.0, 1e-12), [0.6, 0.8], atol=1e-12)

    def test_norm_bound_sweep(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((100_000, 10)) * np.exp(rng.uniform(-20, 20, (100_000, 1)))
        for beta in (1e-3, 1.0):
            norms = np.linalg.norm(normalize_gradient(g, beta, 1e-4), axis=1)
            assert np.all(norms < beta)

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.floats(1e-6, 10), st.floats(1e-12, 1))
    @example(np.full(10, 1602.0), 9.0, 1e-12)
    def test_norm_bound_property(self, g, beta, h):
        assert np.linalg.norm(normalize_gradient(g, beta, h)) < beta

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_gradient([1.0, np.inf], 1.0, 1e-4)


class TestGaussian:
    def test_zero_std(self, rng):
        v = np.array([1.0, 2.0])
        np.testing.assert_array_equal(gaussian_perturb(v, 0.0, rng), v)

    def test_moments(self):
        n = 1_000_000
        std = 2.5
        x = gaussian_perturb(np.zeros(n), std, np.random.default_rng(3))
        assert abs(x.mean()) < 4 * std / math.sqrt(n)
        assert abs(x.var() / std**2 - 1) < 0.01

    def test_replayable(self):
        a = gaussian_perturb(np.zeros(50), 1.0, np.random.default_rng(9))
        b = gaussian_perturb(np.zeros(50), 1.0, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_fixed_uniforms_per_sample(self):
        rng = np.random.default_rng(4)
        standard_normal(rng, (7,))
        ref = np.random.default_rng(4)
        ref.random((7, 2))
        assert rng.random() == ref.random()

    def test_negative_std(self, rng):
        with pytest.raises(ValueError):
            gaussian_perturb(np.zeros(2), -1.0, rng)


class TestDataSensitive:
    def test_no_noise_is_normalized_descent(self, rng):
        cfg = PrivacyConfig(sigma=0.0, k=4, h=1e-12, beta=1.0, project_simplex=False)
        t, s = random_simplex(rng, 6, 4), random_simplex(rng, 6, 4)
        grads = rng.standard_normal((6, 4))
        out = annotate_data_sensitive(t, s, grads, cfg, 0.1, rng)
        expected = s - 0.1 * grads / np.linalg.norm(grads, axis=1, keepdims=True)
        np.testing.assert_allclose(out.labels, expected, atol=1e-12)
        assert out.mechanisms == 6 and out.mode == "data"

    def test_zero_gradient_gives_pure_noise(self):
        cfg = PrivacyConfig(sigma=100.0, beta=1e-3, k=3, project_simplex=False)
        lr = 0.5
        s = np.tile([0.2, 0.3, 0.5], (200_000, 1))
        out = annotate_data_sensitive(s, s, np.zeros_like(s), cfg, lr, np.random.default_rng(1))
        resid = out.labels - s
        std = lr * cfg.sigma * cfg.beta
        assert abs(resid.mean()) < 4 * std / math.sqrt(resid.size)
        assert abs(resid.std() / std - 1) < 0.01

    def test_batch_averaged_neighbor_swap(self):
        c, b, beta = 10, 32, 1e-3
        cfg = PrivacyConfig(sigma=0.0, beta=beta, k=c, annotation_mode="batch-averaged", project_simplex=False)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(2000):
            s = random_simplex(rng, b, c)
            grads = rng.standard_normal((b, c)) * 10
            swapped = grads.copy()
            swapped[rng.integers(b)] = rng.standard_normal(c) * 1e3
            a = annotate_data_sensitive(s, s, grads, cfg, 1.0, rng).labels
            z = annotate_data_sensitive(s, s, swapped, cfg, 1.0, rng).labels
            worst = max(worst, np.linalg.norm(a[0] - z[0]))
        assert worst <= 2 * beta * math.sqrt(c) / b

    def test_sum_sensitivity(self):
        # sums of per-example normalized masked gradients on neighboring batches
        c, b, beta = 10, 16, 1e-3
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(10_000):
            g = rng.standard_normal((b, c)) * np.exp(rng.uniform(-5, 5, (b, 1)))
            g2 = g.copy()
            g2[rng.integers(b)] = rng.standard_normal(c) * 100
            d = normalize_gradient(topk_mask(g, 3), beta, 1e-4).sum(0) - normalize_gradient(topk_mask(g2, 3), beta,
                                                                                               1e-4).sum(0)
            worst = max(worst, np.linalg.norm(d))
        assert worst <= 2 * beta * math.sqrt(c) + 1e-12

    def test_projection(self, rng):
        cfg = PrivacyConfig(sigma=1e4, beta=1.0, k=3)
        s = random_simplex(rng, 20, 5)
        out = annotate_data_sensitive(s, s, rng.standard_normal((20, 5)), cfg, 1.0, rng).labels
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_project_all_negative_row_uniform(self):
        np.testing.assert_array_equal(project_to_simplex(np.array([[-1.0, -2.0]])), [[0.5, 0.5]])

    def test_batch_mismatch(self, rng):
        cfg = PrivacyConfig()
        with pytest.raises(ValueError):
            annotate_data_sensitive(np.ones((3, 4)) / 4, np.ones((2, 4)) / 4, np.zeros((3, 4)), cfg, 0.1, rng)

    def test_wrong_switch(self, rng):
        with pytest.raises(ValueError):
            annotate_data_sensitive(np.ones((1, 3)) / 3, np.ones((1, 3)) / 3, np.zeros((1, 3)),
                                    PrivacyConfig(switch=0), 0.1, rng)


class TestRandomizedResponse:
    def test_symmetric_coin(self):
        assert rr_keep_probability(2, 0.0) == 0.5

    def test_ten_classes_ln9(self):
        assert rr_keep_probability(10, math.log(9)) == pytest.approx(0.5, abs=1e-15)

    def test_frequencies(self):
        n, eps, trials = 4, 1.0, 100_000
        rng = np.random.default_rng(7)
        picks = np.array([randomized_response(2, [0, 1, 2, 3], eps, rng) for _ in range(trials)])
        p_keep = math.exp(eps) / (math.exp(eps) + n - 1)
        probs = np.full(n, (1 - p_keep) / (n - 1))
        probs[2] = p_keep
        freq = np.bincount(picks, minlength=n) / trials
        se = np.sqrt(probs * (1 - probs) / trials)
        assert np.all(np.abs(freq - probs) < 4 * se)

    def test_custom_domain(self, rng):
        for _ in range(200):
            assert randomized_response(7, [3, 7, 9], 0.5, rng) in (3, 7, 9)

    def test_outside_domain(self, rng):
        with pytest.raises(ValueError):
            randomized_response(5, [0, 1, 2], 1.0, rng)


class TestLabelSensitive:
    def test_full_k_always_rr(self, rng):
        cfg = PrivacyConfig(switch=0, k=4, epsilon_rr=1e-9)
        t = random_simplex(rng, 40_000, 4, 3.0)
        out = annotate_label_sensitive(t, random_simplex(rng, 40_000, 4), cfg, rng).labels
        # near-zero budget: uniform over all classes regardless of the student
        freq = out.mean(axis=0)
        assert np.all(np.abs(freq - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 40_000))

    def test_infinite_budget_returns_teacher_class(self, rng):
        cfg = PrivacyConfig(switch=0, k=3, epsilon_rr=math.inf)
        t = random_simplex(rng, 500, 3)
        out = annotate_label_sensitive(t, random_simplex(rng, 500, 3), cfg, rng).labels
        np.testing.assert_array_equal(out.argmax(1), t.argmax(1))

    def test_fallback_uniform_over_topk(self):
        k, trials = 3, 100_000
        cfg = PrivacyConfig(switch=0, k=k)
        teacher = np.tile([0.0, 0.0, 0.0, 0.0, 1.0], (trials, 1))
        student = np.tile([0.3, 0.1, 0.25, 0.35, 0.0], (trials, 1))
        out = annotate_label_sensitive(teacher, student, cfg, np.random.default_rng(8)).labels
        freq = out.mean(axis=0)
        assert freq[1] == 0 and freq[4] == 0
        se = math.sqrt((1 / k) * (1 - 1 / k) / trials)
        assert np.all(np.abs(freq[[0, 2, 3]] - 1 / k) < 4 * se)

    @pytest.mark.parametrize("domain", ["all-classes", "top-k-set"])
    def test_one_hot_and_fallback_in_set(self, domain, rng):
        cfg = PrivacyConfig(switch=0, k=2, epsilon_rr=0.5, rr_domain=domain)
        t, s = random_simplex(rng, 300, 6, 2.0), random_simplex(rng, 300, 6, 2.0)
        out = annotate_label_sensitive(t, s, cfg, rng).labels
        assert set(np.unique(out)) <= {0.0, 1.0}
        np.testing.assert_array_equal(out.sum(axis=1), 1.0)
        top = topk_indices(s, 2)
        picked = out.argmax(1)
        outside = np.array([t[i].argmax() not in top[i] for i in range(300)])
        assert outside.any()
        assert all(picked[i] in top[i] for i in np.flatnonzero(outside))
        if domain == "top-k-set":
            assert all(picked[i] in top[i] for i in range(300))

    def test_top_k_domain_keep_rate(self):
        trials = 50_000
        cfg = PrivacyConfig(switch=0, k=2, epsilon_rr=1.0, rr_domain="top-k-set")
        teacher = np.tile([1.0, 0.0, 0.0, 0.0], (trials, 1))
        student = np.tile([0.4, 0.3, 0.2, 0.1], (trials, 1))
        out = annotate_label_sensitive(teacher, student, cfg, np.random.default_rng(2)).labels
        p = math.e / (math.e + 1)
        assert abs(out[:, 0].mean() - p) < 4 * math.sqrt(p * (1 - p) / trials)


class TestAnnotate:
    def test_dispatch_data(self, rng):
        cfg = PrivacyConfig(switch=1, sigma=5.0)
        t, s = random_simplex(rng, 8, 4), random_simplex(rng, 8, 4)
        g = rng.standard_normal((8, 4))
        a = annotate(cfg, t, s, g, 0.1, np.random.default_rng(1))
        b = annotate_data_sensitive(t, s, g, cfg, 0.1, np.random.default_rng(1))
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_dispatch_label(self, rng):
        cfg = PrivacyConfig(switch=0)
        t, s = random_simplex(rng, 8, 4), random_simplex(rng, 8, 4)
        a = annotate(cfg, t, s, rng=np.random.default_rng(1))
        b = annotate_label_sensitive(t, s, cfg, np.random.default_rng(1))
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_invalid_switch(self):
        with pytest.raises(ValueError, match="switch"):
            PrivacyConfig(switch=2)

    def test_replayable(self, rng):
        cfg = PrivacyConfig(switch=0, epsilon_rr=0.3)
        t, s = random_simplex(rng, 50, 5), random_simplex(rng, 50, 5)
        runs = [annotate(cfg, t, s, rng=np.random.default_rng(11)).labels for _ in range(2)]
        assert runs[0].tobytes() == runs[1].tobytes()

    def test_batch_type(self, rng):
        out = annotate(PrivacyConfig(switch=0), *([random_simplex(rng, 3, 3)] * 2), rng=rng)
        assert isinstance(out, AnnotationBatch) and len(out) == 3 and out.mode == "label"


class TestPrivacyConfig:
    @pytest.mark.parametrize("field,value", [("beta", 0.0), ("sigma", -1.0), ("h", 0.0), ("k", 1),
                                             ("epsilon_rr", 0.0), ("delta", 1.0), ("annotation_mode", "x"),
                                             ("rr_domain", "x")])
    def test_ranges(self, field, value):
        with pytest.raises(ValueError, match=f"^{field}"):
            PrivacyConfig(**{field: value})

    def test_k_above_classes(self):
        with pytest.raises(ValueError, match="k=5"):
            PrivacyConfig(k=5).check_classes(3)


class TestAudit:
    def test_zero_budget_uniform(self):
        audit = rr_frequency_audit(5, 0.0, 20_000, np.random.default_rng(1))
        assert audit.p_value > 0.001
        assert audit.counts.sum() == 20_000

    def test_dominant_frequency(self):
        audit = rr_frequency_audit(10, 5.0, 100_000, np.random.default_rng(2))
        p = math.exp(5) / (math.exp(5) + 9)
        assert p == pytest.approx(0.9428, abs=1e-4)
        assert abs(audit.frequencies[0] - p) < 4 * math.sqrt(p * (1 - p) / 100_000)
        assert "chi2" in audit.table()

    @pytest.mark.parametrize("trials", [0, 9_999])
    def test_too_few_trials(self, trials, rng):
        with pytest.raises(ValueError):
            rr_frequency_audit(3, 1.0, trials, rng)
