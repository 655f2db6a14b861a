"""Softmax and Sinkhorn decoders: stochasticity, reference agreement,
gradients, entropy behavior, and the CSV dump."""

import numpy as np
import pytest

from sinkhorn_tsp import autodiff as ad
from sinkhorn_tsp.decoders import (
    SinkhornConfig,
    dump_heatmap,
    sinkhorn_decode,
    softmax_decode,
    transport_entropy,
)
from reference_impls import (
    log_softmax_rows_decimal,
    sinkhorn_fixed_point,
    softmax_rows_decimal,
    transport_entropy_reference,
)


def node(values, dtype=np.float64):
    return ad.constant(np.asarray(values), dtype=dtype)


class TestSinkhornConfig:
    def test_lambda_positive(self):
        with pytest.raises(ValueError, match="lambda > 0"):
            SinkhornConfig(lam=-1.0)

    def test_iterations_at_least_one(self):
        with pytest.raises(ValueError, match="iterations"):
            SinkhornConfig(iterations=0)

    def test_epsilon_range(self):
        with pytest.raises(ValueError, match="epsilon"):
            SinkhornConfig(eps=1e-3)


class TestSoftmaxDecode:
    def test_constant_row_uniform(self):
        out = softmax_decode(node(np.full((2, 4), 3.7)))
        np.testing.assert_allclose(out.p.value, 0.25, rtol=0, atol=1e-15)

    def test_shift_invariance(self, rng):
        m = rng.normal(size=(4, 4))
        shifted = m + rng.normal(size=(4, 1))  # per-row constant
        a = softmax_decode(node(m)).p.value
        b = softmax_decode(node(shifted)).p.value
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_matches_high_precision_reference(self, rng):
        m = rng.normal(size=(5, 5)) * 3
        out = softmax_decode(node(m))
        np.testing.assert_allclose(out.p.value, softmax_rows_decimal(m), atol=1e-12)
        np.testing.assert_allclose(out.p_logits.value, log_softmax_rows_decimal(m), atol=1e-12)

    def test_logits_probability_consistency(self, rng):
        m = rng.normal(size=(6, 6)) * 5
        out = softmax_decode(node(m))
        np.testing.assert_allclose(np.exp(out.p_logits.value), out.p.value, atol=1e-12)
        np.testing.assert_allclose(out.p.value.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out.p.value > 0) and np.all(out.p.value <= 1)


class TestSinkhornDecode:
    def test_zero_input_is_uniform(self):
        out = sinkhorn_decode(node(np.zeros((4, 4))), SinkhornConfig(lam=2.0, iterations=1))
        np.testing.assert_allclose(out.p.value, 0.25, atol=1e-15)
        np.testing.assert_allclose(out.p_logits.value, -np.log(4), atol=1e-14)

    @pytest.mark.parametrize("iterations", [1, 3, 17])
    def test_row_sums_exactly_one(self, rng, iterations):
        """Ending on the u-update makes rows sum to 1 structurally, any I."""
        m = rng.uniform(-10, 10, (7, 7)).astype(np.float32)
        out = sinkhorn_decode(node(m, np.float32), SinkhornConfig(lam=2.0, iterations=iterations))
        assert np.abs(out.p.value.sum(axis=-1) - 1).max() <= 1e-6

    def test_matches_independent_fixed_point(self, rng):
        for lam in (0.5, 2.0, 5.0):
            for _ in range(10):
                m = rng.uniform(-0.5, 0.5, (5, 5))
                mine = sinkhorn_decode(node(m), SinkhornConfig(lam=lam, iterations=100))
                ref = sinkhorn_fixed_point(m, lam, iterations=100)
                assert np.abs(mine.p.value - ref).max() <= 1e-8

    def test_column_sums_improve_with_iterations(self, rng):
        m = rng.uniform(-10, 10, (20, 50, 50))
        one = sinkhorn_decode(node(m), SinkhornConfig(lam=2.0, iterations=1))
        hundred = sinkhorn_decode(node(m), SinkhornConfig(lam=2.0, iterations=100))
        dev1 = np.abs(one.p.value.sum(axis=-2) - 1).max(axis=-1)
        dev100 = np.abs(hundred.p.value.sum(axis=-2) - 1).max(axis=-1)
        assert dev100.max() <= 1e-3
        assert np.all(dev100 <= dev1)

    @pytest.mark.parametrize("iterations", [1, 3, 10])
    def test_gradient_matches_finite_differences(self, rng, iterations):
        store = ad.ParamStore(np.float64)
        store.add("m", rng.uniform(-1, 1, (5, 5)))
        weight = rng.normal(size=(5, 5))

        def fn(s):
            out = sinkhorn_decode(s.node("m"), SinkhornConfig(lam=2.0, iterations=iterations))
            return ad.reduce_sum(ad.mul(out.p_logits, ad.constant(weight)))

        report = ad.finite_difference_check(fn, store, step=1e-6, tolerance=1e-5)
        assert report.passed, report

    def test_logits_probability_consistency(self, rng):
        out = sinkhorn_decode(node(rng.uniform(-2, 2, (6, 6))), SinkhornConfig(lam=2.0, iterations=5))
        np.testing.assert_allclose(np.exp(out.p_logits.value), out.p.value, atol=1e-12)
        assert np.all(out.p.value > 0) and np.all(out.p.value <= 1)

    def test_batched_matches_loop(self, rng):
        m = rng.uniform(-2, 2, (6, 5, 5))
        batched = sinkhorn_decode(node(m), SinkhornConfig(lam=2.0, iterations=4))
        for i in range(6):
            single = sinkhorn_decode(node(m[i]), SinkhornConfig(lam=2.0, iterations=4))
            np.testing.assert_allclose(batched.p.value[i], single.p.value, atol=1e-14)

    def test_floor_counter_records_clamps(self):
        # lam * spread large enough that kernel products underflow the floor
        m = np.array([[8.0, -8.0, 0.0], [-8.0, 8.0, 0.0], [0.0, 0.0, 8.0]])
        out = sinkhorn_decode(node(m), SinkhornConfig(lam=12.0, iterations=2))
        assert out.floored > 0
        assert np.isfinite(out.p_logits.value).all()

    def test_no_warnings_on_tame_input(self, rng):
        out = sinkhorn_decode(node(rng.uniform(-1, 1, (5, 5))), SinkhornConfig(lam=2.0, iterations=5))
        assert out.floored == 0

    def test_log_domain_matches_linear(self, rng):
        m = rng.uniform(-1, 1, (6, 6))
        cfg = SinkhornConfig(lam=2.0, iterations=7)
        lin = sinkhorn_decode(node(m), cfg)
        logd = sinkhorn_decode(node(m), SinkhornConfig(lam=2.0, iterations=7, log_domain=True))
        np.testing.assert_allclose(lin.p_logits.value, logd.p_logits.value, atol=1e-12)

    def test_log_domain_survives_large_lambda(self, rng):
        m = rng.uniform(-10, 10, (6, 6))
        out = sinkhorn_decode(node(m), SinkhornConfig(lam=50.0, iterations=5, log_domain=True))
        assert np.isfinite(out.p_logits.value).all()

    def test_log_domain_gradient(self, rng):
        store = ad.ParamStore(np.float64)
        store.add("m", rng.uniform(-1, 1, (4, 4)))
        weight = rng.normal(size=(4, 4))

        def fn(s):
            out = sinkhorn_decode(s.node("m"), SinkhornConfig(lam=2.0, iterations=3, log_domain=True))
            return ad.reduce_sum(ad.mul(out.p_logits, ad.constant(weight)))

        assert ad.finite_difference_check(fn, store, 1e-6, 1e-5).passed

    def test_mask_diagonal_first_suppresses_self_loops(self, rng):
        m = rng.uniform(-1, 1, (5, 5))
        out = sinkhorn_decode(node(m), SinkhornConfig(lam=2.0, iterations=10), mask_diagonal_first=True)
        diag = np.diag(out.p.value)
        off = out.p.value[~np.eye(5, dtype=bool)]
        assert diag.max() < 1e-12 < off.min()

    def test_column_discipline_beats_softmax_on_adversarial_input(self):
        """One column dominating every row: softmax piles mass there, the
        scaling iteration spreads it back out."""
        n = 8
        m = np.zeros((n, n))
        m[:, 0] = -6.0  # low cost toward city 0 from everywhere
        soft = softmax_decode(node(-m))  # softmax sees logits: negate the cost
        sink = sinkhorn_decode(node(m), SinkhornConfig(lam=1.0, iterations=10))
        soft_dev = np.abs(soft.p.value.sum(axis=0) - 1).max()
        sink_dev = np.abs(sink.p.value.sum(axis=0) - 1).max()
        assert sink_dev < soft_dev


class TestTransportEntropy:
    def test_row_uniform_value(self):
        n = 6
        p = np.full((n, n), 1.0 / n)
        assert abs(transport_entropy(p) - n * np.log(n)) < 1e-10

    def test_one_hot_rows_zero(self):
        p = np.eye(5)
        assert transport_entropy(p) == 0.0

    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            transport_entropy(np.array([[0.5, -0.1], [0.2, 0.4]]))

    def test_matches_reference(self, rng):
        p = rng.random((6, 6))
        assert abs(transport_entropy(p) - transport_entropy_reference(p)) < 1e-10

    def test_more_regularization_spreads_mass(self, rng):
        """Entropy at convergence is non-increasing in lambda."""
        for _ in range(20):
            m = rng.uniform(-1, 1, (6, 6))
            entropies = [
                transport_entropy(
                    sinkhorn_decode(node(m), SinkhornConfig(lam=lam, iterations=200)).p
                )
                for lam in (0.5, 2.0, 5.0)
            ]
            assert entropies[0] >= entropies[1] >= entropies[2]


class TestDumpHeatmap:
    def test_uniform_three_by_three(self, tmp_path):
        path = tmp_path / "h.csv"
        dump_heatmap(np.full((3, 3), 1.0 / 3.0), path)
        lines = path.read_text().splitlines()
        assert lines == ["0.333333333,0.333333333,0.333333333"] * 3

    def test_roundtrip_within_nine_digits(self, tmp_path, rng):
        p = rng.random((5, 5))
        path = tmp_path / "h.csv"
        dump_heatmap(p, path)
        back = np.loadtxt(path, delimiter=",")
        np.testing.assert_allclose(back, p, atol=1e-9)

    def test_masked_diagonal_cells_empty(self, tmp_path, rng):
        path = tmp_path / "h.csv"
        dump_heatmap(rng.random((4, 4)), path, mask_diagonal=True)
        for i, line in enumerate(path.read_text().splitlines()):
            assert line.split(",")[i] == ""
