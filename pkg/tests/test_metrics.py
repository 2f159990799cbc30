"""Divergences and loyalty metrics against brute-force oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loyalbench.errors import InvalidInput, UnstableTiming
from loyalbench.metrics import (
    LoyaltyReport,
    PredictionSet,
    accuracy,
    js_divergence,
    kl_divergence,
    label_loyalty,
    loyalty_report,
    measure_speedup,
    per_example_lp,
    probability_loyalty,
)
from loyalbench.model import ClassifierModel


def oracle_kl(p, q, base=2.0):
    """Plain-Python summation, no numpy, no smoothing tricks."""
    total = 0.0
    for pi, qi in zip(p, q):
        if pi > 0:
            total += pi * math.log(pi / qi, base)
    return total


def oracle_js(p, q, base=2.0):
    m = [0.5 * (pi + qi) for pi, qi in zip(p, q)]
    return 0.5 * oracle_kl(p, m, base) + 0.5 * oracle_kl(q, m, base)


def random_dist(rng, dim):
    raw = rng.random(dim) + 1e-6
    return raw / raw.sum()


def make_set(probs, ids=None, **kw):
    probs = np.asarray(probs, dtype=np.float64)
    ids = ids or [f"e{i}" for i in range(probs.shape[0])]
    return PredictionSet.from_probs(ids, probs, **kw)


class TestKlDivergence:
    def test_self_is_zero(self):
        assert kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == pytest.approx(0.0, abs=1e-15)

    def test_frozen_half_vs_quarter(self):
        got = kl_divergence([0.5, 0.5], [0.25, 0.75])
        assert got == pytest.approx(0.2075187496394219, abs=1e-14)

    def test_asymmetric(self):
        a = kl_divergence([0.5, 0.5], [0.25, 0.75])
        b = kl_divergence([0.25, 0.75], [0.5, 0.5])
        assert abs(a - b) > 1e-3

    def test_matches_oracle_many_dims(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            dim = int(rng.integers(2, 11))
            p, q = random_dist(rng, dim), random_dist(rng, dim)
            assert kl_divergence(p, q) == pytest.approx(oracle_kl(p, q), abs=1e-10)

    def test_zero_p_terms_contribute_nothing(self):
        assert kl_divergence([0.0, 1.0], [0.5, 0.5]) == pytest.approx(1.0)

    def test_smoothing_keeps_result_finite(self):
        v = kl_divergence([0.5, 0.5], [1.0, 0.0])
        assert math.isfinite(v)
        assert v > 10  # log2 of the 1e-12 smoothing floor is large

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInput):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_natural_log_base(self):
        p, q = [0.5, 0.5], [0.25, 0.75]
        assert kl_divergence(p, q, base=math.e) == pytest.approx(
            kl_divergence(p, q) * math.log(2.0), rel=1e-12
        )


class TestJsDivergence:
    def test_self_is_zero(self):
        assert js_divergence([0.1, 0.9], [0.1, 0.9]) == 0.0

    def test_disjoint_one_hots_hit_one(self):
        assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-15)

    def test_symmetric_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            dim = int(rng.integers(2, 11))
            p, q = random_dist(rng, dim), random_dist(rng, dim)
            assert js_divergence(p, q) == pytest.approx(js_divergence(q, p), abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            dim = int(rng.integers(2, 11))
            p, q = random_dist(rng, dim), random_dist(rng, dim)
            assert js_divergence(p, q) == pytest.approx(oracle_js(p, q), abs=1e-10)

    def test_bounded_by_one_in_base2(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p, q = random_dist(rng, 4), random_dist(rng, 4)
            assert 0.0 <= js_divergence(p, q) <= 1.0

    def test_finite_on_disjoint_support_without_smoothing(self):
        # The mixture covers both supports, so no smoothing path triggers.
        assert math.isfinite(js_divergence([1.0, 0.0, 0.0], [0.0, 0.5, 0.5]))


class TestLabelLoyalty:
    def test_identical_is_exactly_100(self):
        s = make_set(np.eye(3)[[0, 1, 2, 1]])
        assert label_loyalty(s, s) == 100.0

    def test_three_of_four(self):
        t = make_set(np.eye(3)[[0, 1, 1, 2]])
        s = make_set(np.eye(3)[[0, 1, 2, 2]])
        assert label_loyalty(t, s) == 75.0

    def test_total_disagreement(self):
        t = make_set(np.eye(2)[[0, 0, 0]])
        s = make_set(np.eye(2)[[1, 1, 1]])
        assert label_loyalty(t, s) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        t = make_set(rng.dirichlet(np.ones(3), size=50))
        s = make_set(rng.dirichlet(np.ones(3), size=50))
        assert label_loyalty(t, s) == label_loyalty(s, t)

    def test_id_mismatch_names_first_offender(self):
        t = make_set(np.eye(2)[[0, 1]], ids=["a", "b"])
        s = make_set(np.eye(2)[[0, 1]], ids=["a", "c"])
        with pytest.raises(InvalidInput, match="'b'"):
            label_loyalty(t, s)

    def test_size_mismatch(self):
        t = make_set(np.eye(2)[[0, 1]])
        s = make_set(np.eye(2)[[0]])
        with pytest.raises(InvalidInput):
            label_loyalty(t, s)


class TestProbabilityLoyalty:
    def test_identical_is_exactly_100(self):
        rng = np.random.default_rng(5)
        s = make_set(rng.dirichlet(np.ones(4), size=30))
        assert probability_loyalty(s, s) == 100.0

    def test_disjoint_one_hots_is_zero(self):
        t = make_set(np.eye(2)[[0, 0]])
        s = make_set(np.eye(2)[[1, 1]])
        assert probability_loyalty(t, s) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_pair_is_100(self):
        t = make_set([[0.5, 0.5]])
        s = make_set([[0.5, 0.5]])
        assert probability_loyalty(t, s) == 100.0

    def test_symmetric(self):
        rng = np.random.default_rng(6)
        t = make_set(rng.dirichlet(np.ones(3), size=100))
        s = make_set(rng.dirichlet(np.ones(3), size=100))
        assert probability_loyalty(t, s) == pytest.approx(
            probability_loyalty(s, t), abs=1e-12
        )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_per_example_lp_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        t = make_set(rng.dirichlet(np.full(3, 0.3), size=20))
        s = make_set(rng.dirichlet(np.full(3, 0.3), size=20))
        lp = per_example_lp(t, s)
        assert np.all(lp >= 0.0)
        assert np.all(lp <= 1.0)

    def test_full_loyalty_implies_label_loyalty(self):
        rng = np.random.default_rng(7)
        probs = rng.dirichlet(np.ones(3), size=40)
        t, s = make_set(probs), make_set(probs.copy())
        assert probability_loyalty(t, s) == 100.0
        assert label_loyalty(t, s) == 100.0

    def test_mean_matches_per_example_oracle(self):
        rng = np.random.default_rng(8)
        tp = rng.dirichlet(np.ones(3), size=25)
        sp = rng.dirichlet(np.ones(3), size=25)
        t, s = make_set(tp), make_set(sp)
        expected = np.mean([1.0 - math.sqrt(oracle_js(tp[i], sp[i])) for i in range(25)])
        assert probability_loyalty(t, s) == pytest.approx(100 * expected, abs=1e-10)

    def test_natural_log_mode_stays_in_range(self):
        t = make_set(np.eye(2)[[0, 0]])
        s = make_set(np.eye(2)[[1, 1]])
        v = probability_loyalty(t, s, base=math.e)
        assert 0.0 <= v <= 100.0


class TestAccuracy:
    def test_all_correct(self):
        s = make_set(np.eye(3)[[0, 1, 2]])
        assert accuracy(s, [0, 1, 2]) == 100.0

    def test_all_wrong(self):
        s = make_set(np.eye(2)[[0, 1]])
        assert accuracy(s, [1, 0]) == 0.0

    def test_definitional_identity_with_label_loyalty(self):
        rng = np.random.default_rng(9)
        t = make_set(rng.dirichlet(np.ones(3), size=60))
        s = make_set(rng.dirichlet(np.ones(3), size=60))
        assert label_loyalty(t, s) == accuracy(s, t.labels)

    def test_length_mismatch(self):
        s = make_set(np.eye(2)[[0, 1]])
        with pytest.raises(InvalidInput):
            accuracy(s, [0])


class TestPredictionSet:
    def test_labels_must_match_argmax(self):
        with pytest.raises(InvalidInput):
            PredictionSet(["a"], np.array([0]), np.array([[0.1, 0.9]]))

    def test_rows_must_normalize(self):
        with pytest.raises(InvalidInput):
            PredictionSet.from_probs(["a"], np.array([[0.5, 0.2]]))

    def test_misaligned_lengths(self):
        with pytest.raises(InvalidInput):
            PredictionSet.from_probs(["a", "b"], np.array([[1.0, 0.0]]))

    def test_jsonl_round_trip(self, tmp_path):
        rng = np.random.default_rng(10)
        s = make_set(rng.dirichlet(np.ones(3), size=12), split="test")
        path = str(tmp_path / "preds.jsonl")
        s.to_jsonl(path)
        back = PredictionSet.from_jsonl(path, split="test")
        assert back.ids == s.ids
        assert np.array_equal(back.labels, s.labels)
        assert np.allclose(back.probs, s.probs, atol=1e-15)

    def test_inputs_never_mutated(self):
        probs = np.array([[0.4, 0.6], [0.9, 0.1]])
        t = make_set(probs)
        s = make_set(probs[::-1].copy())
        before = t.probs.copy()
        probability_loyalty(t, s)
        label_loyalty(t, s)
        assert np.array_equal(t.probs, before)


class TestLoyaltyReport:
    def test_fields_populated(self):
        rng = np.random.default_rng(11)
        tp = rng.dirichlet(np.ones(3), size=40)
        t, s = make_set(tp), make_set(rng.dirichlet(np.ones(3), size=40))
        gold = rng.integers(0, 3, size=40)
        rep = loyalty_report(t, s, gold)
        assert rep.n_examples == 40
        assert 0.0 <= rep.lp_min <= rep.lp_median <= rep.lp_max <= 1.0
        assert rep.accuracy == accuracy(s, gold)
        assert rep.log_base == 2.0

    def test_out_of_range_rejected(self):
        with pytest.raises(InvalidInput):
            LoyaltyReport(
                label_loyalty=101.0, probability_loyalty=50.0, accuracy=50.0,
                n_examples=1, lp_min=0, lp_median=0, lp_max=0,
            )

    def test_as_dict_round_trips_values(self):
        rep = LoyaltyReport(90.0, 85.5, 70.0, 10, 0.2, 0.8, 1.0)
        d = rep.as_dict()
        assert d["probability_loyalty"] == 85.5
        assert d["n_examples"] == 10


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(12)
    ids = rng.integers(0, 50, size=(16, 24))
    return ids, np.ones((16, 24))


class TestMeasureSpeedup:
    def test_self_ratio_near_one(self, batch):
        m = ClassifierModel(vocab_size=50, num_classes=3, hidden=32, num_heads=4,
                            num_layers=2, ffn=64, max_len=32, seed=0)
        result = measure_speedup(m, m, batch)
        assert 0.9 < result.ratio < 1.1
        assert result.runs >= 30

    def test_records_spread_and_medians(self, batch):
        m = ClassifierModel(vocab_size=50, num_classes=3, hidden=32, num_heads=4,
                            num_layers=1, ffn=64, max_len=32, seed=0)
        result = measure_speedup(m, m, batch)
        assert result.reference_median > 0
        assert result.candidate_median > 0
        assert result.reference_spread >= 0
        d = result.as_dict()
        assert d["runs"] == result.runs

    def test_too_few_runs_rejected(self, batch):
        m = ClassifierModel(vocab_size=50, num_classes=3, num_layers=1, seed=0)
        with pytest.raises(InvalidInput):
            measure_speedup(m, m, batch, runs=10)

    def test_unstable_timing_flagged(self, batch, monkeypatch):
        m = ClassifierModel(vocab_size=50, num_classes=3, hidden=32, num_heads=4,
                            num_layers=1, ffn=64, max_len=32, seed=0)
        # Scripted clock: every other candidate pass appears 9x slower.
        import itertools

        calls = itertools.count()
        durations = itertools.cycle([1.0, 1.0, 1.0, 9.0])
        state = {"now": 0.0}

        def fake_clock():
            if next(calls) % 2 == 0:
                return state["now"]
            state["now"] += next(durations)
            return state["now"]

        import loyalbench.metrics as metrics_mod

        monkeypatch.setattr(metrics_mod.time, "perf_counter", fake_clock)
        with pytest.warns(UnstableTiming):
            result = measure_speedup(m, m, batch)
        assert result.warnings
