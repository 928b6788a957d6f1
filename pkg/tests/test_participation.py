import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedflex.participation import (
    TRACE_STATS,
    ParticipationModel as PM,
    RoundParticipation,
    epochs_from_fraction,
    generate_trace,
    is_homogeneous,
    pmf,
    sample_epochs,
    sample_round,
)

from conftest import seeds


class TestPmf:
    def test_bernoulli(self):
        np.testing.assert_allclose(pmf(PM.bernoulli(0.5, 2)), [0.25, 0.5, 0.25], atol=1e-15)

    def test_always_full(self):
        np.testing.assert_array_equal(pmf(PM.always_full(3)), [0, 0, 0, 1])

    def test_categorical_passthrough(self):
        probs = [0.1, 0.2, 0.3, 0.4]
        np.testing.assert_array_equal(pmf(PM.categorical(probs, 3)), probs)

    def test_trace_histogram(self):
        m = PM.trace([1.0, 0.5, 0.5, 0.0], 2)
        np.testing.assert_array_equal(pmf(m), [0.25, 0.5, 0.25])

    def test_categorical_must_sum_to_one(self):
        with pytest.raises(ValueError):
            PM.categorical([0.5, 0.4], 1)

    def test_trace_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            PM.trace([0.5, 1.2], 4)

    def test_roundtrip_dict(self):
        for m in (PM.bernoulli(0.3, 4), PM.always_full(2), PM.categorical([0.5, 0.5], 1), PM.trace([0.2, 0.9], 5)):
            assert PM.from_dict(m.to_dict()) == m


class TestEpochsFromFraction:
    @pytest.mark.parametrize("f,E,want", [(1.0, 5, 5), (0.0, 5, 0), (0.563, 5, 3), (0.5, 5, 3), (0.09, 5, 0)])
    def test_values(self, f, E, want):
        assert epochs_from_fraction(f, E) == want

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            epochs_from_fraction(-0.1, 5)

    @given(st.floats(0, 1), st.integers(1, 50))
    def test_in_range(self, f, E):
        assert 0 <= epochs_from_fraction(f, E) <= E


class TestHomogeneity:
    def test_cases(self):
        assert is_homogeneous([PM.always_full(3)] * 4)
        assert is_homogeneous([PM.bernoulli(0.5, 3), PM.bernoulli(0.5, 3)])
        assert not is_homogeneous([PM.bernoulli(1.0, 3)] + [PM.bernoulli(0.5, 3)] * 2)

    def test_same_pmf_different_kind(self):
        assert is_homogeneous([PM.bernoulli(1.0, 3), PM.always_full(3)])


class TestSampling:
    def test_always_full(self):
        part = sample_round([PM.always_full(5)] * 3, 0, seed=0)
        assert part.s.tolist() == [5, 5, 5] and part.K == 3 and not part.inactive_any

    def test_degenerate_bernoulli(self):
        assert sample_round([PM.bernoulli(1.0, 4)], 7, seed=3).s.tolist() == [4]

    def test_always_inactive(self):
        part = sample_round([PM.inactive(4)], 0, seed=0)
        assert part.s.tolist() == [0] and part.inactive_any

    def test_deterministic_per_round_and_client(self):
        models = [PM.bernoulli(0.4, 6)] * 4
        a = sample_round(models, 11, seed=5).s
        b = sample_round(models, 11, seed=5).s
        np.testing.assert_array_equal(a, b)
        # a client's draw does not depend on how many clients follow it
        c = sample_round(models[:2], 11, seed=5).s
        np.testing.assert_array_equal(a[:2], c)

    def test_round_participation_validation(self):
        with pytest.raises(ValueError):
            RoundParticipation(np.array([3, 6]), 5)

    @given(seeds, st.integers(1, 6), st.floats(0.05, 0.95))
    def test_samples_in_range(self, seed, E, q):
        s = sample_epochs([PM.bernoulli(q, E)] * 3, 200, np.random.default_rng(seed))
        assert s.min() >= 0 and s.max() <= E

    @pytest.mark.parametrize(
        "model",
        [PM.bernoulli(0.3, 5), PM.categorical([0.1, 0.0, 0.6, 0.3], 3), PM.trace([0.2, 0.4, 0.4, 1.0, 0.0], 4)],
    )
    def test_empirical_pmf_total_variation(self, model):
        rng = np.random.default_rng(0)
        s = sample_epochs([model], 10**5, rng)[:, 0]
        emp = np.bincount(s, minlength=model.E + 1) / s.size
        assert 0.5 * np.abs(emp - pmf(model)).sum() <= 0.01

    def test_sample_round_matches_pmf(self):
        model = PM.bernoulli(0.35, 4)
        s = np.array([sample_round([model], t, seed=1).s[0] for t in range(20_000)])
        emp = np.bincount(s, minlength=5) / s.size
        assert 0.5 * np.abs(emp - pmf(model)).sum() <= 0.01


class TestTraces:
    @pytest.mark.parametrize("name", sorted(TRACE_STATS))
    def test_statistics(self, name):
        x = generate_trace(name, 10_000, 10, np.random.default_rng(0))
        mean, sd = TRACE_STATS[name]
        assert abs(100 * x.mean() - mean) <= 1.0
        assert abs(100 * x.std() - sd) <= 1.0
        assert x.min() >= 0 and x.max() <= 1

    def test_t0_is_all_ones(self):
        np.testing.assert_array_equal(generate_trace("T0", 50, 5, np.random.default_rng(0)), 1.0)

    @pytest.mark.parametrize("name", ["T30", "T50", "T70", "T90"])
    def test_no_inactive(self, name):
        x = generate_trace(name, 10_000, 10, np.random.default_rng(1))
        assert min(epochs_from_fraction(f, 10) for f in x) >= 1
