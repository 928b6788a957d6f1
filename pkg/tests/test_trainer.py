import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedflex.analysis import theorem_constants
from fedflex.objectives import Federation, random_quadratic_federation
from fedflex.participation import ParticipationModel as PM
from fedflex.trainer import (
    Staircase,
    TheoremSchedule,
    TrainingConfig,
    learning_rate,
    local_paths,
    local_sgd,
    run_round,
    run_training,
    simulate_batch,
    wbar_sequence,
)

from conftest import quad, seeds


class TestLocalSgd:
    def test_no_steps(self):
        np.testing.assert_array_equal(local_sgd(quad([0.0]), np.array([2.0]), 0, 0.1, None), [2.0])

    def test_one_step(self):
        np.testing.assert_allclose(local_sgd(quad([0.0]), np.array([1.0]), 1, 0.1, None), [0.9], rtol=1e-15)

    def test_geometric_contraction(self):
        out = local_sgd(quad([0.0]), np.array([3.0]), 5, 0.2, np.random.default_rng(0))
        np.testing.assert_allclose(out, [3.0 * 0.8**5], rtol=1e-14)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            local_sgd(quad([0.0]), np.zeros(1), 1, 0.0, None)


class TestLearningRate:
    def test_staircase(self):
        assert learning_rate(Staircase(1.0), 4) == 0.25
        assert learning_rate(Staircase(1.0), 0) == 1.0

    def test_shift_restarts_clock(self):
        assert learning_rate(Staircase(1.0), 12, shift_round=10) == 0.5

    @pytest.mark.parametrize("scheme,E", [("A", 3), ("B", 5), ("C", 2)])
    def test_theorem_schedule_preconditions(self, scheme, E):
        fed = random_quadratic_federation(3, 4, np.random.default_rng(1))
        c = theorem_constants(fed, scheme, [PM.bernoulli(0.7, E)] * 4, w0=np.ones(3))
        eta0 = learning_rate(c.schedule(), 0)
        assert eta0 <= 1 / (2 * (1 + c.theta) * c.L) * (1 + 1e-12)
        assert eta0 <= 4 / (c.mu * E * c.theta) * (1 + 1e-12)

    def test_theorem_formula(self):
        sched = TheoremSchedule(mu=2.0, E=4, gamma=10.0, ews=4.0)
        assert learning_rate(sched, 3) == pytest.approx(16 * 4 / (2 * 4) / (3 * 4 + 10))


class TestRunRound:
    def test_deterministic_fedavg(self, two_point_fed):
        cfg = TrainingConfig(E=1, T=1, scheme="B")
        w, rec = run_round(np.array([2.0]), two_point_fed, [PM.always_full(1)] * 2, cfg, 0, 0.1)
        np.testing.assert_allclose(w, [1.8], rtol=1e-15)
        assert rec.round == 1 and not rec.discarded

    def test_all_inactive_scheme_c(self, two_point_fed):
        cfg = TrainingConfig(E=3, T=1, scheme="C")
        w, rec = run_round(np.array([2.0]), two_point_fed, [PM.inactive(3)] * 2, cfg, 0, 0.1)
        np.testing.assert_array_equal(w, [2.0])

    def test_single_client_matches_local_sgd(self):
        obj = quad([1.0, -1.0], sigma=0.3)
        fed = Federation([obj], [1])
        cfg = TrainingConfig(E=4, T=1, scheme="C", seed=9)
        w, _ = run_round(np.zeros(2), fed, [PM.always_full(4)], cfg, 0, 0.1)
        from fedflex.participation import client_rng
        from fedflex.trainer import GRAD_STREAM

        ref = local_sgd(obj, np.zeros(2), 4, 0.1, client_rng(9, 0, 0, GRAD_STREAM))
        np.testing.assert_array_equal(w, ref)


class TestRunTraining:
    def test_empty(self, two_point_fed):
        assert run_training(two_point_fed, TrainingConfig(E=2, T=0), [PM.always_full(2)] * 2) == []

    def test_scheme_a_never_complete(self, two_point_fed):
        models = [PM.categorical([0.5, 0.5, 0.0], 2)] * 2
        recs = run_training(two_point_fed, TrainingConfig(E=2, T=15, scheme="A"), models, w0=np.array([3.0]))
        assert all(r.discarded for r in recs)
        assert all(r.dist_sq == 9.0 for r in recs)

    def test_dist_eventually_non_increasing(self):
        fed = random_quadratic_federation(4, 5, np.random.default_rng(2), spread=2.0)
        recs = run_training(fed, TrainingConfig(E=3, T=200, scheme="B", lr_schedule=Staircase(0.1)),
                            [PM.always_full(3)] * 5, w0=np.full(4, 5.0))
        d = np.array([r.dist_sq for r in recs])
        assert np.all(np.diff(d[20:]) <= 1e-15)

    def test_reproducible(self):
        fed = random_quadratic_federation(3, 4, np.random.default_rng(3), sigma=1.0)
        cfg = TrainingConfig(E=3, T=20, scheme="C", seed=4)
        models = [PM.bernoulli(0.5, 3)] * 4
        a = [r.row() for r in run_training(fed, cfg, models)]
        b = [r.row() for r in run_training(fed, cfg, models)]
        assert a == b

    def test_rows_are_consistent(self):
        fed = random_quadratic_federation(2, 3, np.random.default_rng(5))
        recs = run_training(fed, TrainingConfig(E=2, T=5, scheme="A"), [PM.bernoulli(0.5, 2)] * 3)
        for r in recs:
            row = r.row()
            assert row["K"] == int(np.sum(r.participation.s == 2))
            assert row["dist_sq"] >= 0 and row["eta"] > 0


class TestAveragedSequence:
    def test_requires_trace(self):
        with pytest.raises(ValueError):
            wbar_sequence(None)

    def test_single_epoch(self, two_point_fed):
        cfg = TrainingConfig(E=1, T=1, scheme="C", record_wbar=True)
        w, rec = run_round(np.array([0.7]), two_point_fed, [PM.always_full(1)] * 2, cfg, 0, 0.1)
        np.testing.assert_allclose(wbar_sequence(rec.trace)[-1], w, atol=1e-15)

    def test_single_client_path(self):
        fed = Federation([quad([2.0, 1.0])], [1])
        cfg = TrainingConfig(E=4, T=1, scheme="C", record_wbar=True)
        _, rec = run_round(np.zeros(2), fed, [PM.always_full(4)], cfg, 0, 0.2)
        np.testing.assert_allclose(wbar_sequence(rec.trace), local_paths(rec.trace)[0], atol=1e-15)

    @given(seeds, st.sampled_from("ABC"), st.integers(1, 10), st.integers(1, 8), st.integers(1, 20))
    def test_endpoint_equals_aggregate(self, seed, scheme, N, E, d):
        rng = np.random.default_rng(seed)
        fed = random_quadratic_federation(d, N, rng, sigma=0.5)
        models = [PM.bernoulli(float(rng.uniform(0.3, 1.0)), E) for _ in range(N)]
        cfg = TrainingConfig(E=E, T=1, scheme=scheme, seed=seed % 1000, record_wbar=True)
        w0 = rng.normal(size=d)
        w, rec = run_round(w0, fed, models, cfg, 0, 0.05)
        if rec.discarded:
            return
        wbar = wbar_sequence(rec.trace)[-1]
        assert np.linalg.norm(wbar - w) <= 1e-10 * (1 + np.linalg.norm(w))


class TestBatchSimulation:
    def test_matches_deterministic_run(self):
        fed = random_quadratic_federation(3, 3, np.random.default_rng(6))
        models = [PM.always_full(2)] * 3
        sched = Staircase(0.1)
        w0 = np.ones(3)
        batch = simulate_batch(fed, models, "B", 10, sched, w0, replicas=3, seed=0)
        recs = run_training(fed, TrainingConfig(E=2, T=10, scheme="B", lr_schedule=sched), models, w0=w0)
        np.testing.assert_allclose(batch[1:, 0], [r.dist_sq for r in recs], rtol=1e-10)
        np.testing.assert_allclose(batch[:, 0], batch[:, 2], rtol=0)
