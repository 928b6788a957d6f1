from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedflex.membership import (
    MembershipEvent,
    apply_arrival,
    apply_departure,
    boosted_coefficient,
    crossing_deadline,
    decide_departure,
    decomposition_residual,
    departure_decision,
    estimate_W,
    fast_reboot_radius,
    simplified_decision,
)
from fedflex.objectives import Federation, random_quadratic_federation
from fedflex.participation import ParticipationModel as PM
from fedflex.trainer import Staircase, TrainingConfig, run_training

from conftest import quad, seeds


def arrival(obj, n=1.0, round_=0, **kw):
    return MembershipEvent(round=round_, kind="arrival", client=obj, n_samples=n, **kw)


class TestEvents:
    def test_validation(self):
        with pytest.raises(ValueError):
            MembershipEvent(round=1, kind="leave")
        with pytest.raises(ValueError):
            MembershipEvent(round=1, kind="arrival", n_samples=0)
        with pytest.raises(ValueError):
            MembershipEvent(round=1, kind="departure", policy="drop")


class TestArrival:
    def test_identical(self):
        fed = Federation([quad([1.0])], [1])
        _, rep = apply_arrival(fed, arrival(quad([1.0])))
        assert rep.gamma_l == 0 and rep.offset == 0 and rep.bound == 0

    def test_one_dimensional(self):
        fed = Federation([quad([0.0])], [1])
        new, rep = apply_arrival(fed, arrival(quad([2.0])))
        np.testing.assert_allclose(new.w_star, [1.0], atol=1e-12)
        assert rep.offset == pytest.approx(1.0, abs=1e-12)
        assert rep.gamma_l == pytest.approx(2.0, abs=1e-12)
        assert rep.bound == pytest.approx(2.0, abs=1e-12)

    def test_tiny_arrival(self):
        fed = Federation([quad([0.0, 0.0])], [1e6])
        _, rep = apply_arrival(fed, arrival(quad([3.0, -4.0]), n=1.0))
        assert rep.offset <= rep.bound < 1e-4


class TestDeparture:
    def test_two_point_exclude(self, two_point_fed):
        new, rep = apply_departure(two_point_fed, 1, "exclude")
        np.testing.assert_allclose(new.w_star, [1.0], atol=1e-12)
        assert rep.offset == pytest.approx(1.0, abs=1e-12)
        assert rep.gamma_l_tilde == pytest.approx(2.0, abs=1e-12)
        assert rep.bound == pytest.approx(2.0, abs=1e-12)

    def test_identical_exclude(self):
        fed = Federation([quad([1.0, 1.0])] * 3, [1, 2, 3])
        _, rep = apply_departure(fed, 0, "exclude")
        assert rep.offset == pytest.approx(0.0, abs=1e-12)

    def test_include_keeps_objective(self, two_point_fed):
        new, rep = apply_departure(two_point_fed, 0, "include")
        assert new is two_point_fed and rep.offset == 0.0

    def test_last_client(self):
        with pytest.raises(ValueError):
            apply_departure(Federation([quad([0.0])], [1]), 0)

    def test_include_silences_client(self, two_point_fed):
        ev = MembershipEvent(round=2, kind="departure", client=1, policy="include")
        recs = run_training(two_point_fed, TrainingConfig(E=2, T=6, scheme="C"), [PM.always_full(2)] * 2, [ev])
        assert [int(r.participation.s[1]) for r in recs] == [2, 2, 0, 0, 0, 0]
        assert all(r.n_clients == 2 for r in recs)

    def test_exclude_shrinks_federation(self, two_point_fed):
        ev = MembershipEvent(round=2, kind="departure", client=1, policy="exclude")
        cfg = TrainingConfig(E=1, T=40, scheme="C", lr_schedule=Staircase(1.0))
        recs = run_training(two_point_fed, cfg, [PM.always_full(1)] * 2, [ev], w0=np.zeros(1))
        assert recs[-1].n_clients == 1
        # the excluded run converges to the remaining client's optimum
        assert recs[-1].dist_sq < 1e-3


class TestShiftBoundProperty:
    @given(seeds, st.integers(1, 6), st.integers(1, 6), st.floats(0.01, 100))
    def test_arrival_and_departure(self, seed, d, n, n_new):
        rng = np.random.default_rng(seed)
        fed = random_quadratic_federation(d, n, rng, spread=2.0)
        obj = random_quadratic_federation(d, 1, rng, spread=3.0).clients[0]
        new, rep = apply_arrival(fed, arrival(obj, n_new))
        assert rep.holds
        _, rep2 = apply_departure(new, int(rng.integers(new.size)), "exclude")
        assert rep2.holds


class TestFastReboot:
    def test_one_dimensional_radius(self):
        new = Federation([quad([0.0]), quad([2.0])], [1, 1])
        for W in (0.5, 1.0, 7.0):
            assert fast_reboot_radius(new, 1, W) == pytest.approx(1 / (3 * W), rel=1e-12)

    def test_identical_arrival_radius(self):
        new = Federation([quad([1.0]), quad([1.0])], [1, 1])
        assert fast_reboot_radius(new, 1, 1.0) == 0.0

    def test_radius_vanishes_with_W(self):
        new = Federation([quad([0.0]), quad([2.0])], [1, 1])
        assert fast_reboot_radius(new, 1, 1e12) < 1e-12

    @given(seeds, st.integers(1, 5), st.integers(1, 5))
    def test_decomposition(self, seed, d, n):
        rng = np.random.default_rng(seed)
        old = random_quadratic_federation(d, n, rng)
        new = old.with_client(random_quadratic_federation(d, 1, rng).clients[0], float(rng.uniform(1, 100)))
        assert decomposition_residual(old, new, rng.normal(size=d)) <= 1e-10

    def test_W_bounds_gradients_on_ball(self):
        rng = np.random.default_rng(3)
        new = random_quadratic_federation(3, 4, rng, spread=2.0)
        old = new.without_client(3)
        W = estimate_W(new, 3, 1.0)
        for _ in range(200):
            u = rng.normal(size=3)
            w = old.w_star + u / np.linalg.norm(u) * rng.random()
            assert np.linalg.norm(new.clients[3].gradient(w)) <= W
            assert np.linalg.norm(new.gradient(w)) <= W
            assert np.linalg.norm(new.clients[3].hessian(w), 2) <= W

    def test_boost(self):
        assert boosted_coefficient(0.1, 2.0, 5, 5) == pytest.approx(0.3)
        assert boosted_coefficient(0.1, 0.0, 9, 5) == 0.1
        assert boosted_coefficient(1.0, 2.0, 14, 5) == pytest.approx(1.02)
        with pytest.raises(ValueError):
            boosted_coefficient(0.1, 2.0, 4, 5)


class TestDepartureDecision:
    def test_worked_exclude(self):
        # f0 decreases on [5, 100]; min f0 = 105/101 >= f1 = 2/96
        assert Fraction(105, 101) >= Fraction(2, 96)
        assert departure_decision(1, 10, 1, 2, 1, 1, 5, 100) == "exclude"

    def test_worked_include(self):
        # min f0 = f0(6) = 11/7 < f1 = 200/2
        assert departure_decision(1, 10, 1, 200, 1, 1, 5, 6) == "include"

    def test_worked_gamma_free(self):
        V_tilde = 10 / 6
        assert departure_decision(0, 10, 1, V_tilde, 1, 1, 5, 100) == "exclude"
        assert simplified_decision(0, 10, 1, 0.0, 1, 5, 100) == "exclude"

    @given(st.floats(0, 10), st.floats(0.1, 100), st.floats(1, 50), st.floats(0.1, 1e3), st.integers(1, 5),
           st.integers(0, 50), st.integers(1, 200))
    def test_endpoint_minimum_matches_scan(self, D, V, gamma, V_tilde, E, tau0, span):
        from fedflex.membership import departure_curves

        T = tau0 + span
        f0, f1 = departure_curves(D, V, gamma, V_tilde, gamma, E, tau0, T)
        want = "exclude" if f0.min() >= f1 else "include"
        assert departure_decision(D, V, gamma, V_tilde, gamma, E, tau0, T) == want

    def test_deadline_before_departure(self):
        with pytest.raises(ValueError):
            departure_decision(1, 10, 1, 2, 1, 1, 5, 5)

    def test_crossing_deadline_is_first_exclude(self):
        T = crossing_deadline(1, 10, 1, 200, 1, 1, 5)
        assert departure_decision(1, 10, 1, 200, 1, 1, 5, T) == "exclude"
        assert departure_decision(1, 10, 1, 200, 1, 1, 5, T - 1) == "include"

    def test_decide_from_constants(self):
        fed = random_quadratic_federation(2, 4, np.random.default_rng(4), spread=1.0)
        models = [PM.always_full(2)] * 4
        # the restarted bound starts from gamma_tilde^2 times the kept bound, so only
        # very long deadlines favour excluding
        short = decide_departure(fed, models, "C", 3, 10, 10_000, np.zeros(2))
        long = decide_departure(fed, models, "C", 3, 10, 10**9, np.zeros(2))
        assert short.decision == "include" and long.decision == "exclude"
        assert short.V_tilde >= short.gamma_tilde**2 * short.V / (10 * 2 + short.gamma)
