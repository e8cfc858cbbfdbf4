"""Tests for congestion scoring, the two sub-solvers, and the router."""

import math

import pytest

from flexsan.model import (
    ArchKind,
    CompressionInsufficientError,
    CostModel,
    QueueUnstableError,
    SatelliteConfig,
    SlotSolution,
    UserDemand,
    aggregate_load,
    check_feasibility,
    per_user_cost,
)
from flexsan.orchestrator import (
    BRANCH_CEO,
    BRANCH_CEO_THEN_SMO,
    BRANCH_SMO,
    TagoParams,
    ceo,
    composite_score,
    congestion_score,
    cost_gradient,
    delay_margin,
    gradient_compress,
    population_mean_demand,
    select_architecture,
    smo,
    tago,
)

CONFIG = SatelliteConfig()
COSTS = CostModel()
PARAMS = TagoParams()

GNB = ArchKind.ONBOARD_GNB
DU = ArchKind.ONBOARD_GNB_DU


def make_user(uid, r_min=1e6, t_max=0.2, snr=3.0, dist=600e3):
    return UserDemand(id=uid, r_min=r_min, t_max=t_max, snr_linear=snr, distance_m=dist)


class TestCongestionScore:
    def test_empty(self):
        assert congestion_score([], 0, CONFIG, COSTS, PARAMS) == 0.0

    def test_bandwidth_driven(self):
        # 16 users, each with exact minimum bandwidth 0.5 MHz and DU cost 200
        users = [make_user(i) for i in range(16)]
        sigma = congestion_score(users, 0, CONFIG, COSTS, PARAMS)
        assert sigma == pytest.approx(max(16 * 200 / 32_000, 8e6 / 20e6))
        assert sigma == pytest.approx(0.4)

    def test_single_user_filling_the_band(self):
        # exact minimum bandwidth equals the full band: 40 Mb/s over 2 b/s/Hz
        user = make_user(0, r_min=40e6)
        sigma = congestion_score([user], 0, CONFIG, COSTS, PARAMS)
        assert sigma == pytest.approx(1.0)
        # paper-calibrated compute term stays small: C_1(20 MHz) = 6440
        assert 6440 / 32_000 < 1.0

    def test_unsatisfiable_user_forces_congestion(self):
        user = make_user(0, r_min=45e6)  # needs 22.5 MHz > the 20 MHz band
        sigma = congestion_score([user], 0, CONFIG, COSTS, PARAMS)
        assert sigma >= 1.0


class TestDelayMargin:
    def test_hand_evaluated(self):
        user = make_user(0, r_min=1e6, t_max=0.2, snr=1.0)  # w_min exactly 1 MHz
        margin = delay_margin(user, 0, DU, 0.5, CONFIG, PARAMS)
        expected = 0.2 - (600e3 / 299_792_458.0 + 8.192e-3 + 0.09) - 1.0 / 16_000.0
        assert margin == pytest.approx(expected, rel=1e-12)
        assert margin == pytest.approx(0.09974, abs=5e-6)

    def test_boundary_equals_minus_idle_queue(self):
        user = make_user(0, r_min=1e6, snr=1.0, dist=1.0)
        t_fixed = 1.0 / 299_792_458.0 + 8.192e-3
        user = make_user(0, r_min=1e6, snr=1.0, dist=1.0, t_max=t_fixed)
        margin = delay_margin(user, 0, GNB, 0.0, CONFIG, PARAMS)
        assert margin == pytest.approx(-1.0 / 32_000.0)

    def test_f1_exceeds_budget(self):
        user = make_user(0, t_max=0.05)
        assert delay_margin(user, 0, DU, 0.3, CONFIG, PARAMS) < 0

    def test_unstable_estimate(self):
        user = make_user(0)
        with pytest.raises(QueueUnstableError):
            delay_margin(user, 0, DU, 1.0, CONFIG, PARAMS)


class TestSelectArchitecture:
    def test_margin_and_cost_clear(self):
        arch = select_architecture({GNB: 0.18, DU: 0.09974}, {GNB: 330.0, DU: 264.0}, PARAMS)
        assert arch is DU

    def test_margin_below_threshold(self):
        arch = select_architecture({GNB: 0.1, DU: 0.004}, {GNB: 330.0, DU: 264.0}, PARAMS)
        assert arch is GNB

    def test_degenerate_equal_costs(self):
        arch = select_architecture({GNB: 0.1, DU: 0.09}, {GNB: 300.0, DU: 300.0}, PARAMS)
        assert arch is GNB


class TestCostGradient:
    def test_defaults(self):
        assert cost_gradient(GNB, 1e6, COSTS) == pytest.approx(4.0e-4)
        assert cost_gradient(DU, 1e6, COSTS) == pytest.approx(3.2e-4)

    def test_matches_finite_difference(self):
        h = PARAMS.eta_hz
        for arch in (GNB, DU):
            for w in (2e5, 1e6, 7.3e6):
                fd = (per_user_cost(arch, w + h, COSTS)
                      - per_user_cost(arch, w - h, COSTS)) / (2 * h)
                assert cost_gradient(arch, w, COSTS) == pytest.approx(fd, rel=1e-9)


class TestGradientCompress:
    def test_identity_when_within_caps(self):
        users = [make_user(0), make_user(1)]
        sol = SlotSolution.reject_all(users)
        sol.admit(0, GNB, 1e6)
        sol.admit(1, DU, 1e6)
        out = gradient_compress(sol, users, 0, CONFIG, COSTS, PARAMS)
        assert out == sol

    def test_floor_reached_is_insufficient(self):
        config = SatelliteConfig(c_cap=100.0)  # one gNB user at w_min costs 250
        user = make_user(0)
        sol = SlotSolution.reject_all([user])
        sol.admit(0, GNB, 0.5e6)
        with pytest.raises(CompressionInsufficientError):
            gradient_compress(sol, [user], 0, config, COSTS, PARAMS)

    def test_gnb_compressed_first(self):
        config = SatelliteConfig(b_s=2.9e6)
        users = [make_user(0), make_user(1)]  # both w_min 0.5 MHz
        sol = SlotSolution.reject_all(users)
        sol.admit(0, GNB, 1.5e6)
        sol.admit(1, DU, 1.5e6)
        out = gradient_compress(sol, users, 0, config, COSTS, PARAMS)
        assert out.entry(0).bandwidth_hz == pytest.approx(1.4e6)   # two 0.05 MHz steps
        assert out.entry(1).bandwidth_hz == pytest.approx(1.5e6)   # untouched
        assert out.total_bandwidth_hz() <= config.b_s

    def test_never_below_w_min_and_cost_never_grows(self):
        config = SatelliteConfig(b_s=1.2e6)
        users = [make_user(0), make_user(1)]
        sol = SlotSolution.reject_all(users)
        sol.admit(0, GNB, 0.8e6)
        sol.admit(1, DU, 0.7e6)
        before = aggregate_load(sol, COSTS)
        out = gradient_compress(sol, users, 0, config, COSTS, PARAMS)
        assert out.entry(0).bandwidth_hz >= 0.5e6
        assert out.entry(1).bandwidth_hz >= 0.5e6
        assert aggregate_load(out, COSTS) <= before


class TestCeo:
    def test_two_relaxed_users_get_the_cheap_split(self):
        users = [make_user(0), make_user(1)]
        feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS)
        assert feasible
        assert sol.n_admitted == 2
        assert sol.entry(0).arch is DU and sol.entry(1).arch is DU
        # independent enumeration of the static assignments at minimum bandwidth
        best_static = math.inf
        for arch in (GNB, DU):
            cand = SlotSolution.reject_all(users)
            for u in users:
                cand.admit(u.id, arch, 0.5e6)
            if check_feasibility(cand, 0, users, CONFIG, COSTS).feasible:
                best_static = min(best_static, aggregate_load(cand, COSTS))
        assert aggregate_load(sol, COSTS) <= best_static
        assert aggregate_load(sol, COSTS) < 2 * per_user_cost(GNB, 0.5e6, COSTS)

    def test_strict_user_stays_on_full_gnb(self):
        users = [make_user(0, t_max=0.05)]
        feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS)
        assert feasible
        assert sol.entry(0).arch is GNB

    def test_bandwidth_pigeonhole_infeasible(self):
        users = [make_user(i) for i in range(50)]  # 25 MHz of minimum demand
        feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS)
        assert not feasible

    def test_feasible_implies_all_admitted_and_clean(self):
        for n in (1, 5, 17):
            users = [make_user(i, t_max=[0.05, 0.1, 0.2][i % 3]) for i in range(n)]
            feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS)
            if feasible:
                assert sol.n_admitted == n
                assert check_feasibility(sol, 0, users, CONFIG, COSTS).feasible

    def test_no_du_below_margin_threshold(self):
        # slack on the split is below tau_margin: must stay on the full gNB
        t_fixed_du = 600e3 / 299_792_458.0 + 8.192e-3 + 0.09
        users = [make_user(0, r_min=1e6, snr=1.0, t_max=t_fixed_du + 0.004)]
        feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS)
        assert feasible
        assert sol.entry(0).arch is GNB

    def test_zero_users(self):
        feasible, sol = ceo([], 0, CONFIG, COSTS, PARAMS)
        assert feasible and len(sol) == 0

    def test_expired_budget_reports_infeasible(self):
        users = [make_user(i) for i in range(10)]
        feasible, sol = ceo(users, 0, CONFIG, COSTS, PARAMS, time_budget=0.0)
        assert not feasible


class TestCompositeScore:
    def test_population_mean_user(self):
        user = make_user(0, t_max=0.2)
        e_ref = population_mean_demand([user], 0, CONFIG, COSTS, PARAMS)
        score = composite_score(user, 0, e_ref, CONFIG, COSTS, PARAMS)
        assert score == pytest.approx(0.6 * 1.0 + 0.4 * 2.0)

    def test_monotone_in_t_max(self):
        relaxed = make_user(0, t_max=0.2)
        strict = make_user(1, t_max=0.05)
        e_ref = population_mean_demand([relaxed, strict], 0, CONFIG, COSTS, PARAMS)
        assert (composite_score(relaxed, 0, e_ref, CONFIG, COSTS, PARAMS)
                > composite_score(strict, 0, e_ref, CONFIG, COSTS, PARAMS))

    def test_monotone_in_demand(self):
        light = make_user(0, r_min=1e6)    # 0.5 MHz minimum
        heavy = make_user(1, r_min=2e6)    # 1.0 MHz minimum
        e_ref = population_mean_demand([light, heavy], 0, CONFIG, COSTS, PARAMS)
        assert (composite_score(light, 0, e_ref, CONFIG, COSTS, PARAMS)
                > composite_score(heavy, 0, e_ref, CONFIG, COSTS, PARAMS))


class TestSmo:
    def test_pigeonhole_one_of_two(self):
        config = SatelliteConfig(b_s=0.9e6)
        users = [make_user(0), make_user(1)]
        sol = smo(users, 0, config, COSTS, PARAMS)
        assert sol.n_admitted == 1
        assert sol.entry(0).admitted  # tie broken by ascending id
        assert check_feasibility(sol, 0, users, config, COSTS).feasible

    def test_refinement_swap_admits_rejected_user(self):
        # Five identical donors whose estimated split margin just misses the
        # threshold, plus one heavier relaxed user that only fits after
        # donors free compute by switching to the split.
        config = SatelliteConfig(c_cap=1900.0)
        donors = [make_user(i, r_min=1e6, t_max=0.1095) for i in range(5)]
        heavy = make_user(5, r_min=4e6, t_max=0.2)
        users = donors + [heavy]
        sol = smo(users, 0, config, COSTS, PARAMS)
        assert sol.n_admitted == 6
        assert sol.entry(5).admitted
        switched = [u.id for u in donors if sol.entry(u.id).arch is DU]
        assert switched  # at least one donor gave up its full gNB
        assert check_feasibility(sol, 0, users, config, COSTS).feasible

    def test_without_refinement_headroom_heavy_user_stays_out(self):
        # Same instance but strict donors: no one can switch, no swap possible.
        config = SatelliteConfig(c_cap=1900.0)
        donors = [make_user(i, r_min=1e6, t_max=0.05) for i in range(5)]
        heavy = make_user(5, r_min=4e6, t_max=0.2)
        sol = smo(donors + [heavy], 0, config, COSTS, PARAMS)
        assert not sol.entry(5).admitted
        assert sol.n_admitted == 5

    def test_strict_compute_bound_matches_enumeration(self):
        # All users below the F1 floor; compute admits only two of three.
        config = SatelliteConfig(c_cap=620.0)
        users = [make_user(i, t_max=0.05) for i in range(3)]
        sol = smo(users, 0, config, COSTS, PARAMS)
        assert sol.n_admitted == 2
        assert all(sol.entry(u).arch is GNB for u in sol.admitted_ids())
        # exhaustive check over every admission/architecture pattern
        best = 0
        for mask in range(8):
            chosen = [u for i, u in enumerate(users) if mask >> i & 1]
            for arch_bits in range(2 ** len(chosen)):
                cand = SlotSolution.reject_all(users)
                for j, u in enumerate(chosen):
                    cand.admit(u.id, DU if arch_bits >> j & 1 else GNB, 0.5e6)
                if check_feasibility(cand, 0, users, config, COSTS).feasible:
                    best = max(best, len(chosen))
        assert best == 2

    def test_admission_follows_score_order(self):
        config = SatelliteConfig(b_s=1.9e6)  # room for three 0.5 MHz grants
        users = [
            make_user(0, t_max=0.05),
            make_user(1, t_max=0.2),
            make_user(2, t_max=0.1),
            make_user(3, t_max=0.2),
        ]
        sol = smo(users, 0, config, COSTS, PARAMS)
        # scores: relaxed (1, 3) first, then 0.1 s (2), strict (0) left out
        assert sol.entry(1).admitted and sol.entry(3).admitted and sol.entry(2).admitted
        assert not sol.entry(0).admitted

    def test_monotone_in_capacity(self):
        import random

        rnd = random.Random(7)
        for trial in range(60):
            n = rnd.randint(3, 14)
            users = [make_user(i,
                               r_min=rnd.uniform(0.5e6, 2e6),
                               t_max=rnd.choice([0.05, 0.1, 0.2]),
                               snr=rnd.uniform(0.8, 6.0)) for i in range(n)]
            base = SatelliteConfig(b_s=rnd.uniform(1e6, 6e6), c_cap=rnd.uniform(800, 4000))
            bigger = SatelliteConfig(b_s=base.b_s * 2, c_cap=base.c_cap * 2)
            a = smo(users, 0, base, COSTS, PARAMS).n_admitted
            b = smo(users, 0, bigger, COSTS, PARAMS).n_admitted
            assert b >= a, f"trial {trial}: {a} -> {b}"

    def test_zero_admissions_is_valid(self):
        users = [make_user(0, r_min=45e6)]  # unsatisfiable within the band
        sol = smo(users, 0, CONFIG, COSTS, PARAMS)
        assert sol.n_admitted == 0
        assert check_feasibility(sol, 0, users, CONFIG, COSTS).feasible


class TestTago:
    def _users(self, n):
        return [make_user(i) for i in range(n)]

    def test_light_routes_to_ceo(self):
        sol, trace = tago(self._users(20), 0, CONFIG, COSTS, PARAMS)  # sigma 0.5
        assert trace.sigma == pytest.approx(0.5)
        assert trace.branch == BRANCH_CEO
        assert sol.n_admitted == 20

    def test_marginal_with_time_left_stays_ceo(self):
        sol, trace = tago(self._users(34), 0, CONFIG, COSTS, PARAMS)  # sigma 0.85
        assert trace.sigma == pytest.approx(0.85)
        assert trace.branch == BRANCH_CEO
        assert sol.n_admitted == 34

    def test_marginal_timeout_falls_back(self):
        params = TagoParams(tau_strict=1e-9)
        sol, trace = tago(self._users(34), 0, CONFIG, COSTS, params)
        assert trace.branch == BRANCH_CEO_THEN_SMO
        assert sol.n_admitted == 34  # admission solver still serves everyone

    def test_heavy_routes_to_smo(self):
        sol, trace = tago(self._users(48), 0, CONFIG, COSTS, PARAMS)  # sigma 1.2
        assert trace.sigma == pytest.approx(1.2)
        assert trace.branch == BRANCH_SMO
        assert sol.n_admitted == 40  # bandwidth-capped

    def test_branch_consistent_with_thresholds(self):
        for n in (4, 12, 20, 28, 34, 40, 48, 60):
            sol, trace = tago(self._users(n), 0, CONFIG, COSTS, PARAMS)
            if trace.sigma < PARAMS.sigma_light:
                assert trace.branch in (BRANCH_CEO, BRANCH_CEO_THEN_SMO)
            elif trace.sigma <= PARAMS.sigma_heavy:
                assert trace.branch in (BRANCH_CEO, BRANCH_CEO_THEN_SMO)
            else:
                assert trace.branch == BRANCH_SMO
            assert check_feasibility(sol, 0, self._users(n), CONFIG, COSTS).feasible

    def test_deterministic(self):
        users = self._users(30)
        a, _ = tago(users, 0, CONFIG, COSTS, PARAMS)
        b, _ = tago(users, 0, CONFIG, COSTS, PARAMS)
        assert a == b

    def test_output_always_feasible_even_when_ceo_fails(self):
        users = [make_user(i, t_max=0.05) for i in range(10)]
        config = SatelliteConfig(c_cap=1200.0)  # room for four full gNBs
        sol, trace = tago(users, 0, config, COSTS, PARAMS)
        assert check_feasibility(sol, 0, users, config, COSTS).feasible
        assert sol.n_admitted == 4


class TestTagoParams:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TagoParams(omega_eff=0.7, omega_flex=0.4)

    def test_threshold_ordering(self):
        with pytest.raises(ValueError):
            TagoParams(sigma_light=1.1, sigma_heavy=1.0)
