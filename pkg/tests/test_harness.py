import json
import math

import numpy as np
import pytest

from isacmarket.harness import (
    IngestionError,
    InteractionModel,
    METRIC_FIELDS,
    RESULT_COLUMNS,
    Scenario,
    ScenarioConfig,
    STRATEGIES,
    compute_metrics,
    default_match_config,
    gen_synthetic,
    interaction_costs,
    interaction_energy,
    load_eua,
    load_scenario,
    metric_rows,
    monte_carlo_outcomes,
    offline_phase,
    offline_phases,
    offline_variant_key,
    resolve_strategy,
    run_monte_carlo,
    run_transaction,
    read_results,
    save_scenario,
    strategy_market,
    write_results,
)
from isacmarket.market import (
    Market,
    MobileUser,
    BaseStation,
    ResourceGrids,
    RiskThresholds,
    bs_utility,
    coalition_sensing_utility,
    form_coalitions,
    mu_comm_utility,
    online_utilities,
)
from isacmarket.values import Position2D, ValueWeights

B0 = 180e3


def rng_for(cfg):
    return np.random.default_rng(cfg.seed)


def make_scenario(n_mus, seed=0, **kwargs):
    cfg = ScenarioConfig(n_mus=n_mus, seed=seed, **kwargs)
    return gen_synthetic(cfg, rng_for(cfg))


class TestGenSynthetic:
    def test_five_bs_layout_is_corners_plus_center(self):
        sc = make_scenario(4)
        pts = {(b.location.x, b.location.y) for b in sc.bss}
        a = 800.0
        assert pts == {(0.0, 0.0), (a, 0.0), (0.0, a), (a, a),
                       (a / 2, a / 2)}

    def test_seven_bs_layout_adds_edge_midpoints(self):
        sc = make_scenario(4, n_bss=7)
        pts = {(b.location.x, b.location.y) for b in sc.bss}
        a = 800.0
        assert (a / 2, 0.0) in pts and (a / 2, a) in pts
        assert len(pts) == 7

    def test_other_counts_stay_inside_area(self):
        sc = make_scenario(4, n_bss=3)
        for b in sc.bss:
            assert 0.0 <= b.location.x <= 800.0
            assert 0.0 <= b.location.y <= 800.0

    def test_sampled_parameters_within_ranges(self):
        sc = make_scenario(40, seed=2)
        for u in sc.users:
            assert 0.64 <= u.part_prob <= 0.96
            assert 4 <= u.n_rx <= 8
            assert 0.01 <= u.rate_req <= 10.0
            assert 1.0 <= u.sensing_req <= 100.0
            assert 1 <= u.target_id <= 8
            assert 0.0 <= u.location.x <= 800.0
            assert 0.0 <= u.location.y <= 800.0
        for b in sc.bss:
            n_sub = b.bandwidth_total / B0
            assert abs(n_sub - round(n_sub)) < 1e-9
            assert 445 <= round(n_sub) <= 666
            assert 10.0 <= b.power_total <= 100.0
            assert 8 <= b.n_tx <= 16
            assert b.overbook_b == b.overbook_p == 0.2
        assert len(sc.targets) == 8
        assert len(sc.market.xi) == sc.n_mus * sc.n_bss
        assert len(sc.market.kappa) == sc.n_mus * sc.n_bss
        for v in sc.market.xi.values():
            assert 0.0 < v <= 600.0
        for v in sc.market.kappa.values():
            assert 0.0 < v <= 1.0

    def test_same_seed_gives_identical_scenario(self):
        cfg = ScenarioConfig(n_mus=12, seed=7)
        a = gen_synthetic(cfg, rng_for(cfg))
        b = gen_synthetic(cfg, rng_for(cfg))
        assert a.users == b.users
        assert a.bss == b.bss
        assert a.targets == b.targets
        assert a.market.xi == b.market.xi
        assert a.market.kappa == b.market.kappa

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ValueError):
            ScenarioConfig(n_mus=0)
        with pytest.raises(ValueError):
            ScenarioConfig(n_mus=4, part_range=(0.9, 0.6))
        with pytest.raises(ValueError):
            ScenarioConfig(n_mus=4, part_range=(0.0, 0.5))
        with pytest.raises(ValueError):
            ScenarioConfig(n_mus=4, bandwidth_mhz=(0.1, 0.15))
        with pytest.raises(ValueError):
            ScenarioConfig(n_mus=4, overbook=-0.1)


def write_csv(path, header, rows):
    lines = [header] + rows
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def eua_files(tmp_path):
    rng = np.random.default_rng(99)
    bs_rows = [f"{-37.81 + rng.uniform(-0.01, 0.01):.6f},"
               f"{144.96 + rng.uniform(-0.01, 0.01):.6f}" for _ in range(11)]
    mu_rows = [f"{-37.81 + rng.uniform(-0.012, 0.012):.6f},"
               f"{144.96 + rng.uniform(-0.012, 0.012):.6f}"
               for _ in range(30)]
    bs_file = write_csv(tmp_path / "bs.csv", "Latitude,Longitude", bs_rows)
    mu_file = write_csv(tmp_path / "mu.csv", "Latitude,Longitude", mu_rows)
    return bs_file, mu_file


class TestLoadEua:
    def test_every_station_row_becomes_a_record(self, eua_files):
        bs_file, mu_file = eua_files
        cfg = ScenarioConfig(n_mus=14, seed=1)
        sc = load_eua(bs_file, mu_file, cfg, rng_for(cfg))
        assert sc.n_bss == 11
        assert sc.n_mus == 14
        assert sc.label == "eua11bs14mu"

    def test_user_subset_reproducible_under_seed(self, eua_files):
        bs_file, mu_file = eua_files
        cfg = ScenarioConfig(n_mus=14, seed=5)
        a = load_eua(bs_file, mu_file, cfg, rng_for(cfg))
        b = load_eua(bs_file, mu_file, cfg, rng_for(cfg))
        assert a.users == b.users

    def test_targets_inside_projected_bounding_box(self, eua_files):
        bs_file, mu_file = eua_files
        cfg = ScenarioConfig(n_mus=10, seed=3)
        sc = load_eua(bs_file, mu_file, cfg, rng_for(cfg))
        xs = [p.location.x for p in sc.users] + [b.location.x for b in sc.bss]
        ys = [p.location.y for p in sc.users] + [b.location.y for b in sc.bss]
        # the box covers all rows, picked or not, so only a loose margin holds
        span_x = 2 * max(abs(min(xs)), abs(max(xs)))
        span_y = 2 * max(abs(min(ys)), abs(max(ys)))
        for t in sc.targets:
            assert abs(t.x) <= span_x and abs(t.y) <= span_y

    def test_malformed_row_error_names_file_and_line(self, tmp_path, eua_files):
        bs_file, _ = eua_files
        bad = write_csv(tmp_path / "bad.csv", "latitude,longitude",
                        ["-37.8,144.9", "-37.9,144.8", "-37.7,oops"])
        cfg = ScenarioConfig(n_mus=2, seed=0)
        with pytest.raises(IngestionError, match=r"bad\.csv: line 4"):
            load_eua(bs_file, bad, cfg, rng_for(cfg))

    def test_missing_columns_rejected(self, tmp_path, eua_files):
        bs_file, _ = eua_files
        nocol = write_csv(tmp_path / "nocol.csv", "lat,lng", ["1,2"])
        cfg = ScenarioConfig(n_mus=1, seed=0)
        with pytest.raises(IngestionError, match="latitude"):
            load_eua(bs_file, nocol, cfg, rng_for(cfg))

    def test_empty_file_rejected(self, tmp_path, eua_files):
        bs_file, _ = eua_files
        empty = tmp_path / "empty.csv"
        empty.write_text("", encoding="utf-8")
        cfg = ScenarioConfig(n_mus=1, seed=0)
        with pytest.raises(IngestionError, match="empty"):
            load_eua(bs_file, str(empty), cfg, rng_for(cfg))

    def test_too_few_user_rows_rejected(self, eua_files):
        bs_file, mu_file = eua_files
        cfg = ScenarioConfig(n_mus=31, seed=0)
        with pytest.raises(IngestionError, match="need 31"):
            load_eua(bs_file, mu_file, cfg, rng_for(cfg))


class TestStrategyMarket:
    def test_frbank_trades_in_the_scenario_market(self):
        sc = make_scenario(6)
        assert strategy_market(sc, "frbank") is sc.market

    def test_no_coalition_strategies_get_singleton_teams(self):
        sc = make_scenario(6)
        m = strategy_market(sc, "hybrid")
        assert all(len(c.member_ids) == 1 for c in m.coalitions)
        assert len(m.coalitions) == 6

    def test_no_overbook_strategies_sell_nominal_capacity(self):
        sc = make_scenario(6)
        m = strategy_market(sc, "con_offline")
        assert all(b.overbook_b == 0.0 and b.overbook_p == 0.0 for b in m.bss)

    def test_offline_variants_shared_between_strategies(self):
        assert offline_variant_key("hybrid") == offline_variant_key("con_offline")
        assert offline_variant_key("con_online") is None
        assert offline_variant_key("greedy") is None
        core = ["frbank", "con_online", "con_offline", "hybrid", "hybrid_o",
                "greedy"]
        sc = make_scenario(6)
        phases = offline_phases(sc, core)
        assert len(phases) == 3

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValueError, match="unknown strategy"):
            resolve_strategy("nope")


class TestRunTransaction:
    def test_prior_must_match_strategy(self):
        sc = make_scenario(5)
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="long-term"):
            run_transaction(sc, "frbank", None, rng)
        prior = offline_phase(sc, "con_offline")
        with pytest.raises(ValueError, match="no long-term"):
            run_transaction(sc, "con_online", prior, rng)

    def test_all_absent_trial_has_zero_social_welfare(self):
        # penalties are transfers: an all-absent book nets out exactly
        sc = make_scenario(4, seed=9, part_range=(0.5, 0.5),
                           thresholds=RiskThresholds())
        outs = monte_carlo_outcomes(sc, ["con_offline"], 200)
        assert any(o.n_contracted > 0 for o in outs)
        hits = [o for o in outs
                if o.n_contracted > 0
                and not any(o.realization.alpha.values())]
        assert hits
        for o in hits:
            assert abs(o.social_welfare) <= 1e-9
            assert o.served_value == 0.0

    def test_no_overdemand_means_no_volunteers(self):
        sc = make_scenario(3, seed=1)
        outs = monte_carlo_outcomes(sc, ["frbank"], 20)
        assert all(not o.volunteer_decisions for o in outs)
        assert all(not o.realization.volunteers_c
                   and not o.realization.volunteers_s for o in outs)

    def test_all_present_and_served_gives_zero_drlc(self):
        sc = make_scenario(6, seed=4, part_range=(1.0, 1.0),
                           thresholds=RiskThresholds())
        outs = monte_carlo_outcomes(sc, ["con_offline"], 10)
        assert any(o.n_contracted > 0 for o in outs)
        for o in outs:
            assert o.n_failed == 0
            assert o.drlc == 0.0


def greedy_scenario(xi_by_user, n_sub_cap, power_cap):
    users = tuple(MobileUser(id=i, target_id=i, rate_req=0.0,
                             sensing_req=1.0, n_rx=4,
                             location=Position2D(0.0, 0.0), part_prob=1.0)
                  for i in xi_by_user)
    bs = BaseStation(id=1, bandwidth_total=n_sub_cap * B0,
                     power_total=power_cap, location=Position2D(0.0, 0.0),
                     n_tx=8, b0=B0)
    market = Market(users=users, bss=(bs,),
                    coalitions=tuple(form_coalitions(users)),
                    xi={(i, 1): xi_by_user[i] for i in xi_by_user},
                    kappa={(i, 1): 0.0 for i in xi_by_user},
                    weights=ValueWeights(omega1=1e-5, omega2=0.5, omega3=0.5,
                                         omega4=0.08, omega5=0.01),
                    thresholds=RiskThresholds(),
                    grids=ResourceGrids((25,), (1.0,)), b0=B0)
    return Scenario(label="hand", market=market,
                    targets=(Position2D(0.0, 0.0),), seed=0)


class TestGreedy:
    def test_three_clients_two_seats_selects_top_two_payments(self):
        xi = {1: 100.0, 2: 50.0, 3: 400.0}
        sc = greedy_scenario(xi, n_sub_cap=50, power_cap=2.0)
        out = run_transaction(sc, "greedy", None, np.random.default_rng(0))
        assert {t.client_id for t in out.temp_contracts} == {3, 1}
        for t in out.temp_contracts:
            v = 1e-5 * 25 * B0 * math.log2(1.0 + 1.0 * xi[t.client_id] / 25)
            assert t.pay == pytest.approx(v)
            assert t.pay == t.value
        assert out.ni_to_bs == 3 and out.ni_to_client == 3

    def test_greedy_never_exceeds_nominal_capacity(self):
        sc = make_scenario(30, seed=6)
        outs = monte_carlo_outcomes(sc, ["greedy"], 10)
        for o in outs:
            for bs in sc.bss:
                got_b = sum(t.bandwidth for t in o.temp_contracts
                            if t.bs_id == bs.id)
                got_p = sum(t.power for t in o.temp_contracts
                            if t.bs_id == bs.id)
                assert got_b <= bs.bandwidth_total + 1e-9
                assert got_p <= bs.power_total + 1e-9


class TestStrategySanity:
    def test_contract_kinds_per_strategy(self):
        sc = make_scenario(12, seed=8)
        outs = monte_carlo_outcomes(
            sc, ["con_offline", "con_online", "greedy"], 5)
        for o in outs:
            if o.strategy == "con_offline":
                assert not o.temp_contracts
            else:
                assert not o.comm_contracts and not o.sensing_contracts
                assert o.n_contracted == 0

    def test_transfer_cancellation_every_trial(self):
        sc = make_scenario(12, seed=8)
        outs = monte_carlo_outcomes(sc, list(STRATEGIES), 5)
        for o in outs:
            assert abs(o.social_welfare
                       - (o.served_value - o.power_cost)) <= 1e-9

    def test_utilities_recompute_from_contracts_and_realization(self):
        sc = make_scenario(12, seed=8)
        outs = monte_carlo_outcomes(sc, ["frbank", "con_online"], 4)
        w = sc.market.weights
        for o in outs:
            mu_u = sum(mu_comm_utility(c, o.realization)
                       for c in o.comm_contracts)
            mu_u += sum(coalition_sensing_utility(s, o.realization)
                        for s in o.sensing_contracts)
            bs_u = sum(bs_utility(bs,
                                  [c for c in o.comm_contracts
                                   if c.bs_id == bs.id],
                                  [s for s in o.sensing_contracts
                                   if s.bs_id == bs.id],
                                  o.realization, w)
                       for bs in sc.bss)
            buyers, stations = online_utilities(o.temp_contracts)
            mu_u += sum(buyers.values())
            bs_u += sum(stations.values())
            assert o.mu_utility == pytest.approx(mu_u, abs=1e-9)
            assert o.bs_utility == pytest.approx(bs_u, abs=1e-9)
            assert o.social_welfare == pytest.approx(mu_u + bs_u, abs=1e-9)

    def test_seeded_determinism_except_runtime(self):
        sc = make_scenario(10, seed=12)
        a = monte_carlo_outcomes(sc, ["frbank", "con_online"], 2)
        b = monte_carlo_outcomes(sc, ["frbank", "con_online"], 2)
        for x, y in zip(a, b):
            assert x.realization == y.realization
            assert x.volunteer_decisions == y.volunteer_decisions
            assert x.comm_contracts == y.comm_contracts
            assert x.sensing_contracts == y.sensing_contracts
            assert x.temp_contracts == y.temp_contracts
            assert x.social_welfare == y.social_welfare
            assert x.ni == y.ni and x.n_failed == y.n_failed


class TestMetrics:
    def test_interaction_energy_hand_example(self):
        dibc, ecibc = interaction_energy([5.0, 10.0], [0.3, 10.0])
        assert dibc == 15.0
        assert ecibc == pytest.approx(0.1015)

    def test_zero_interactions_cost_nothing(self):
        rng = np.random.default_rng(0)
        dibc, ecibc = interaction_costs(0, 0, InteractionModel(), rng)
        assert dibc == 0.0 and ecibc == 0.0

    def test_single_trial_report_equals_that_trial(self):
        sc = make_scenario(8, seed=2)
        outs = monte_carlo_outcomes(sc, ["frbank"], 1)
        rows = metric_rows(sc, outs)
        report = compute_metrics(sc, outs)
        assert report.trials == {"frbank": 1}
        for metric in METRIC_FIELDS:
            assert report.means["frbank"][metric] == rows[0][metric]
            assert report.ses["frbank"][metric] == 0.0

    def test_six_strategies_give_six_rows(self):
        sc = make_scenario(8, seed=2)
        core = ["frbank", "con_online", "con_offline", "hybrid", "hybrid_o",
                "greedy"]
        report = run_monte_carlo(sc, core, 2)
        assert sorted(report.trials) == sorted(core)
        assert all(n == 2 for n in report.trials.values())

    def test_doubling_trials_shrinks_standard_error(self):
        sc = make_scenario(8, seed=2)
        se_30 = compute_metrics(
            sc, monte_carlo_outcomes(sc, ["con_online"], 30))
        se_60 = compute_metrics(
            sc, monte_carlo_outcomes(sc, ["con_online"], 60))
        a = se_30.ses["con_online"]["social_welfare"]
        b = se_60.ses["con_online"]["social_welfare"]
        assert 0.4 < b / a < 1.05

    def test_metric_rows_use_documented_columns(self):
        sc = make_scenario(8, seed=2)
        outs = monte_carlo_outcomes(sc, ["greedy"], 2)
        rows = metric_rows(sc, outs)
        assert tuple(rows[0]) == RESULT_COLUMNS
        assert rows[0]["scenario_id"] == "syn5bs8mu"
        assert rows[0]["n_mus"] == 8 and rows[0]["n_bss"] == 5

    def test_trials_with_zero_interactions_report_zero_costs(self):
        sc = make_scenario(3, seed=1)
        outs = monte_carlo_outcomes(sc, ["con_offline"], 5)
        rows = metric_rows(sc, outs)
        for o, r in zip(outs, rows):
            if o.ni == 0:
                assert r["dibc_ms"] == 0.0 and r["ecibc_w"] == 0.0
        assert any(o.ni == 0 for o in outs)


class TestResultFiles:
    def test_results_roundtrip(self, tmp_path):
        sc = make_scenario(8, seed=2)
        rows = metric_rows(sc, monte_carlo_outcomes(sc, ["greedy"], 3))
        path = tmp_path / "results.csv"
        write_results(str(path), rows)
        back = read_results(str(path))
        assert len(back) == 3
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == ",".join(RESULT_COLUMNS)
        for orig, got in zip(rows, back):
            assert got["scenario_id"] == orig["scenario_id"]
            assert got["strategy"] == orig["strategy"]
            for metric in METRIC_FIELDS:
                assert got[metric] == pytest.approx(float(orig[metric]))

    def test_scenario_roundtrip(self, tmp_path):
        sc = make_scenario(9, seed=13)
        path = tmp_path / "scenario.json"
        save_scenario(sc, str(path))
        back = load_scenario(str(path))
        assert back.label == sc.label and back.seed == sc.seed
        assert back.users == sc.users
        assert back.bss == sc.bss
        assert back.targets == sc.targets
        assert back.market.xi == sc.market.xi
        assert back.market.kappa == sc.market.kappa
        assert back.market.weights == sc.market.weights
        assert back.market.thresholds == sc.market.thresholds
        assert back.market.grids == sc.market.grids
        assert back.market.coalitions == sc.market.coalitions

    def test_scenario_file_bytes_deterministic(self, tmp_path):
        sc = make_scenario(9, seed=13)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_scenario(sc, str(p1))
        save_scenario(sc, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_monte_carlo_input_validation(self):
        sc = make_scenario(4)
        with pytest.raises(ValueError, match="n_trials"):
            monte_carlo_outcomes(sc, ["greedy"], 0)
        with pytest.raises(ValueError, match="at least one"):
            monte_carlo_outcomes(sc, [], 3)
