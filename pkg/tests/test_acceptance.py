"""Acceptance suite: matching stability, oracle equivalence, and Monte-Carlo
trend directions. Each check prints one PASS/FAIL line (run pytest -s)."""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from isacmarket.harness import (
    STRATEGIES,
    ScenarioConfig,
    gen_synthetic,
    monte_carlo_outcomes,
)
from isacmarket.market import (
    BaseStation,
    Coalition,
    CommContract,
    ContractLoad,
    Expectations,
    Market,
    MobileUser,
    Realization,
    ResourceGrids,
    RiskThresholds,
    SensingContract,
    bs_risk,
    bs_utility,
    coalition_sensing_utility,
    expect_beta,
    expect_volunteer,
    expected_bs_utility,
    expected_coalition_utility,
    expected_mu_comm_utility,
    form_coalitions,
    mu_comm_utility,
    volunteer_flags,
    volunteer_order,
)
from isacmarket.offline import (
    MatchConfig,
    SellerProposal,
    check_coalition_stability,
    check_individual_rationality,
    find_blocking_pairs,
    knapsack_select,
    run_offrfw2m,
)
from isacmarket.online import ResidualSupply, run_onebw2m, sample_realization
from isacmarket.values import (
    CrlbChannel,
    Position2D,
    ValueWeights,
    compute_geometry,
    crlb_zeta_oracle,
    peb_simplified,
)

B0 = 180e3
W = ValueWeights(omega1=1e-5, omega2=0.5, omega3=0.5, omega4=0.05, omega5=0.0)


def _criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    assert ok, line


def make_user(uid, *, part=1.0, target=1):
    return MobileUser(id=uid, target_id=target, rate_req=0.0, sensing_req=0.0,
                      n_rx=4, location=Position2D(0.0, 0.0), part_prob=part)


def make_bs(bid=1, *, n_sub=100, power=50.0):
    return BaseStation(id=bid, bandwidth_total=n_sub * B0, power_total=power,
                       location=Position2D(0.0, 0.0), n_tx=8, b0=B0)


def random_tiny_market(rng):
    n_users = int(rng.integers(3, 7))
    users = tuple(make_user(i + 1, part=float(rng.uniform(0.64, 0.96)),
                            target=int(rng.integers(1, 4)))
                  for i in range(n_users))
    bss = tuple(make_bs(j + 1, n_sub=int(rng.choice([50, 75])),
                        power=float(rng.choice([4.0, 6.0])))
                for j in range(2))
    xi = {(u.id, b.id): float(rng.uniform(50.0, 400.0))
          for u in users for b in bss}
    kappa = {(u.id, b.id): float(rng.uniform(0.2, 1.0))
             for u in users for b in bss}
    return Market(users=users, bss=bss, coalitions=tuple(form_coalitions(users)),
                  xi=xi, kappa=kappa, weights=W, thresholds=RiskThresholds(),
                  grids=ResourceGrids((25, 50), (1.0, 2.0)), b0=B0)


N_STABILITY_MARKETS = 200
STABLE_CFG = MatchConfig(probe_evict_limit=None, stability_passes=30)


@pytest.fixture(scope="module")
def stability_batch():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    results = [run_offrfw2m(random_tiny_market(rng), STABLE_CFG)
               for _ in range(N_STABILITY_MARKETS)]
    return results, time.perf_counter() - started


def test_stability_suite(stability_batch):
    results, build_s = stability_batch
    started = time.perf_counter()
    clean = 0
    for r in results:
        clean += (r.certified
                  and find_blocking_pairs(r) == []
                  and check_individual_rationality(r) == []
                  and check_coalition_stability(r) == [])
    elapsed = build_s + time.perf_counter() - started
    ok = clean == len(results) and elapsed < 300.0
    _criterion("stability-suite", ok,
               f"{clean}/{len(results)} random tiny markets with zero blocking"
               f" pairs, IR and coalition violations in {elapsed:.1f}s")


def test_knapsack_oracle():
    rng = np.random.default_rng(404)
    started = time.perf_counter()
    n_instances = 500
    exact = 0
    for _ in range(n_instances):
        n = int(rng.integers(1, 13))
        # dyadic values make every subset sum exactly representable, so the
        # selector and the enumeration optimum must agree bit for bit
        props = [SellerProposal(key=("c", i), b_units=int(rng.integers(1, 6)),
                                p_units=int(rng.integers(1, 6)),
                                value=float(rng.integers(1, 10_241)) / 1024.0,
                                e_bandwidth=0.0, e_power=0.0)
                 for i in range(n)]
        cap_b = int(rng.integers(3, 12))
        cap_p = int(rng.integers(3, 12))
        picked = knapsack_select(props, cap_b, cap_p)
        total = sum(props[i].value for i in picked)
        masks = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
        wb = masks @ np.array([p.b_units for p in props])
        wp = masks @ np.array([p.p_units for p in props])
        vals = masks @ np.array([p.value for p in props])
        best = float(vals[(wb <= cap_b) & (wp <= cap_p)].max())
        feasible = (sum(props[i].b_units for i in picked) <= cap_b
                    and sum(props[i].p_units for i in picked) <= cap_p)
        exact += feasible and total == best
    elapsed = time.perf_counter() - started
    ok = exact == n_instances and elapsed < 60.0
    _criterion("knapsack-oracle", ok,
               f"{exact}/{n_instances} instances equal the enumeration optimum"
               f" exactly in {elapsed:.1f}s")


def brute_beta(probs):
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(probs)):
        w = math.prod(p if b else 1.0 - p for p, b in zip(probs, bits))
        total += w * (1.0 if any(bits) else 0.0)
    return total


def brute_volunteer(loads, b_cap, p_cap):
    """Pattern-by-pattern volunteer expectation: a present contract volunteers
    iff the present demand at its rank and below still overflows a cap."""
    order = volunteer_order(loads, b_cap, p_cap)
    bw = [loads[i].bandwidth for i in order]
    pw = [loads[i].power for i in order]
    pr = [loads[i].presence for i in order]
    n = len(loads)
    tol_b = 1e-9 * (1.0 + b_cap)
    tol_p = 1e-9 * (1.0 + p_cap)
    probs = [0.0] * n
    for bits in itertools.product((0, 1), repeat=n):
        w = math.prod(p if b else 1.0 - p for p, b in zip(pr, bits))
        for j in range(n):
            if not bits[j]:
                continue
            tail_b = sum(bw[k] for k in range(j, n) if bits[k])
            tail_p = sum(pw[k] for k in range(j, n) if bits[k])
            if tail_b > b_cap + tol_b or tail_p > p_cap + tol_p:
                probs[j] += w
    return {loads[order[j]].key: probs[j] for j in range(n)}


def test_expectation_oracles():
    rng = np.random.default_rng(77)
    worst_beta = 0.0
    for _ in range(40):
        k = int(rng.integers(1, 11))
        probs = [float(rng.uniform(0.05, 0.95)) for _ in range(k)]
        users = [make_user(i + 1, part=probs[i], target=1) for i in range(k)]
        c = Coalition(id=1, member_ids=tuple(range(1, k + 1)), target_id=1)
        worst_beta = max(worst_beta, abs(expect_beta(c, users) - brute_beta(probs)))
    worst_vol = 0.0
    for _ in range(30):
        n = int(rng.integers(1, 11))
        bs = make_bs(n_sub=int(rng.integers(40, 120)),
                     power=float(rng.uniform(8.0, 30.0)))
        loads = [ContractLoad(key=("c", i + 1, 1),
                              presence=float(rng.uniform(0.05, 0.95)),
                              bandwidth=float(rng.uniform(5e6, 30e6)),
                              power=float(rng.uniform(1.0, 12.0)),
                              pel_s=float(rng.uniform(0.5, 5.0)))
                 for i in range(n)]
        exact = expect_volunteer(bs, loads, mode="exact")
        oracle = brute_volunteer(loads, bs.bandwidth_total, bs.power_total)
        worst_vol = max(worst_vol,
                        max(abs(exact[k] - oracle[k]) for k in oracle))
    mc_bs = make_bs(n_sub=60, power=12.0)
    mc_loads = [
        ContractLoad(key=("c", 1, 1), presence=0.8, bandwidth=4.5e6, power=3.0,
                     pel_s=1.0),
        ContractLoad(key=("c", 2, 1), presence=0.6, bandwidth=5.5e6, power=4.0,
                     pel_s=2.5),
        ContractLoad(key=("c", 3, 1), presence=0.9, bandwidth=3.5e6, power=2.0,
                     pel_s=0.8),
        ContractLoad(key=("s", 7, 1), presence=0.7, bandwidth=6.0e6, power=5.0,
                     pel_s=1.6),
        ContractLoad(key=("c", 4, 1), presence=0.5, bandwidth=4.0e6, power=3.5,
                     pel_s=3.2),
    ]
    n_mc = 100_000
    mc_exact = expect_volunteer(mc_bs, mc_loads, mode="exact")
    mc_est = expect_volunteer(mc_bs, mc_loads, mode="monte_carlo",
                              n_samples=n_mc, rng=np.random.default_rng(19))
    mc_ok = all(abs(mc_est[k] - p) <= 3.0 * math.sqrt(p * (1.0 - p) / n_mc) + 1e-9
                for k, p in mc_exact.items())
    ok = worst_beta <= 1e-12 and worst_vol <= 1e-12 and mc_ok
    _criterion("expectation-oracles", ok,
               f"enumeration gaps beta={worst_beta:.2e} volunteer="
               f"{worst_vol:.2e}; monte carlo within 3 SE at n={n_mc}")


def test_expected_utility_consistency():
    bs = make_bs(n_sub=500, power=45.0)
    alpha_p = {1: 0.7, 2: 0.6, 3: 0.9}
    member_p = {4: 0.8, 5: 0.5, 6: 0.75}
    beta_p = {8: 1.0 - 0.2 * 0.5, 9: 0.75}
    comm = [
        CommContract(mu_id=1, bs_id=1, bandwidth=40e6, power=12.0, pay=3.0,
                     pel_u=1.5, pel_s=1.0, value=9.0),
        CommContract(mu_id=2, bs_id=1, bandwidth=35e6, power=18.0, pay=4.0,
                     pel_u=2.0, pel_s=1.2, value=10.0),
        CommContract(mu_id=3, bs_id=1, bandwidth=30e6, power=24.0, pay=5.0,
                     pel_u=2.5, pel_s=1.5, value=11.0),
    ]
    sense = [
        SensingContract(coalition_id=8, bs_id=1, bandwidth=25e6, power=10.0,
                        pay=2.0, pel_u=1.0, pel_s=0.8, value_max=6.0,
                        n_members=2),
        SensingContract(coalition_id=9, bs_id=1, bandwidth=15e6, power=5.0,
                        pay=1.5, pel_u=0.8, pel_s=0.6, value_max=4.0,
                        n_members=1),
    ]
    loads = [ContractLoad(key=("c", c.mu_id, 1), presence=alpha_p[c.mu_id],
                          bandwidth=c.bandwidth, power=c.power, pel_s=c.pel_s)
             for c in comm]
    loads += [ContractLoad(key=("s", s.coalition_id, 1),
                           presence=beta_p[s.coalition_id],
                           bandwidth=s.bandwidth, power=s.power, pel_s=s.pel_s)
              for s in sense]
    e_vol = expect_volunteer(bs, loads, mode="exact")
    exp = Expectations(e_alpha=alpha_p, e_beta=beta_p, e_vol=e_vol)

    n = 100_000
    rng = np.random.default_rng(131)
    draws = rng.random((n, 6)) < np.array([alpha_p[1], alpha_p[2], alpha_p[3],
                                           member_p[4], member_p[5], member_p[6]])
    beta8 = draws[:, 3] | draws[:, 4]
    beta9 = draws[:, 5]
    presence_col = {("c", 1, 1): draws[:, 0], ("c", 2, 1): draws[:, 1],
                    ("c", 3, 1): draws[:, 2], ("s", 8, 1): beta8,
                    ("s", 9, 1): beta9}
    order = volunteer_order(loads, bs.bandwidth_total, bs.power_total)
    keys = [loads[i].key for i in order]
    present = np.column_stack([presence_col[k] for k in keys])
    flags = volunteer_flags(present,
                            np.array([loads[i].bandwidth for i in order]),
                            np.array([loads[i].power for i in order]),
                            bs.bandwidth_total, bs.power_total)
    vol_col = {k: flags[:, j] for j, k in enumerate(keys)}

    samples = {("mu", c.mu_id): np.empty(n) for c in comm}
    samples.update({("co", s.coalition_id): np.empty(n) for s in sense})
    samples[("bs", 1)] = np.empty(n)
    for t in range(n):
        real = Realization(
            alpha={i: int(presence_col[("c", i, 1)][t]) for i in alpha_p},
            beta={8: int(beta8[t]), 9: int(beta9[t])},
            volunteers_c={(i, 1): int(vol_col[("c", i, 1)][t]) for i in alpha_p},
            volunteers_s={(8, 1): int(vol_col[("s", 8, 1)][t]),
                          (9, 1): int(vol_col[("s", 9, 1)][t])})
        for c in comm:
            samples[("mu", c.mu_id)][t] = mu_comm_utility(c, real)
        for s in sense:
            samples[("co", s.coalition_id)][t] = coalition_sensing_utility(s, real)
        samples[("bs", 1)][t] = bs_utility(bs, comm, sense, real, W)

    expected = {("mu", c.mu_id): expected_mu_comm_utility(c, exp) for c in comm}
    expected.update({("co", s.coalition_id): expected_coalition_utility(s, exp)
                     for s in sense})
    expected[("bs", 1)] = expected_bs_utility(bs, comm, sense, exp, W)
    worst_z = 0.0
    for key, xs in samples.items():
        se = xs.std(ddof=1) / math.sqrt(n)
        worst_z = max(worst_z, abs(xs.mean() - expected[key]) / max(se, 1e-12))
    ok = worst_z <= 3.0
    _criterion("expected-utility-consistency", ok,
               f"{len(samples)} frozen books, worst |mean - expectation| ="
               f" {worst_z:.2f} SE over {n} realizations")


def test_transfer_cancellation():
    cfg = ScenarioConfig(n_mus=40, seed=5)
    sc = gen_synthetic(cfg, np.random.default_rng(cfg.seed))
    strategies = tuple(STRATEGIES)
    n_trials = 20
    outcomes = monte_carlo_outcomes(sc, strategies, n_trials)
    worst = max(abs(o.social_welfare - (o.served_value - o.power_cost))
                for o in outcomes)
    ok = worst <= 1e-9
    _criterion("transfer-cancellation", ok,
               f"max |utilities - (served value - power cost)| = {worst:.2e}"
               f" over {n_trials} trials x {len(strategies)} strategies")


def test_overdemand_risk_bound():
    rng = np.random.default_rng(606)
    n_markets = 50
    n_samples = 10_000
    held = 0
    for _ in range(n_markets):
        k_c = int(rng.integers(2, 9))
        k_s = int(rng.integers(0, 4))
        bs = make_bs(n_sub=int(rng.integers(100, 400)),
                     power=float(rng.uniform(20.0, 120.0)))
        comm = [CommContract(mu_id=i + 1, bs_id=1,
                             bandwidth=float(rng.integers(5, 60)) * B0,
                             power=float(rng.uniform(0.5, 10.0)), pay=1.0,
                             pel_u=0.5, pel_s=0.3, value=5.0)
                for i in range(k_c)]
        sense = [SensingContract(coalition_id=100 + i, bs_id=1,
                                 bandwidth=float(rng.integers(5, 40)) * B0,
                                 power=float(rng.uniform(0.5, 6.0)), pay=1.0,
                                 pel_u=0.5, pel_s=0.3, value_max=3.0,
                                 n_members=2)
                 for i in range(k_s)]
        e_alpha = {i + 1: float(rng.uniform(0.3, 0.95)) for i in range(k_c)}
        e_beta = {100 + i: float(rng.uniform(0.5, 0.99)) for i in range(k_s)}
        exp = Expectations(e_alpha=e_alpha, e_beta=e_beta)
        rk = bs_risk(bs, comm, sense, exp, RiskThresholds())
        probs = np.array([e_alpha[c.mu_id] for c in comm]
                         + [e_beta[s.coalition_id] for s in sense])
        bws = np.array([c.bandwidth for c in comm]
                       + [s.bandwidth for s in sense])
        pws = np.array([c.power for c in comm] + [s.power for s in sense])
        present = rng.random((n_samples, len(probs))) < probs
        emp_b = float(np.mean(present @ bws > bs.bandwidth_total))
        emp_p = float(np.mean(present @ pws > bs.power_total))
        slack_b = 3.0 * math.sqrt(max(emp_b * (1.0 - emp_b), 1e-12) / n_samples)
        slack_p = 3.0 * math.sqrt(max(emp_p * (1.0 - emp_p), 1e-12) / n_samples)
        held += (emp_b <= rk.bandwidth_bound + slack_b
                 and emp_p <= rk.power_bound + slack_p)
    ok = held == n_markets
    _criterion("overdemand-risk-bound", ok,
               f"empirical overdemand within bound + 3 sigma on {held}/"
               f"{n_markets} markets x {n_samples} realizations")


def test_position_error_scaling():
    geom = compute_geometry(Position2D(0.0, 0.0), Position2D(400.0, 0.0),
                            Position2D(300.0, 350.0))
    base = dict(n_tx=8, n_rx=4, h=0.3, rho=1.0, sigma_s2=1e-3, t_s=1e-6)
    n_subs = (4, 8, 16, 32, 64)
    powers = (0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
    ref = crlb_zeta_oracle(CrlbChannel(n_sub=n_subs[0], **base), geom,
                           powers[0])["peb"]
    zeta_fit = ref * math.sqrt(n_subs[0] * powers[0])
    worst = 0.0
    for n in n_subs:
        ch = CrlbChannel(n_sub=n, **base)
        for p in powers:
            direct = crlb_zeta_oracle(ch, geom, p)["peb"]
            worst = max(worst,
                        abs(direct * math.sqrt(n * p) - zeta_fit) / zeta_fit,
                        abs(peb_simplified(n, p, zeta_fit) - direct) / direct)
    ok = worst <= 1e-6
    _criterion("position-error-scaling", ok,
               f"inverse-sqrt scaling over {len(n_subs)}x{len(powers)} grid,"
               f" worst relative gap {worst:.2e}")


TREND_STRATEGIES = ("frbank", "con_online", "con_offline", "hybrid",
                    "hybrid_o", "greedy")


def test_welfare_and_interaction_trends():
    started = time.perf_counter()
    counts = tuple(range(20, 101, 10))
    n_trials = 100
    sw: dict[int, dict[str, float]] = {}
    ni: dict[int, dict[str, float]] = {}
    for count in counts:
        cfg = ScenarioConfig(n_mus=count, seed=0)
        sc = gen_synthetic(cfg, np.random.default_rng(cfg.seed))
        outcomes = monte_carlo_outcomes(sc, TREND_STRATEGIES, n_trials)
        sw[count] = {s: float(np.mean([o.social_welfare for o in outcomes
                                       if o.strategy == s]))
                     for s in TREND_STRATEGIES}
        ni[count] = {s: float(np.mean([o.ni for o in outcomes
                                       if o.strategy == s]))
                     for s in TREND_STRATEGIES}
    elapsed = time.perf_counter() - started
    failures = []
    for count in counts:
        if count < 60:
            continue
        s, i = sw[count], ni[count]
        if not (s["frbank"] > s["hybrid"] >= s["con_offline"]
                and s["greedy"] < min(v for k, v in s.items() if k != "greedy")):
            failures.append(f"welfare@{count}")
        if not i["con_online"] > i["hybrid"] > i["hybrid_o"] > i["frbank"]:
            failures.append(f"interactions@{count}")
    ok = not failures and elapsed < 1800.0
    _criterion("welfare-and-interaction-trends", ok,
               f"orderings hold at every count >= 60 over {len(counts)} counts"
               f" x {n_trials} trials in {elapsed:.0f}s"
               + (f"; violated: {', '.join(failures)}" if failures else ""))


def test_overbooking_demand_trend():
    rates = (0.0, 0.1, 0.2, 0.3)
    n_trials = 30
    series: dict[str, list[float]] = {"frbank": [], "hybrid_o": []}
    for rate in rates:
        cfg = ScenarioConfig(n_mus=100, seed=11, overbook=rate,
                             part_range=(0.64, 0.70),
                             thresholds=RiskThresholds(1.0, 1.0, 1.0, 1.0))
        sc = gen_synthetic(cfg, np.random.default_rng(cfg.seed))
        outcomes = monte_carlo_outcomes(sc, tuple(series), n_trials)
        for s in series:
            series[s].append(float(np.mean([o.rdslc_b for o in outcomes
                                            if o.strategy == s])))
    ok = all(all(a < b for a, b in zip(v, v[1:])) for v in series.values())
    shown = "; ".join(f"{s}=[" + ", ".join(f"{x:.3f}" for x in v) + "]"
                      for s, v in series.items())
    _criterion("overbooking-demand-trend", ok,
               f"realized demand share strictly increases over rates {rates}:"
               f" {shown}")


RISK_PAIRS = (("frbank", "frbank_nor"), ("hybrid_o", "hybrid_o_nor"),
              ("con_offline", "con_offline_nor"))


def test_risk_ablation():
    counts = (30, 50)
    n_trials = 50
    strategies = tuple(s for pair in RISK_PAIRS for s in pair)
    gaps = []
    ok = True
    for count in counts:
        cfg = ScenarioConfig(n_mus=count, seed=0)
        sc = gen_synthetic(cfg, np.random.default_rng(cfg.seed))
        outcomes = monte_carlo_outcomes(sc, strategies, n_trials)
        mean = {s: float(np.mean([o.drlc for o in outcomes if o.strategy == s]))
                for s in strategies}
        for risk, nor in RISK_PAIRS:
            gaps.append(f"{nor}-{risk}@{count}={mean[nor] - mean[risk]:+.4f}")
            ok = ok and mean[nor] > mean[risk]
    _criterion("risk-ablation", ok,
               "default-rate excess of every no-risk variant: " + ", ".join(gaps))


def analytic_round_bound(engine) -> int:
    vals = [float(v) for c in engine.clients
            for v in np.asarray(c.valuation).ravel()]
    mins = [float(v) for c in engine.clients
            for v in np.asarray(c.p_min).ravel()]
    if not vals:
        return 2
    ladder = math.ceil(max(0.0, max(vals) - min(mins)) / engine.cfg.bid_step)
    return 2 + len(engine.clients) * ladder


def test_termination_bound(stability_batch):
    offline_results, _ = stability_batch
    rng = np.random.default_rng(888)
    online_results = []
    for _ in range(30):
        m = random_tiny_market(rng)
        real = sample_realization(m, rng)
        present = [u.id for u in m.users if real.alpha[u.id]]
        residuals = [ResidualSupply(
            bs_id=b.id,
            bandwidth_left=float(rng.uniform(0.3, 1.0)) * b.bandwidth_total,
            power_left=float(rng.uniform(0.3, 1.0)) * b.power_total)
            for b in m.bss]
        online_results.append(run_onebw2m(m, real, present, present, residuals))
    runs = list(offline_results) + online_results
    over = sum(max(r.outcome.run_lengths) > analytic_round_bound(r.engine)
               for r in runs)
    unconverged = sum(not r.certified for r in runs)
    ok = over == 0 and unconverged == 0
    _criterion("termination-bound", ok,
               f"{len(runs)} runs, {over} above 2 + clients x ladder,"
               f" {unconverged} unconverged")
