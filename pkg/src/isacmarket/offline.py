"""Offline trading phase: feasible-solution enumeration over the contract
grids, risk-aware ascending-bid matching with overbooking, and executable
verifiers for individual rationality, blocking pairs, coalition stability,
and local Pareto improvements.

The matching run alternates the deferred-acceptance engine with an exact
deviation probe: any buyer for whom a mutually improving contract exists
against the final station pools is re-entered (its winning deviation is
proposed directly), and rounds resume. A result is certified when the probe
comes back clean, which is the same test the public verifiers apply.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .online import OnlineResult

from .engine import (
    EngineClient,
    EngineConfig,
    EngineStation,
    MatchingEngine,
    MatchingOutcome,
    bs_item_value,
    client_expected_utility,
    client_gate,
    cond_vol,
    default_bid_step,
    knapsack_take,
    risk_repair,
)
from .market import (
    CommContract,
    Expectations,
    Market,
    SensingContract,
    Violation,
    check_feasibility,
    eu_bs_term,
    expect_beta,
    expect_vmax,
    expected_coalition_utility,
    expected_mu_comm_utility,
)
from .values import LinkQuality, comm_value, sensing_value

_EPS = 1e-9


class ProbeBudgetError(RuntimeError):
    """A verification search exceeded its configured budget."""


@dataclass(frozen=True, slots=True)
class MatchConfig:
    """Offline matching knobs. Reservation bids start at p_min_frac of the
    valuation and climb by bid_step (default: bid_step_frac of the mean
    reservation price). Penalty fractions are frozen into contracts at
    signing. probe_evict_limit bounds the eviction-subset search used by the
    stability repair passes (None = exhaustive); certify=False skips the
    probe entirely, which large simulation runs want because its cost grows
    with the pay lattice times the eviction subsets."""

    p_min_frac: float = 0.5
    bid_step: float | None = None
    bid_step_frac: float = 0.01
    pel_u_frac: float = 0.5
    pel_s_frac: float = 0.3
    client_risk: bool = True
    seller_risk: bool = True
    ev_enabled: bool = True
    ev_exact_limit: int = 20
    ev_mc_samples: int = 2000
    seed: int = 0
    certify: bool = True
    stability_passes: int = 8
    probe_evict_limit: int | None = 2
    probe_budget: int = 5_000_000
    round_slack: int = 512

    def __post_init__(self) -> None:
        if not (0.0 < self.p_min_frac <= 1.0):
            raise ValueError("p_min_frac must lie in (0, 1]")
        if self.bid_step is not None and self.bid_step <= 0.0:
            raise ValueError("bid_step must be > 0")


@dataclass(frozen=True, slots=True)
class FeasibleSolution:
    """One candidate contract for a buyer: a station and a grid point, with
    the reservation bid and the expected utility at that bid."""

    kind: str            # "c" link buyer, "s" sensing team
    client_id: int
    bs_id: int
    bandwidth: float
    power: float
    bid: float
    expected_utility: float
    valuation: float     # per-contract price ceiling
    value_total: float   # buyer utility basis (team total for sensing)


@dataclass(frozen=True, slots=True)
class SellerProposal:
    """One proposal as seen by a station's selection step."""

    key: tuple[str, int]
    b_units: int
    p_units: int
    value: float
    e_bandwidth: float
    e_power: float


@dataclass(frozen=True, slots=True)
class BlockingPair:
    kind: str                         # "type1" (evicting) or "type2" (slack)
    client: tuple[str, int]
    bs_id: int
    bandwidth: float
    power: float
    pay: float
    evicted: tuple[tuple[str, int], ...]
    client_gain: float
    bs_gain: float


@dataclass(frozen=True, slots=True)
class ParetoMove:
    client: tuple[str, int]
    bs_id: int
    bandwidth: float
    power: float
    pay: float
    sw_gain: float


@dataclass(frozen=True, slots=True)
class ParetoReport:
    """Welfare-improving single-buyer re-matches; partial means the search
    budget ran out before every candidate was tried."""
    moves: tuple[ParetoMove, ...]
    partial: bool = False


@dataclass
class MatchingState:
    matched: dict[tuple[str, int], int]            # client key -> station id
    per_station: dict[int, list[tuple[str, int]]]
    unmatched: list[tuple[str, int]]


@dataclass
class OfflineResult:
    state: MatchingState
    comm_contracts: list[CommContract]
    sensing_contracts: list[SensingContract]
    expectations: Expectations
    outcome: MatchingOutcome
    certified: bool
    residual_pairs: list[BlockingPair]
    config: MatchConfig
    market: Market = field(repr=False)
    engine: MatchingEngine = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Integer packing units and station capacities


def unit_scales(market: Market) -> tuple[int, int]:
    """Greatest common packing units of the grids: subchannels and
    milliwatts. Grid powers must be exact at milliwatt resolution."""
    g_b = math.gcd(*market.grids.bandwidth_sub)
    mws = []
    for p in market.grids.power_w:
        mw = round(p * 1000.0)
        if mw < 1 or abs(p * 1000.0 - mw) > 1e-6:
            raise ValueError("power grid must be at milliwatt resolution")
        mws.append(mw)
    g_p = math.gcd(*mws)
    return g_b, g_p


def station_caps(market: Market, bs_id: int) -> tuple[int, int]:
    """Overbooked station capacities in packing units (floored: a contract
    set fits iff its exact integer load fits)."""
    bs = market.station(bs_id)
    g_b, g_p = unit_scales(market)
    cap_b = int(math.floor((1.0 + bs.overbook_b) * bs.bandwidth_total
                           / market.b0 / g_b + _EPS))
    cap_p = int(math.floor((1.0 + bs.overbook_p) * bs.power_total * 1000.0
                           / g_p + _EPS))
    return cap_b, cap_p


def _engine_stations(market: Market, cfg: MatchConfig) -> list[EngineStation]:
    th = market.thresholds
    out = []
    for bs in market.bss:
        cap_b, cap_p = station_caps(market, bs.id)
        out.append(EngineStation(
            bs=bs, b_cap_units=cap_b, p_cap_units=cap_p,
            risk_b_cap=th.rho1 * bs.bandwidth_total if cfg.seller_risk else None,
            risk_p_cap=th.rho2 * bs.power_total if cfg.seller_risk else None))
    return out


def _engine_config(market: Market, cfg: MatchConfig, bid_step: float) -> EngineConfig:
    th = market.thresholds
    return EngineConfig(
        bid_step=bid_step, u_min_c=th.u_min_c, u_min_s=th.u_min_s,
        rho3=th.rho3 if cfg.client_risk else None,
        rho4=th.rho4 if cfg.client_risk else None,
        w5=market.weights.omega5, pel_u_frac=cfg.pel_u_frac,
        pel_s_frac=cfg.pel_s_frac, ev_enabled=cfg.ev_enabled,
        ev_exact_limit=cfg.ev_exact_limit, ev_mc_samples=cfg.ev_mc_samples,
        ev_seed=cfg.seed, round_slack=cfg.round_slack)


def client_requirements(market: Market) -> dict[tuple[str, int], float]:
    """Service floors per buyer: the rate requirement for link buyers, the
    largest member accuracy requirement for sensing teams."""
    req: dict[tuple[str, int], float] = {("c", u.id): u.rate_req for u in market.users}
    for co in market.coalitions:
        req[("s", co.id)] = max(market.user(m).sensing_req for m in co.member_ids)
    return req


# ---------------------------------------------------------------------------
# Feasible solutions and preference lists


def enumerate_feasible(market: Market, cfg: MatchConfig, kind: str,
                       client_id: int) -> list[FeasibleSolution]:
    """All grid contracts at every station that fit the station, clear the
    buyer's service floor, and pass the buyer gates at the reservation bid
    (expected utilities taken at zero displacement probability)."""
    ecfg = _engine_config(market, cfg, bid_step=1.0)  # gates ignore the step
    g_b, g_p = unit_scales(market)
    out: list[FeasibleSolution] = []

    if kind == "c":
        user = market.user(client_id)
        presence = user.part_prob
        floor = user.rate_req
    elif kind == "s":
        co = market.coalition(client_id)
        presence = expect_beta(co, market.users)
        floor = max(market.user(m).sensing_req for m in co.member_ids)
    else:
        raise ValueError(f"unknown client kind {kind!r}")

    for bs in market.bss:
        cap_b, cap_p = station_caps(market, bs.id)
        for n_sub in market.grids.bandwidth_sub:
            if n_sub // g_b > cap_b:
                continue
            bandwidth = n_sub * market.b0
            for power in market.grids.power_w:
                if round(power * 1000.0) // g_p > cap_p:
                    continue
                if kind == "c":
                    xi = market.xi.get((client_id, bs.id))
                    if xi is None:
                        continue
                    link = LinkQuality(xi=xi, kappa=0.0)
                    valuation = comm_value(bandwidth, power, link, market.b0,
                                           market.weights)
                    value_total = valuation
                else:
                    per_member = {
                        m: sensing_value(power, bandwidth,
                                         LinkQuality(xi=1.0,
                                                     kappa=market.kappa.get((m, bs.id), 0.0)),
                                         market.weights)
                        for m in co.member_ids}
                    valuation = expect_vmax(co, market.users, per_member)
                    value_total = len(co.member_ids) * valuation
                if valuation + _EPS < floor or valuation <= 0.0:
                    continue
                bid = cfg.p_min_frac * valuation
                ok = client_gate(kind, value_total, bid, valuation, presence,
                                 0.0, ecfg)
                if not bool(np.asarray(ok).reshape(-1)[0]):
                    continue
                e_u = float(client_expected_utility(kind, value_total, bid,
                                                    presence, 0.0, ecfg))
                out.append(FeasibleSolution(
                    kind=kind, client_id=client_id, bs_id=bs.id,
                    bandwidth=bandwidth, power=power, bid=bid,
                    expected_utility=e_u, valuation=valuation,
                    value_total=value_total))
    return out


def build_preference_list(solutions: list[FeasibleSolution]) -> list[FeasibleSolution]:
    """Descending expected utility; ties prefer the lower bid, then the lower
    station id, then less bandwidth, then less power."""
    return sorted(solutions, key=lambda s: (-s.expected_utility, s.bid, s.bs_id,
                                            s.bandwidth, s.power))


def knapsack_select(proposals: list[SellerProposal], b_cap_units: int,
                    p_cap_units: int, *, risk_b_cap: float | None = None,
                    risk_p_cap: float | None = None) -> list[int]:
    """Indices of the station's accepted subset: exact two-capacity knapsack,
    then the seller-risk repair pass when risk caps are given."""
    if not proposals:
        return []
    b_units = np.array([p.b_units for p in proposals], dtype=int)
    p_units = np.array([p.p_units for p in proposals], dtype=int)
    values = np.array([p.value for p in proposals])
    mask = knapsack_take(b_units, p_units, values, b_cap_units, p_cap_units)
    if risk_b_cap is not None and mask.any():
        e_bw = np.array([p.e_bandwidth for p in proposals])
        e_pw = np.array([p.e_power for p in proposals])
        keys = [p.key for p in proposals]
        mask = risk_repair(mask, e_bw, e_pw, values, keys, risk_b_cap,
                           risk_p_cap if risk_p_cap is not None else math.inf)
    return np.nonzero(mask)[0].tolist()


def _to_engine_clients(market: Market, feasible: dict[tuple[str, int], list[FeasibleSolution]],
                       stations: list[EngineStation]) -> list[EngineClient]:
    bs_index = {st.bs.id: j for j, st in enumerate(stations)}
    g_b, g_p = unit_scales(market)
    presence_of = {("c", u.id): u.part_prob for u in market.users}
    presence_of.update({("s", co.id): expect_beta(co, market.users)
                        for co in market.coalitions})
    clients = []
    for key in sorted(feasible):
        sols = feasible[key]
        kind, cid = key
        clients.append(EngineClient(
            kind=kind, cid=cid, presence=presence_of[key],
            bs_idx=np.array([bs_index[s.bs_id] for s in sols], dtype=int),
            b_units=np.array([round(s.bandwidth / market.b0) // g_b for s in sols],
                             dtype=int),
            p_units=np.array([round(s.power * 1000.0) // g_p for s in sols],
                             dtype=int),
            bandwidth=np.array([s.bandwidth for s in sols]),
            power=np.array([s.power for s in sols]),
            valuation=np.array([s.valuation for s in sols]),
            value_total=np.array([s.value_total for s in sols]),
            p_min=np.array([s.bid for s in sols])))
    return clients


# ---------------------------------------------------------------------------
# Deviation probe shared by stability repair and the public verifiers


@dataclass
class _Budget:
    remaining: int

    def spend(self, n: int) -> None:
        self.remaining -= n
        if self.remaining < 0:
            raise ProbeBudgetError("verification search budget exceeded")


@dataclass
class _StationPool:
    members: list[tuple[int, int]]     # (client index, sol index)
    b_units: np.ndarray
    p_units: np.ndarray
    e_bw: np.ndarray
    e_pw: np.ndarray
    values: np.ndarray


def _station_pools(eng: MatchingEngine) -> list[_StationPool]:
    pools = []
    for j in range(len(eng.stations)):
        members = sorted(eng.incumbents[j],
                         key=lambda m: (eng.clients[m[0]].kind, eng.clients[m[0]].cid))
        b_units, p_units, e_bw, e_pw, values = [], [], [], [], []
        for ci, sol in members:
            c = eng.clients[ci]
            pay = float(eng.bids[ci][sol])
            evc = float(cond_vol(eng.ev[ci, j], c.presence))
            b_units.append(int(c.b_units[sol]))
            p_units.append(int(c.p_units[sol]))
            e_bw.append(c.presence * float(c.bandwidth[sol]))
            e_pw.append(c.presence * float(c.power[sol]))
            values.append(float(bs_item_value(pay, float(c.power[sol]),
                                              c.presence, evc, eng.cfg)))
        pools.append(_StationPool(
            members=members, b_units=np.array(b_units, dtype=int),
            p_units=np.array(p_units, dtype=int), e_bw=np.array(e_bw),
            e_pw=np.array(e_pw), values=np.array(values)))
    return pools


def _eviction_combos(n: int, size: int) -> np.ndarray:
    if size == 0:
        return np.zeros((1, 0), dtype=int)
    if size == 1:
        return np.arange(n, dtype=int)[:, None]
    if size == 2:
        iu = np.triu_indices(n, 1)
        return np.stack(iu, axis=1).astype(int)
    combos = list(itertools.combinations(range(n), size))
    return np.array(combos, dtype=int).reshape(-1, size)


def _accept_deviation(pool: _StationPool, stn: EngineStation, exclude_ci: int,
                      ent_b: int, ent_p: int, ent_eb: float, ent_ep: float,
                      ent_v: float, evict_limit: int | None, budget: _Budget,
                      own_value: float = 0.0,
                      ) -> tuple[list[tuple[int, int]], float] | None:
    """Smallest eviction set (then largest gain) that makes the entrant fit
    the station's capacities and risk caps with a strict seller improvement;
    None when no such set exists. The entrant's own current item at this
    station, if any, is excluded from the pool first; its value enters the
    baseline via own_value so a contract switch is judged by its net effect."""
    keep = [k for k, (ci, _s) in enumerate(pool.members) if ci != exclude_ci]
    b = pool.b_units[keep]
    p = pool.p_units[keep]
    eb = pool.e_bw[keep]
    ep = pool.e_pw[keep]
    v = pool.values[keep]
    n = len(keep)
    used_b, used_p = int(b.sum()), int(p.sum())
    cur_eb, cur_ep = float(eb.sum()), float(ep.sum())
    gain_tol = _EPS * (1.0 + float(np.abs(v).sum()) + abs(ent_v))

    if evict_limit is None and n > 20:
        raise ProbeBudgetError("exhaustive eviction search limited to 20 items")
    max_size = n if evict_limit is None else min(evict_limit, n)

    for size in range(0, max_size + 1):
        combos = _eviction_combos(n, size)
        if combos.shape[0] == 0:
            continue
        budget.spend(combos.shape[0])
        if size == 0:
            sb = np.zeros(1, dtype=int)
            sp = np.zeros(1, dtype=int)
            seb = np.zeros(1)
            sep = np.zeros(1)
            sv = np.zeros(1)
        else:
            sb = b[combos].sum(axis=1)
            sp = p[combos].sum(axis=1)
            seb = eb[combos].sum(axis=1)
            sep = ep[combos].sum(axis=1)
            sv = v[combos].sum(axis=1)
        ok = ((used_b - sb + ent_b <= stn.b_cap_units)
              & (used_p - sp + ent_p <= stn.p_cap_units))
        if stn.risk_b_cap is not None:
            ok &= (cur_eb - seb + ent_eb
                   <= stn.risk_b_cap + _EPS * (1.0 + stn.risk_b_cap))
            ok &= (cur_ep - sep + ent_ep
                   <= stn.risk_p_cap + _EPS * (1.0 + stn.risk_p_cap))
        gain = ent_v - own_value - sv
        ok &= gain > gain_tol
        if ok.any():
            hits = np.nonzero(ok)[0]
            best = hits[np.argmax(gain[hits])]
            evicted = [pool.members[keep[t]] for t in combos[best]]
            return evicted, float(gain[best])
    return None


def _lattice_pays(p_min: float, cap: float, step: float) -> np.ndarray:
    if cap < p_min - _EPS * (1.0 + abs(cap)):
        return np.empty(0)
    n_steps = int(math.floor((cap - p_min) / step + _EPS))
    pays = p_min + step * np.arange(n_steps + 1)
    if pays[-1] < cap - _EPS * (1.0 + abs(cap)):
        pays = np.append(pays, cap)
    return pays


def _probe_deviations(eng: MatchingEngine, *, evict_limit: int | None,
                      budget: int, kinds: tuple[str, ...] = ("type1", "type2"),
                      best_per_client: bool = False,
                      ) -> list[tuple[int, int, float, BlockingPair]]:
    """Exact blocking-pair search against the engine's current state. Returns
    (client index, sol index, pay, pair) tuples. A pair exists when a
    candidate contract priced at the buyer's quote is strictly better for the
    buyer than its held position and some eviction set makes the station
    strictly better as well. A matched buyer's quote for a candidate is its
    standing bid; an unmatched buyer holds no standing quote, so it re-enters
    from the floor and its quote ranges over the whole pay lattice. Pays a
    buyer prefers form a prefix of the lattice (its utility falls with pay)
    and station acceptance is monotone in pay, so the buyer-best witness is
    the lowest accepted pay, found by bisection."""
    bud = _Budget(budget)
    pools = _station_pools(eng)
    found: list[tuple[int, int, float, BlockingPair]] = []

    for i, c in enumerate(eng.clients):
        acc = eng.accepted_solution(i)
        own_v = 0.0
        if acc is not None:
            j0, s0 = acc
            base = float(client_expected_utility(
                c.kind, float(c.value_total[s0]), float(eng.bids[i][s0]),
                c.presence, float(cond_vol(eng.ev[i, j0], c.presence)), eng.cfg))
            for k_m, (ci, _s) in enumerate(pools[j0].members):
                if ci == i:
                    own_v = float(pools[j0].values[k_m])
                    break
        else:
            j0, s0 = -1, -1
            base = 0.0
        base_tol = _EPS * (1.0 + abs(base))
        best: tuple[float, int, float, BlockingPair] | None = None

        for s in range(len(c.p_min)):
            if acc is not None and s == s0:
                continue
            j = int(c.bs_idx[s])
            if acc is not None:
                pays = np.array([float(eng.bids[i][s])])
            else:
                pays = _lattice_pays(float(c.p_min[s]), float(c.valuation[s]),
                                     eng.cfg.bid_step)
            if len(pays) == 0:
                continue
            bud.spend(len(pays))
            ev_e = float(cond_vol(eng.ev[i, j], c.presence))
            gates = np.asarray(client_gate(
                c.kind, float(c.value_total[s]), pays, float(c.valuation[s]),
                c.presence, ev_e, eng.cfg))
            e_us = np.asarray(client_expected_utility(
                c.kind, float(c.value_total[s]), pays, c.presence, ev_e,
                eng.cfg))
            pref = np.flatnonzero(gates & (e_us > base + base_tol))
            if len(pref) == 0:
                continue

            def _accept_at(k: int, _s=s, _j=j, _pays=pays, _ev=ev_e):
                ent_v = float(bs_item_value(float(_pays[k]),
                                            float(c.power[_s]), c.presence,
                                            _ev, eng.cfg))
                if ent_v <= _EPS:
                    return None
                return _accept_deviation(
                    pools[_j], eng.stations[_j], i, int(c.b_units[_s]),
                    int(c.p_units[_s]), c.presence * float(c.bandwidth[_s]),
                    c.presence * float(c.power[_s]), ent_v, evict_limit, bud,
                    own_value=own_v if _j == j0 else 0.0)

            lo, hi = 0, len(pref) - 1
            hit: tuple[int, tuple[list[tuple[int, int]], float]] | None = None
            while lo <= hi:
                mid = (lo + hi) // 2
                res = _accept_at(int(pref[mid]))
                if res is not None:
                    hit = (int(pref[mid]), res)
                    hi = mid - 1
                else:
                    lo = mid + 1
            if hit is None:
                continue
            k_pay, (evicted, bs_gain) = hit
            pkind = "type2" if not evicted else "type1"
            if pkind not in kinds:
                continue
            pay = float(pays[k_pay])
            pair = BlockingPair(
                kind=pkind, client=(c.kind, c.cid),
                bs_id=eng.stations[j].bs.id, bandwidth=float(c.bandwidth[s]),
                power=float(c.power[s]), pay=pay,
                evicted=tuple((eng.clients[ci].kind, eng.clients[ci].cid)
                              for ci, _s in evicted),
                client_gain=float(e_us[k_pay]) - base, bs_gain=bs_gain)
            if not best_per_client:
                found.append((i, s, pay, pair))
            elif best is None or pair.client_gain > best[0]:
                best = (pair.client_gain, s, pay, pair)
        if best_per_client and best is not None:
            found.append((i, best[1], best[2], best[3]))
    return found


# ---------------------------------------------------------------------------
# The offline matching run


def run_offrfw2m(market: Market, cfg: MatchConfig | None = None) -> OfflineResult:
    """Risk-aware forward matching for long-term contracts. Buyers are link
    clients and sensing teams; stations select by exact knapsack with seller
    risk repair; converged states are probe-repaired until no blocking pair
    survives (certified) or the pass budget runs out."""
    cfg = cfg if cfg is not None else MatchConfig()
    stations = _engine_stations(market, cfg)

    feasible: dict[tuple[str, int], list[FeasibleSolution]] = {}
    for u in market.users:
        sols = enumerate_feasible(market, cfg, "c", u.id)
        if sols:
            feasible[("c", u.id)] = build_preference_list(sols)
    for co in market.coalitions:
        sols = enumerate_feasible(market, cfg, "s", co.id)
        if sols:
            feasible[("s", co.id)] = build_preference_list(sols)

    clients = _to_engine_clients(market, feasible, stations)
    bid_step = cfg.bid_step if cfg.bid_step is not None else default_bid_step(
        clients, cfg.bid_step_frac)
    ecfg = _engine_config(market, cfg, bid_step)
    eng = MatchingEngine(clients, stations, ecfg)
    eng.run()
    if cfg.certify:
        residual = repair_to_stability(eng, passes=cfg.stability_passes,
                                       evict_limit=cfg.probe_evict_limit,
                                       budget=cfg.probe_budget)
    else:
        residual = []

    outcome = eng.outcome()
    comm: list[CommContract] = []
    sense: list[SensingContract] = []
    matched: dict[tuple[str, int], int] = {}
    per_station: dict[int, list[tuple[str, int]]] = {st.bs.id: [] for st in stations}
    for a in outcome.accepted:
        key = (a.kind, a.client_id)
        matched[key] = a.bs_id
        per_station[a.bs_id].append(key)
        if a.kind == "c":
            comm.append(CommContract(
                mu_id=a.client_id, bs_id=a.bs_id, bandwidth=a.bandwidth,
                power=a.power, pay=a.pay, pel_u=cfg.pel_u_frac * a.pay,
                pel_s=cfg.pel_s_frac * a.pay, value=a.valuation))
        else:
            co = market.coalition(a.client_id)
            sense.append(SensingContract(
                coalition_id=a.client_id, bs_id=a.bs_id, bandwidth=a.bandwidth,
                power=a.power, pay=a.pay, pel_u=cfg.pel_u_frac * a.pay,
                pel_s=cfg.pel_s_frac * a.pay, value_max=a.valuation,
                n_members=len(co.member_ids)))

    all_keys = [("c", u.id) for u in market.users]
    all_keys += [("s", co.id) for co in market.coalitions]
    unmatched = [k for k in all_keys if k not in matched]

    exp = Expectations(
        e_alpha={u.id: u.part_prob for u in market.users},
        e_beta={co.id: expect_beta(co, market.users) for co in market.coalitions},
        e_vol=outcome.e_vol)

    return OfflineResult(
        state=MatchingState(matched=matched, per_station=per_station,
                            unmatched=unmatched),
        comm_contracts=comm, sensing_contracts=sense, expectations=exp,
        outcome=outcome, certified=cfg.certify and not residual,
        residual_pairs=residual, config=cfg, market=market, engine=eng)


def repair_to_stability(eng: MatchingEngine, *, passes: int,
                        evict_limit: int | None,
                        budget: int) -> list[BlockingPair]:
    """Serial stability repair on a converged engine: probe for deviations
    and force one witness per pass. Safe fills (a slack pair for an unmatched
    buyer adds a contract without displacing anyone) go first; otherwise the
    largest buyer gain, avoiding already-forced seats. Forcing one at a time
    keeps concurrent pairs from chasing each other through the same station.
    Returns the residual pairs (empty = stable)."""
    residual: list[tuple[int, int, float, BlockingPair]] = []
    forced: dict[tuple[int, int], int] = {}
    for n_pass in range(passes + 1):
        residual = _probe_deviations(eng, evict_limit=evict_limit,
                                     budget=budget, best_per_client=True)
        if not residual or n_pass == passes:
            break

        def _priority(item: tuple[int, int, float, BlockingPair]):
            i, s, _pay, pair = item
            safe = pair.kind == "type2" and eng.accepted_solution(i) is None
            return (forced.get((i, s), 0), 0 if safe else 1,
                    -pair.client_gain, i, s)

        i, s, pay, _pair = min(residual, key=_priority)
        forced[(i, s)] = forced.get((i, s), 0) + 1
        eng.reset_client(i, force_sol=s, force_bid=pay)
        eng.run()
    return [p for _i, _s, _pay, p in residual]


# ---------------------------------------------------------------------------
# Public verifiers


def find_blocking_pairs(result: OfflineResult | OnlineResult,
                        kind: str = "both", *,
                        evict_limit: int | None = None,
                        budget: int = 5_000_000) -> list[BlockingPair]:
    """Blocking pairs against the final matching of a long-term or backup
    run. kind selects "type1" (eviction required), "type2" (fits slack
    capacity), or "both". The default eviction search is exhaustive; raise
    the budget or set a limit for larger instances."""
    if kind == "both":
        kinds: tuple[str, ...] = ("type1", "type2")
    elif kind in ("type1", "type2"):
        kinds = (kind,)
    else:
        raise ValueError(f"unknown blocking-pair kind {kind!r}")
    hits = _probe_deviations(result.engine, evict_limit=evict_limit,
                             budget=budget, kinds=kinds)
    return [p for _i, _s, _pay, p in hits]


def check_individual_rationality(result: OfflineResult) -> list[Violation]:
    """Constraint audit of the signed contracts plus expected-utility floors
    for every participant; an empty report certifies individual rationality."""
    market = result.market
    cfg = result.config
    th = market.thresholds
    exp = result.expectations
    out = check_feasibility(market, result.comm_contracts,
                            result.sensing_contracts, exp, risk_checks=True,
                            requirements=client_requirements(market))
    if not cfg.client_risk:
        out = [v for v in out if v.constraint != "buyer-risk"]
    if not cfg.seller_risk:
        out = [v for v in out if v.constraint not in ("seller-risk-b", "seller-risk-p")]

    w5 = market.weights.omega5
    for c in result.comm_contracts:
        e_u = expected_mu_comm_utility(c, exp)
        if e_u < th.u_min_c - _EPS * (1.0 + abs(th.u_min_c)):
            out.append(Violation("ir-floor", f"mu:{c.mu_id}/bs:{c.bs_id}",
                                 f"expected utility {e_u:.4g} below floor"))
        e_a = exp.e_alpha[c.mu_id]
        v_bs = float(eu_bs_term(c.pay, w5 * c.power, c.pel_u, c.pel_s, e_a,
                                exp.vol_given_present("c", c.mu_id, c.bs_id, e_a)))
        if v_bs < -_EPS:
            out.append(Violation("seller-ir", f"mu:{c.mu_id}/bs:{c.bs_id}",
                                 f"station expected term {v_bs:.4g} negative"))
    for s in result.sensing_contracts:
        e_u = expected_coalition_utility(s, exp)
        if e_u < th.u_min_s - _EPS * (1.0 + abs(th.u_min_s)):
            out.append(Violation("ir-floor", f"coalition:{s.coalition_id}/bs:{s.bs_id}",
                                 f"expected utility {e_u:.4g} below floor"))
        e_b = exp.e_beta[s.coalition_id]
        v_bs = float(eu_bs_term(s.pay, w5 * s.power, s.pel_u, s.pel_s, e_b,
                                exp.vol_given_present("s", s.coalition_id, s.bs_id, e_b)))
        if v_bs < -_EPS:
            out.append(Violation("seller-ir",
                                 f"coalition:{s.coalition_id}/bs:{s.bs_id}",
                                 f"station expected term {v_bs:.4g} negative"))
    return out


def check_coalition_stability(result: OfflineResult, *,
                              evict_limit: int | None = None,
                              budget: int = 5_000_000) -> list[Violation]:
    """Per-member rationality of team contracts under the equal pay split:
    each member's share must clear the floor and weakly beat every singleton
    sensing deviation a station would accept."""
    market = result.market
    cfg = result.config
    eng = result.engine
    th = market.thresholds
    bud = _Budget(budget)
    pools = _station_pools(eng)
    bs_index = {st.bs.id: j for j, st in enumerate(eng.stations)}
    by_coalition = {s.coalition_id: s for s in result.sensing_contracts}
    out: list[Violation] = []

    for co in market.coalitions:
        k = len(co.member_ids)
        sc = by_coalition.get(co.id)
        if sc is not None:
            share = expected_coalition_utility(sc, result.expectations) / k
            if share < th.u_min_s - _EPS * (1.0 + abs(th.u_min_s)):
                out.append(Violation("member-floor", f"coalition:{co.id}",
                                     f"per-member share {share:.4g} below floor"))
        else:
            share = 0.0
        share_tol = _EPS * (1.0 + abs(share))

        # A one-member team has no one to defect from: trading alone is the
        # same agent with the same footprint and candidate set, so it is
        # already covered by the individual rationality and blocking-pair
        # checks. Splitting only changes anything for teams of two or more.
        if k < 2:
            continue
        for m in co.member_ids:
            user = market.user(m)
            dev = _best_singleton_deviation(market, cfg, eng, pools, bs_index,
                                            user, share + share_tol,
                                            evict_limit, bud)
            if dev is not None:
                bs_id, e_u = dev
                out.append(Violation(
                    "coalition-split", f"coalition:{co.id}/mu:{m}",
                    f"member gains {e_u:.4g} > share {share:.4g} trading alone"
                    f" at bs:{bs_id}"))
    return out


def _best_singleton_deviation(market: Market, cfg: MatchConfig,
                              eng: MatchingEngine, pools: list[_StationPool],
                              bs_index: dict[int, int], user, threshold: float,
                              evict_limit: int | None, budget: _Budget,
                              ) -> tuple[int, float] | None:
    """A station-accepted singleton sensing contract giving the member a
    strictly better expected utility than the threshold, or None."""
    g_b, g_p = unit_scales(market)
    presence = user.part_prob
    for bs in market.bss:
        j = bs_index[bs.id]
        stn = eng.stations[j]
        for n_sub in market.grids.bandwidth_sub:
            b_units = n_sub // g_b
            if b_units > stn.b_cap_units:
                continue
            bandwidth = n_sub * market.b0
            for power in market.grids.power_w:
                p_units = round(power * 1000.0) // g_p
                if p_units > stn.p_cap_units:
                    continue
                kappa = market.kappa.get((user.id, bs.id), 0.0)
                value = sensing_value(power, bandwidth,
                                      LinkQuality(xi=1.0, kappa=kappa),
                                      market.weights)
                valuation = presence * value
                if valuation + _EPS < user.sensing_req or valuation <= 0.0:
                    continue
                pays = _lattice_pays(cfg.p_min_frac * valuation, valuation,
                                     eng.cfg.bid_step)
                if len(pays) == 0:
                    continue
                budget.spend(len(pays))
                gates = np.asarray(client_gate("s", valuation, pays, valuation,
                                               presence, 0.0, eng.cfg))
                e_us = np.asarray(client_expected_utility("s", valuation, pays,
                                                          presence, 0.0, eng.cfg))
                pref = gates & (e_us > threshold)
                # Member utility falls with pay, so scanning pays upward and
                # stopping at the first station-accepted one yields the best
                # deviation the member can actually land.
                for k in np.flatnonzero(pref):
                    ent_v = float(bs_item_value(float(pays[k]), power, presence,
                                                0.0, eng.cfg))
                    if ent_v <= _EPS:
                        continue
                    res = _accept_deviation(pools[j], stn, -1, int(b_units),
                                            int(p_units), presence * bandwidth,
                                            presence * power, ent_v, evict_limit,
                                            budget)
                    if res is not None:
                        return bs.id, float(e_us[k])
    return None


def local_pareto_probe(result: OfflineResult, *,
                       budget: int = 1_000_000) -> ParetoReport:
    """Single-buyer re-matches (any buyer moved to any candidate solution,
    with the evictions its footprint requires) that strictly raise total
    expected social welfare. Transfers cancel buyer-station-wise, so each
    contract contributes presence * (1 - e_v) * (value_total - w5 * power),
    and both evicted contracts and the mover's abandoned one count against
    the move. Reported pays sit at the candidate's floor; any gate-valid pay
    yields the same welfare gain. Exhausting the budget returns whatever was
    found so far with the report marked partial instead of raising."""
    eng = result.engine
    bud = _Budget(budget)
    pools = _station_pools(eng)
    w5 = eng.cfg.w5
    moves: list[ParetoMove] = []

    def contract_sw(presence: float, ev_cond: float, value_total: float,
                    power: float) -> float:
        return presence * (1.0 - ev_cond) * (value_total - w5 * power)

    sw_pools: list[_StationPool] = []
    for j, pool in enumerate(pools):
        sw_vals = [contract_sw(
            eng.clients[ci].presence,
            float(cond_vol(eng.ev[ci, j], eng.clients[ci].presence)),
            float(eng.clients[ci].value_total[sol]),
            float(eng.clients[ci].power[sol])) for ci, sol in pool.members]
        sw_pools.append(_StationPool(
            members=pool.members, b_units=pool.b_units, p_units=pool.p_units,
            e_bw=pool.e_bw, e_pw=pool.e_pw, values=np.asarray(sw_vals)))

    try:
        for i, c in enumerate(eng.clients):
            acc = eng.accepted_solution(i)
            own_sw = 0.0
            if acc is not None:
                j0, s0 = acc
                own_sw = contract_sw(
                    c.presence, float(cond_vol(eng.ev[i, j0], c.presence)),
                    float(c.value_total[s0]), float(c.power[s0]))
            else:
                j0, s0 = -1, -1
            for s in range(len(c.p_min)):
                if acc is not None and s == s0:
                    continue
                j = int(c.bs_idx[s])
                bud.spend(1)
                p_min = float(c.p_min[s])
                ev_e = float(cond_vol(eng.ev[i, j], c.presence))
                gate = np.asarray(client_gate(
                    c.kind, float(c.value_total[s]), p_min,
                    float(c.valuation[s]), c.presence, ev_e, eng.cfg))
                if not bool(gate.reshape(-1)[0]):
                    continue
                sw_new = contract_sw(c.presence, ev_e, float(c.value_total[s]),
                                     float(c.power[s]))
                res = _accept_deviation(
                    sw_pools[j], eng.stations[j], i, int(c.b_units[s]),
                    int(c.p_units[s]), c.presence * float(c.bandwidth[s]),
                    c.presence * float(c.power[s]), sw_new, None, bud,
                    own_value=own_sw)
                if res is None:
                    continue
                _evicted, sw_gain = res
                moves.append(ParetoMove(
                    client=(c.kind, c.cid), bs_id=eng.stations[j].bs.id,
                    bandwidth=float(c.bandwidth[s]), power=float(c.power[s]),
                    pay=p_min, sw_gain=sw_gain))
                break
    except ProbeBudgetError:
        return ParetoReport(moves=tuple(moves), partial=True)
    return ParetoReport(moves=tuple(moves))
