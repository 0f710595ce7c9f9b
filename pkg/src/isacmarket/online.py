"""Practical-transaction machinery: participation sampling, greedy volunteer
selection under realized overdemand, residual-supply accounting, and the
backup matcher that signs temporary contracts.

Online trading runs after participation is realized, so everything here uses
realized quantities: a buyer's utility is its served value minus its pay, a
station's is the sum of pays it receives, and capacities are whatever supply
the executed long-term contracts left over. The backup matcher reuses the
ascending-bid engine with presence pinned to 1, displacement and risk
disabled, and zero penalty fractions, which reduces the engine's expected
utilities to exactly these realized forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import (
    EngineClient,
    EngineConfig,
    EngineStation,
    MatchingEngine,
    MatchingOutcome,
    default_bid_step,
)
from .market import (
    BaseStation,
    Coalition,
    CommContract,
    ContractLoad,
    Market,
    Realization,
    SensingContract,
    TempContract,
    form_coalitions,
    volunteer_flags,
    volunteer_order,
)
from .offline import (
    BlockingPair,
    MatchingState,
    repair_to_stability,
    unit_scales,
)
from .values import LinkQuality, comm_value, sensing_value

_EPS = 1e-9


@dataclass(frozen=True, slots=True)
class ResidualSupply:
    """Supply a station still has after serving realized long-term demand."""

    bs_id: int
    bandwidth_left: float
    power_left: float

    def __post_init__(self) -> None:
        if self.bandwidth_left < 0.0 or self.power_left < 0.0:
            raise ValueError("residual supply must be >= 0")


@dataclass(frozen=True, slots=True)
class VolunteerDecision:
    """Clients a station pays to forgo service this transaction, in removal
    order; compensation_paid totals their displacement compensations."""

    bs_id: int
    volunteers: tuple[tuple[str, int], ...]
    compensation_paid: float


@dataclass(frozen=True, slots=True)
class OnlineConfig:
    """Backup matching knobs. Reservation bids start at p_min_frac of the
    realized valuation; the bid step defaults to bid_step_frac of the mean
    reservation price unless the long-term step is passed through.
    certify=False skips the post-run stability probe, whose cost grows too
    fast for per-trial use at simulation scale."""

    p_min_frac: float = 0.8
    bid_step: float | None = None
    bid_step_frac: float = 0.01
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


@dataclass
class OnlineResult:
    state: MatchingState
    temp_contracts: list[TempContract]
    coalitions: list[Coalition]        # teams re-formed from present buyers
    outcome: MatchingOutcome
    certified: bool
    residual_pairs: list[BlockingPair]
    config: OnlineConfig
    engine: MatchingEngine = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# Realization and volunteer selection


def sample_realization(market: Market, rng: np.random.Generator) -> Realization:
    """Draw one participation outcome: each user shows up independently with
    its participation probability; a team participates iff any member does."""
    alpha = {u.id: int(rng.random() < u.part_prob) for u in market.users}
    beta = {co.id: int(any(alpha[m] for m in co.member_ids))
            for co in market.coalitions}
    return Realization(alpha=alpha, beta=beta)


def realized_loads(bs: BaseStation, comm: Iterable[CommContract],
                   sense: Iterable[SensingContract],
                   realization: Realization) -> list[ContractLoad]:
    """Per-contract realized loads at one station, ready for volunteer
    selection; absent clients carry presence 0 and hold no resources."""
    loads: list[ContractLoad] = []
    for c in comm:
        if c.bs_id == bs.id:
            loads.append(ContractLoad(
                key=("c", c.mu_id, bs.id),
                presence=float(realization.alpha[c.mu_id]),
                bandwidth=c.bandwidth, power=c.power, pel_s=c.pel_s))
    for s in sense:
        if s.bs_id == bs.id:
            loads.append(ContractLoad(
                key=("s", s.coalition_id, bs.id),
                presence=float(realization.beta[s.coalition_id]),
                bandwidth=s.bandwidth, power=s.power, pel_s=s.pel_s))
    return loads


def select_volunteers(bs: BaseStation,
                      loads: Sequence[ContractLoad]) -> VolunteerDecision:
    """Greedy displacement when realized demand exceeds either supply:
    remove present contracts in ascending compensation per unit of binding
    capacity stress until everything left fits. Empty when demand fits."""
    if not loads:
        return VolunteerDecision(bs_id=bs.id, volunteers=(),
                                 compensation_paid=0.0)
    order = volunteer_order(loads, bs.bandwidth_total, bs.power_total)
    pres = np.array([[loads[i].presence for i in order]])
    bw = np.array([loads[i].bandwidth for i in order])
    pw = np.array([loads[i].power for i in order])
    flags = volunteer_flags(pres, bw, pw, bs.bandwidth_total,
                            bs.power_total)[0]
    chosen = [loads[order[j]] for j in np.flatnonzero(flags)]
    return VolunteerDecision(
        bs_id=bs.id,
        volunteers=tuple((ld.key[0], ld.key[1]) for ld in chosen),
        compensation_paid=float(sum(ld.pel_s for ld in chosen)))


def apply_volunteers(realization: Realization,
                     decisions: Iterable[VolunteerDecision]) -> Realization:
    """Record volunteer picks on the realization so the realized utility
    formulas see the displacement compensations; returns the same object."""
    for d in decisions:
        for kind, cid in d.volunteers:
            if kind == "c":
                realization.volunteers_c[(cid, d.bs_id)] = 1
            else:
                realization.volunteers_s[(cid, d.bs_id)] = 1
    return realization


def residual_supply(bs: BaseStation, loads: Sequence[ContractLoad],
                    decision: VolunteerDecision) -> ResidualSupply:
    """Supply left after the present, non-volunteer contracts are served."""
    vol = set(decision.volunteers)
    served_b = served_p = 0.0
    for ld in loads:
        if ld.presence > 0.0 and (ld.key[0], ld.key[1]) not in vol:
            served_b += ld.bandwidth
            served_p += ld.power
    return ResidualSupply(
        bs_id=bs.id,
        bandwidth_left=max(0.0, bs.bandwidth_total - served_b),
        power_left=max(0.0, bs.power_total - served_p))


# ---------------------------------------------------------------------------
# Backup matching


def _online_clients(market: Market, comm_users: Sequence[int],
                    teams: list[Coalition], stations: list[EngineStation],
                    p_min_frac: float) -> list[EngineClient]:
    """Candidate tables over the residual stations with realized valuations:
    link value for users, team-size times the best present member's sensing
    value for teams. Candidates must clear the service floor and fit the
    station's leftover units."""
    g_b, g_p = unit_scales(market)
    specs: list[tuple[str, int, float]] = []
    specs += [("c", uid, market.user(uid).rate_req) for uid in comm_users]
    specs += [("s", co.id,
               max(market.user(m).sensing_req for m in co.member_ids))
              for co in teams]
    team_by_id = {co.id: co for co in teams}

    clients: list[EngineClient] = []
    for kind, cid, floor in sorted(specs):
        rows: list[tuple[int, int, int, float, float, float, float]] = []
        for j, st in enumerate(stations):
            bs = st.bs
            for n_sub in market.grids.bandwidth_sub:
                b_units = n_sub // g_b
                if b_units > st.b_cap_units:
                    continue
                bandwidth = n_sub * market.b0
                for power in market.grids.power_w:
                    p_units = round(power * 1000.0) // g_p
                    if p_units > st.p_cap_units:
                        continue
                    if kind == "c":
                        xi = market.xi.get((cid, bs.id))
                        if xi is None:
                            continue
                        valuation = comm_value(bandwidth, power,
                                               LinkQuality(xi=xi, kappa=0.0),
                                               market.b0, market.weights)
                        value_total = valuation
                    else:
                        co = team_by_id[cid]
                        valuation = max(
                            sensing_value(power, bandwidth,
                                          LinkQuality(xi=1.0,
                                                      kappa=market.kappa.get(
                                                          (m, bs.id), 0.0)),
                                          market.weights)
                            for m in co.member_ids)
                        value_total = len(co.member_ids) * valuation
                    if valuation + _EPS < floor or valuation <= 0.0:
                        continue
                    rows.append((j, b_units, p_units, bandwidth, power,
                                 valuation, value_total))
        if not rows:
            continue
        arr = list(zip(*rows))
        valuation = np.array(arr[5])
        clients.append(EngineClient(
            kind=kind, cid=cid, presence=1.0,
            bs_idx=np.array(arr[0], dtype=int),
            b_units=np.array(arr[1], dtype=int),
            p_units=np.array(arr[2], dtype=int),
            bandwidth=np.array(arr[3]), power=np.array(arr[4]),
            valuation=valuation, value_total=np.array(arr[6]),
            p_min=p_min_frac * valuation))
    return clients


def run_onebw2m(market: Market, realization: Realization,
                comm_users: Sequence[int], sensing_users: Sequence[int],
                residuals: Sequence[ResidualSupply],
                cfg: OnlineConfig | None = None) -> OnlineResult:
    """Backup matching for buyers the long-term contracts left unserved.

    comm_users and sensing_users name the present users still needing link
    and team service; sensing teams are re-formed from the present users by
    shared target, so an entirely absent team simply does not trade. Buyers
    bid up from p_min_frac of their realized valuations against stations
    whose capacities are the residual supplies; stations select by the same
    exact knapsack, and converged states are probe-repaired exactly like the
    long-term matcher."""
    cfg = cfg if cfg is not None else OnlineConfig()
    comm_users = sorted(set(comm_users))
    sensing_users = sorted(set(sensing_users))
    for uid in comm_users + sensing_users:
        if not realization.alpha.get(uid, 0):
            raise ValueError(f"user {uid} is not present in this realization")

    g_b, g_p = unit_scales(market)
    stations = []
    for r in residuals:
        bs = market.station(r.bs_id)
        stations.append(EngineStation(
            bs=bs,
            b_cap_units=int((r.bandwidth_left / market.b0 + _EPS) // g_b),
            p_cap_units=int((r.power_left * 1000.0 + _EPS) // g_p),
            risk_b_cap=None, risk_p_cap=None))

    teams = form_coalitions([market.user(uid) for uid in sensing_users])
    clients = _online_clients(market, comm_users, teams, stations,
                              cfg.p_min_frac)
    bid_step = cfg.bid_step if cfg.bid_step is not None else default_bid_step(
        clients, cfg.bid_step_frac)
    ecfg = EngineConfig(bid_step=bid_step, round_slack=cfg.round_slack)
    eng = MatchingEngine(clients, stations, ecfg)
    eng.run()
    if cfg.certify:
        residual = repair_to_stability(eng, passes=cfg.stability_passes,
                                       evict_limit=cfg.probe_evict_limit,
                                       budget=cfg.probe_budget)
    else:
        residual = []

    outcome = eng.outcome()
    temp: list[TempContract] = []
    matched: dict[tuple[str, int], int] = {}
    per_station: dict[int, list[tuple[str, int]]] = {st.bs.id: []
                                                     for st in stations}
    for a in outcome.accepted:
        key = (a.kind, a.client_id)
        matched[key] = a.bs_id
        per_station[a.bs_id].append(key)
        temp.append(TempContract(
            kind=a.kind, client_id=a.client_id, bs_id=a.bs_id,
            bandwidth=a.bandwidth, power=a.power, pay=a.pay,
            value=a.value_total))

    all_keys = [("c", uid) for uid in comm_users]
    all_keys += [("s", co.id) for co in teams]
    unmatched = [k for k in all_keys if k not in matched]

    return OnlineResult(
        state=MatchingState(matched=matched, per_station=per_station,
                            unmatched=unmatched),
        temp_contracts=temp, coalitions=teams, outcome=outcome,
        certified=cfg.certify and not residual, residual_pairs=residual,
        config=cfg, engine=eng)

