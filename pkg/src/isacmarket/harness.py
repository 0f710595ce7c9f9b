"""Experiment harness: scenario generation (synthetic layouts and coordinate
files), the trading strategies under comparison, Monte-Carlo trial execution,
and the evaluation metrics with their delimited-table export.

Channel qualities are derived from geometry with smooth bounded falloffs:
link gain-to-noise decays with user-station distance, sensing capability with
the two-leg path through the target. The falloff constants below are tuned so
service values land in the hundreds at the default weights, giving the bid
ladders a few hundred rungs at the default step.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .market import (
    BaseStation,
    CommContract,
    Market,
    MobileUser,
    Realization,
    ResourceGrids,
    RiskThresholds,
    SensingContract,
    TempContract,
    bs_utility,
    coalition_sensing_utility,
    form_coalitions,
    mu_comm_utility,
    online_utilities,
)
from .offline import MatchConfig, OfflineResult, run_offrfw2m, unit_scales
from .online import (
    OnlineConfig,
    VolunteerDecision,
    apply_volunteers,
    realized_loads,
    residual_supply,
    run_onebw2m,
    sample_realization,
    select_volunteers,
)
from .values import (
    LinkQuality,
    Position2D,
    ValueWeights,
    comm_rate,
    comm_value,
    sensing_value,
)

_EPS = 1e-9

# Link gain-to-noise at zero range and the distance/exponent of its falloff.
# The falloff is deliberately gentle across the deployment area: buyers bid
# one uniform ladder over all their candidates, so a steep distance penalty
# would price every fallback station out the moment the nearest one is lost.
_XI_NEAR = 600.0
_XI_HALF_M = 600.0
_XI_EXP = 2.0
# Two-leg sensing path length at which capability halves.
_KAPPA_HALF_M = 600.0

# Substream tag separating the metric-cost draws from the trial draws.
_METRICS_STREAM = 0x6D657472

DEFAULT_WEIGHTS = ValueWeights(omega1=1e-5, omega2=0.5, omega3=0.5,
                               omega4=0.08, omega5=0.01)
DEFAULT_THRESHOLDS = RiskThresholds(rho1=1.0, rho2=1.0, rho3=0.45, rho4=0.45)
# Sized so a hundred users can book against five stations: the station power
# range yields roughly 100-200 W in total, so sub-watt asks must exist for the
# long-term book to hold the crowd, with scarcity arriving near the top count.
DEFAULT_GRIDS = ResourceGrids(bandwidth_sub=(10, 25, 50),
                              power_w=(0.5, 1.0, 2.0))


class IngestionError(ValueError):
    """A coordinate table could not be read; the message names the file and,
    for malformed rows, the line."""


@dataclass(frozen=True, slots=True)
class ScenarioConfig:
    """Synthetic-market parameters. Ranges are closed intervals sampled
    uniformly per entity; station bandwidth is rounded to whole subchannels
    and station power converted from its logarithmic range to watts."""

    n_mus: int
    n_bss: int = 5
    n_targets: int = 8
    area_m: float = 800.0
    n_tx_range: tuple[int, int] = (8, 16)
    n_rx_range: tuple[int, int] = (4, 8)
    bandwidth_mhz: tuple[float, float] = (80.0, 120.0)
    power_dbw: tuple[float, float] = (10.0, 20.0)
    rate_req_range: tuple[float, float] = (0.01, 10.0)
    sensing_req_range: tuple[float, float] = (1.0, 100.0)
    part_range: tuple[float, float] = (0.64, 0.96)
    overbook: float = 0.2
    b0: float = 180e3
    weights: ValueWeights = DEFAULT_WEIGHTS
    thresholds: RiskThresholds = DEFAULT_THRESHOLDS
    grids: ResourceGrids = DEFAULT_GRIDS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_mus < 1 or self.n_bss < 1 or self.n_targets < 1:
            raise ValueError("entity counts must be >= 1")
        if self.area_m <= 0.0 or self.b0 <= 0.0:
            raise ValueError("area_m and b0 must be > 0")
        if self.overbook < 0.0:
            raise ValueError("overbook must be >= 0")
        for name in ("n_tx_range", "n_rx_range", "bandwidth_mhz", "power_dbw",
                     "rate_req_range", "sensing_req_range", "part_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is reversed")
        if not (0.0 < self.part_range[0] and self.part_range[1] <= 1.0):
            raise ValueError("part_range must lie within (0, 1]")
        if self.bandwidth_mhz[0] * 1e6 < self.b0:
            raise ValueError("bandwidth range must cover one subchannel")


@dataclass(frozen=True, slots=True)
class Scenario:
    """One reproducible market instance plus the target positions and the
    seed it was drawn from."""

    label: str
    market: Market
    targets: tuple[Position2D, ...]
    seed: int

    @property
    def users(self) -> tuple[MobileUser, ...]:
        return self.market.users

    @property
    def bss(self) -> tuple[BaseStation, ...]:
        return self.market.bss

    @property
    def n_mus(self) -> int:
        return len(self.market.users)

    @property
    def n_bss(self) -> int:
        return len(self.market.bss)


def _distance(a: Position2D, b: Position2D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _link_xi(d: float) -> float:
    return _XI_NEAR / (1.0 + (d / _XI_HALF_M) ** _XI_EXP)


def _sense_kappa(path: float) -> float:
    return 1.0 / (1.0 + (path / _KAPPA_HALF_M) ** 2)


def _bs_positions(n: int, area: float, rng: np.random.Generator) -> list[Position2D]:
    corners = [(0.0, 0.0), (area, 0.0), (0.0, area), (area, area)]
    if n == 5:
        pts = corners + [(area / 2.0, area / 2.0)]
    elif n == 7:
        pts = corners + [(area / 2.0, area / 2.0),
                         (area / 2.0, 0.0), (area / 2.0, area)]
    else:
        pts = [(float(rng.uniform(0.0, area)), float(rng.uniform(0.0, area)))
               for _ in range(n)]
    return [Position2D(x, y) for x, y in pts]


def _draw_station(bs_id: int, pos: Position2D, cfg: ScenarioConfig,
                  rng: np.random.Generator) -> BaseStation:
    lo_sub = int(math.ceil(cfg.bandwidth_mhz[0] * 1e6 / cfg.b0 - _EPS))
    hi_sub = int(math.floor(cfg.bandwidth_mhz[1] * 1e6 / cfg.b0 + _EPS))
    n_sub = int(rng.integers(lo_sub, hi_sub + 1))
    dbw = float(rng.uniform(*cfg.power_dbw))
    n_tx = int(rng.integers(cfg.n_tx_range[0], cfg.n_tx_range[1] + 1))
    return BaseStation(id=bs_id, bandwidth_total=n_sub * cfg.b0,
                       power_total=10.0 ** (dbw / 10.0), location=pos,
                       n_tx=n_tx, b0=cfg.b0, overbook_b=cfg.overbook,
                       overbook_p=cfg.overbook)


def _draw_user(mu_id: int, pos: Position2D, cfg: ScenarioConfig,
               rng: np.random.Generator) -> MobileUser:
    target = int(rng.integers(1, cfg.n_targets + 1))
    rate = float(rng.uniform(*cfg.rate_req_range))
    sense = float(rng.uniform(*cfg.sensing_req_range))
    n_rx = int(rng.integers(cfg.n_rx_range[0], cfg.n_rx_range[1] + 1))
    part = float(rng.uniform(*cfg.part_range))
    return MobileUser(id=mu_id, target_id=target, rate_req=rate,
                      sensing_req=sense, n_rx=n_rx, location=pos,
                      part_prob=part)


def _build_market(users: Sequence[MobileUser], bss: Sequence[BaseStation],
                  targets: Sequence[Position2D], cfg: ScenarioConfig) -> Market:
    xi: dict[tuple[int, int], float] = {}
    kappa: dict[tuple[int, int], float] = {}
    for u in users:
        tgt = targets[u.target_id - 1]
        for b in bss:
            xi[(u.id, b.id)] = _link_xi(_distance(u.location, b.location))
            path = _distance(u.location, tgt) + _distance(tgt, b.location)
            kappa[(u.id, b.id)] = _sense_kappa(path)
    return Market(users=tuple(users), bss=tuple(bss),
                  coalitions=tuple(form_coalitions(users)), xi=xi,
                  kappa=kappa, weights=cfg.weights,
                  thresholds=cfg.thresholds, grids=cfg.grids, b0=cfg.b0)


def gen_synthetic(cfg: ScenarioConfig, rng: np.random.Generator) -> Scenario:
    """Draw one synthetic market: stations on the symmetric 5 or 7 layout
    (corners, center, and for 7 the horizontal edge midpoints; any other
    count is placed uniformly), users and targets uniform in the square.
    Identical seed and config give an identical scenario."""
    positions = _bs_positions(cfg.n_bss, cfg.area_m, rng)
    bss = [_draw_station(j + 1, pos, cfg, rng)
           for j, pos in enumerate(positions)]
    targets = tuple(Position2D(float(rng.uniform(0.0, cfg.area_m)),
                               float(rng.uniform(0.0, cfg.area_m)))
                    for _ in range(cfg.n_targets))
    users = []
    for i in range(1, cfg.n_mus + 1):
        pos = Position2D(float(rng.uniform(0.0, cfg.area_m)),
                         float(rng.uniform(0.0, cfg.area_m)))
        users.append(_draw_user(i, pos, cfg, rng))
    market = _build_market(users, bss, targets, cfg)
    label = f"syn{cfg.n_bss}bs{cfg.n_mus}mu"
    return Scenario(label=label, market=market, targets=targets, seed=cfg.seed)


def _read_coords(path: str) -> list[tuple[float, float]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise IngestionError(f"{path}: empty file")
        cols = {name.strip().lower(): name for name in reader.fieldnames}
        lat_col, lon_col = cols.get("latitude"), cols.get("longitude")
        if lat_col is None or lon_col is None:
            raise IngestionError(
                f"{path}: needs latitude and longitude columns, "
                f"found {reader.fieldnames}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append((float(row[lat_col]), float(row[lon_col])))
            except (TypeError, ValueError):
                raise IngestionError(
                    f"{path}: line {lineno}: non-numeric coordinate "
                    f"{row.get(lat_col)!r}, {row.get(lon_col)!r}") from None
    if not out:
        raise IngestionError(f"{path}: no data rows")
    return out


_EARTH_RADIUS_M = 6_371_000.0


def _project_planar(coords: Sequence[tuple[float, float]],
                    ) -> list[tuple[float, float]]:
    """Equirectangular projection about the centroid, in meters."""
    lat0 = sum(c[0] for c in coords) / len(coords)
    lon0 = sum(c[1] for c in coords) / len(coords)
    k = _EARTH_RADIUS_M * math.pi / 180.0
    return [((lon - lon0) * k * math.cos(math.radians(lat0)),
             (lat - lat0) * k) for lat, lon in coords]


def load_eua(bs_file: str, user_file: str, cfg: ScenarioConfig,
             rng: np.random.Generator) -> Scenario:
    """Build a scenario from latitude/longitude tables: every station row is
    used, n_mus users are sampled without replacement, targets are placed
    uniformly in the bounding box of the projected coordinates, and the
    remaining parameters are drawn exactly as in gen_synthetic."""
    bs_coords = _read_coords(bs_file)
    mu_coords = _read_coords(user_file)
    if len(mu_coords) < cfg.n_mus:
        raise IngestionError(
            f"{user_file}: has {len(mu_coords)} rows, need {cfg.n_mus}")
    pts = _project_planar(bs_coords + mu_coords)
    bs_pts = pts[:len(bs_coords)]
    mu_pts = pts[len(bs_coords):]
    picked = sorted(int(i) for i in rng.choice(len(mu_pts), size=cfg.n_mus,
                                               replace=False))
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    bss = [_draw_station(j + 1, Position2D(x, y), cfg, rng)
           for j, (x, y) in enumerate(bs_pts)]
    targets = tuple(Position2D(float(rng.uniform(min(xs), max(xs))),
                               float(rng.uniform(min(ys), max(ys))))
                    for _ in range(cfg.n_targets))
    users = [_draw_user(i + 1, Position2D(*mu_pts[row]), cfg, rng)
             for i, row in enumerate(picked)]
    market = _build_market(users, bss, targets, cfg)
    label = f"eua{len(bss)}bs{cfg.n_mus}mu"
    return Scenario(label=label, market=market, targets=targets, seed=cfg.seed)


# ---------------------------------------------------------------------------
# Strategies


@dataclass(frozen=True, slots=True)
class Strategy:
    """What a trading method uses: long-term contracts, a backup market for
    realized unmet demand, sensing teams as joint buyers, overbooked
    long-term capacity, risk constraints, or take-the-highest-pay admission
    with no negotiation at all."""

    name: str
    offline: bool
    backup: bool
    coalitions: bool
    overbook: bool
    risk: bool
    greedy: bool = False


STRATEGIES: dict[str, Strategy] = {s.name: s for s in (
    Strategy("frbank", offline=True, backup=True, coalitions=True,
             overbook=True, risk=True),
    Strategy("con_online", offline=False, backup=True, coalitions=False,
             overbook=False, risk=False),
    Strategy("con_offline", offline=True, backup=False, coalitions=False,
             overbook=False, risk=True),
    Strategy("hybrid", offline=True, backup=True, coalitions=False,
             overbook=False, risk=True),
    Strategy("hybrid_o", offline=True, backup=True, coalitions=False,
             overbook=True, risk=True),
    Strategy("greedy", offline=False, backup=False, coalitions=False,
             overbook=False, risk=False, greedy=True),
    Strategy("frbank_nor", offline=True, backup=True, coalitions=True,
             overbook=True, risk=False),
    Strategy("hybrid_o_nor", offline=True, backup=True, coalitions=False,
             overbook=True, risk=False),
    Strategy("con_offline_nor", offline=True, backup=False, coalitions=False,
             overbook=False, risk=False),
)}


def resolve_strategy(strategy: str | Strategy) -> Strategy:
    if isinstance(strategy, Strategy):
        return strategy
    try:
        return STRATEGIES[strategy]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy!r}") from None


def strategy_market(scenario: Scenario, strategy: str | Strategy) -> Market:
    """The market a strategy trades in. Without coalitions every user gets a
    private target so teams degenerate to singletons (ids = user ids);
    without overbooking the stations sell only nominal capacity."""
    strat = resolve_strategy(strategy)
    m = scenario.market
    users = m.users
    if not strat.coalitions:
        users = tuple(replace(u, target_id=u.id) for u in users)
    bss = m.bss
    if not (strat.offline and strat.overbook):
        bss = tuple(replace(b, overbook_b=0.0, overbook_p=0.0) for b in bss)
    if users is m.users and bss is m.bss:
        return m
    return replace(m, users=users, bss=bss,
                   coalitions=tuple(form_coalitions(users)))


def default_match_config() -> MatchConfig:
    """Long-term matching knobs for simulation runs. Displacement
    compensation refunds the full payment, so buying a booked client out is
    never a contract default; defaults recorded against contracts are the
    absences. The stability probe is skipped for the same cost reason as in
    default_online_config."""
    return MatchConfig(certify=False, pel_s_frac=1.0)


def default_online_config() -> OnlineConfig:
    """Backup-matching knobs for simulation runs: a short bid ladder (start
    near the realized valuation, coarse step) keeps the per-trial auction
    cheap across a whole sweep, and the stability probe is skipped because
    its cost is superlinear in the book size."""
    return OnlineConfig(p_min_frac=0.9, bid_step_frac=0.02, certify=False)


def offline_variant_key(strategy: str | Strategy) -> tuple[bool, bool, bool] | None:
    """Cache key for the long-term phase: strategies agreeing on coalitions,
    overbooking, and risk share one offline run. None = no long-term phase."""
    strat = resolve_strategy(strategy)
    if not strat.offline:
        return None
    return (strat.coalitions, strat.overbook, strat.risk)


def offline_phase(scenario: Scenario, strategy: str | Strategy,
                  cfg: MatchConfig | None = None) -> OfflineResult | None:
    """Sign the strategy's long-term contracts (None for online-only ones)."""
    strat = resolve_strategy(strategy)
    if not strat.offline:
        return None
    base = cfg if cfg is not None else default_match_config()
    mcfg = replace(base, client_risk=strat.risk, seller_risk=strat.risk)
    return run_offrfw2m(strategy_market(scenario, strat), mcfg)


# ---------------------------------------------------------------------------
# Trial execution


@dataclass(frozen=True, slots=True)
class TrialOutcome:
    """One practical transaction: the participation draw, the volunteer
    decisions, the contracts in force, and the realized books. Utilities
    recompute exactly from the contracts plus the realization."""

    strategy: str
    trial: int
    realization: Realization
    volunteer_decisions: tuple[VolunteerDecision, ...]
    comm_contracts: tuple[CommContract, ...]
    sensing_contracts: tuple[SensingContract, ...]
    temp_contracts: tuple[TempContract, ...]
    mu_utility: float
    bs_utility: float
    social_welfare: float
    served_value: float
    power_cost: float
    ni_to_bs: int
    ni_to_client: int
    n_failed: int
    n_contracted: int
    rdslc_b: float
    rdslc_p: float
    rt_ms: float

    @property
    def ni(self) -> int:
        return self.ni_to_bs + self.ni_to_client

    @property
    def drlc(self) -> float:
        return self.n_failed / self.n_contracted if self.n_contracted else 0.0


def _settle(market: Market, comm: Sequence[CommContract],
            sense: Sequence[SensingContract], temp: Sequence[TempContract],
            realization: Realization) -> dict[str, float]:
    """Realized books: per-party utilities from the contract utility forms,
    total served value and seller power cost, long-term failure counts, and
    the realized demand placed on the long-term supply."""
    w = market.weights
    mu_u = sum(mu_comm_utility(c, realization) for c in comm)
    mu_u += sum(coalition_sensing_utility(s, realization) for s in sense)
    bs_u = 0.0
    for bs in market.bss:
        bs_u += bs_utility(bs, [c for c in comm if c.bs_id == bs.id],
                           [s for s in sense if s.bs_id == bs.id],
                           realization, w)
    buyers, stations = online_utilities(temp)
    mu_u += sum(buyers.values())
    bs_u += sum(stations.values())

    served = sum(t.value for t in temp)
    cost = 0.0
    n_failed = 0
    demand_b = demand_p = 0.0
    for c in comm:
        a = realization.alpha[c.mu_id]
        vol = realization.volunteers_c.get((c.mu_id, c.bs_id), 0)
        if a:
            demand_b += c.bandwidth
            demand_p += c.power
        if vol:
            # present but bought out; under-compensation is a failure
            if c.pel_s < c.value - c.pay - _EPS:
                n_failed += 1
        elif not a:
            # absent; walking away for the penalty beats paying for nothing
            if c.pel_u < c.pay - _EPS:
                n_failed += 1
        else:
            served += c.value
            cost += w.omega5 * c.power
    for s in sense:
        b = realization.beta[s.coalition_id]
        vol = realization.volunteers_s.get((s.coalition_id, s.bs_id), 0)
        if b:
            demand_b += s.bandwidth
            demand_p += s.power
        if vol:
            if s.pel_s < s.value_total - s.pay - _EPS:
                n_failed += 1
        elif not b:
            if s.pel_u < s.pay - _EPS:
                n_failed += 1
        else:
            served += s.value_total
            cost += w.omega5 * s.power
    supply_b = sum(bs.bandwidth_total for bs in market.bss)
    supply_p = sum(bs.power_total for bs in market.bss)
    return {"mu_utility": float(mu_u), "bs_utility": float(bs_u),
            "served_value": float(served), "power_cost": float(cost),
            "n_failed": n_failed, "rdslc_b": demand_b / supply_b,
            "rdslc_p": demand_p / supply_p}


def _unmet_demand(market: Market, comm: Sequence[CommContract],
                  sense: Sequence[SensingContract], realization: Realization,
                  ) -> tuple[list[int], list[int]]:
    """Present users whose link demand is unserved, and present members of
    teams whose sensing demand is unserved (no contract or bought out)."""
    served_c = {c.mu_id for c in comm
                if realization.alpha[c.mu_id]
                and not realization.volunteers_c.get((c.mu_id, c.bs_id), 0)}
    comm_unserved = [u.id for u in market.users
                     if realization.alpha[u.id] and u.id not in served_c]
    served_s = {s.coalition_id for s in sense
                if realization.beta[s.coalition_id]
                and not realization.volunteers_s.get(
                    (s.coalition_id, s.bs_id), 0)}
    sense_unserved = [m for co in market.coalitions
                      if realization.beta[co.id] and co.id not in served_s
                      for m in co.member_ids if realization.alpha[m]]
    return comm_unserved, sense_unserved


def _greedy_online(market: Market, realization: Realization,
                   ) -> tuple[list[TempContract], int]:
    """No-negotiation admission: each present user sends one offer (its best
    link and sensing bundles, priced at full valuation) to the station where
    they are worth most; stations admit the highest pays that fit nominal
    capacity. Returns the contracts and the offer count."""
    w = market.weights
    g_b, g_p = unit_scales(market)
    cap_b = {bs.id: int((bs.bandwidth_total / market.b0 + _EPS) // g_b)
             for bs in market.bss}
    cap_p = {bs.id: int((bs.power_total * 1000.0 + _EPS) // g_p)
             for bs in market.bss}
    offers: dict[int, list[tuple[float, str, int, int, float]]] = {
        bs.id: [] for bs in market.bss}
    n_offers = 0
    for u in market.users:
        if not realization.alpha[u.id]:
            continue
        best_bs = None
        best_items: list[tuple[float, str, int, int, float]] = []
        best_total = 0.0
        for bs in market.bss:
            link = LinkQuality(xi=market.xi[(u.id, bs.id)], kappa=0.0)
            sense_link = LinkQuality(xi=1.0, kappa=market.kappa[(u.id, bs.id)])
            items = []
            best_c = best_s = None
            for n_sub in market.grids.bandwidth_sub:
                bw = n_sub * market.b0
                for p in market.grids.power_w:
                    if comm_rate(bw, p, link, market.b0) + _EPS >= u.rate_req:
                        v = comm_value(bw, p, link, market.b0, w)
                        if v > 0.0 and (best_c is None or v > best_c[0]):
                            best_c = (v, "c", n_sub, p)
                    vs = sensing_value(p, bw, sense_link, w)
                    if vs + _EPS >= u.sensing_req and vs > 0.0 and (
                            best_s is None or vs > best_s[0]):
                        best_s = (vs, "s", n_sub, p)
            for it in (best_c, best_s):
                if it is not None:
                    items.append((it[0], it[1], u.id, it[2], it[3]))
            total = sum(it[0] for it in items)
            if total > best_total + _EPS:
                best_total, best_bs, best_items = total, bs.id, items
        if best_bs is not None:
            offers[best_bs].extend(best_items)
            n_offers += 1
    temp: list[TempContract] = []
    for bs in market.bss:
        for v, kind, cid, n_sub, p in sorted(offers[bs.id],
                                             key=lambda t: (-t[0], t[1], t[2])):
            bu = n_sub // g_b
            pu = round(p * 1000.0) // g_p
            if bu <= cap_b[bs.id] and pu <= cap_p[bs.id]:
                cap_b[bs.id] -= bu
                cap_p[bs.id] -= pu
                temp.append(TempContract(kind=kind, client_id=cid,
                                         bs_id=bs.id,
                                         bandwidth=n_sub * market.b0,
                                         power=p, pay=v, value=v))
    return temp, n_offers


def run_transaction(scenario: Scenario, strategy: str | Strategy,
                    prior: OfflineResult | None, rng: np.random.Generator,
                    *, online_cfg: OnlineConfig | None = None,
                    trial: int = 0) -> TrialOutcome:
    """Execute one practical transaction: draw participation, settle the
    long-term contracts (volunteering away realized overdemand), then run
    the strategy's online pipeline for whatever demand is still unmet. The
    reported wall-clock covers only the online portion."""
    strat = resolve_strategy(strategy)
    if strat.offline and prior is None:
        raise ValueError(f"{strat.name} needs a long-term phase result")
    if not strat.offline and prior is not None:
        raise ValueError(f"{strat.name} signs no long-term contracts")
    ocfg = online_cfg if online_cfg is not None else default_online_config()
    market = prior.market if prior is not None else strategy_market(scenario,
                                                                    strat)
    comm = tuple(prior.comm_contracts) if prior else ()
    sense = tuple(prior.sensing_contracts) if prior else ()
    realization = sample_realization(market, rng)

    t0 = time.perf_counter()
    loads_by_bs = {}
    decisions = []
    for bs in market.bss:
        loads = realized_loads(bs, [c for c in comm if c.bs_id == bs.id],
                               [s for s in sense if s.bs_id == bs.id],
                               realization)
        loads_by_bs[bs.id] = loads
        decisions.append(select_volunteers(bs, loads))
    apply_volunteers(realization, decisions)
    n_vol = sum(len(d.volunteers) for d in decisions)

    temp: list[TempContract] = []
    ni_to_bs = 0
    ni_to_client = n_vol
    if strat.greedy:
        temp, n_offers = _greedy_online(market, realization)
        ni_to_bs += n_offers
        ni_to_client += n_offers
    elif strat.backup:
        comm_unserved, sense_unserved = _unmet_demand(market, comm, sense,
                                                      realization)
        if comm_unserved or sense_unserved:
            residuals = [residual_supply(bs, loads_by_bs[bs.id], d)
                         for bs, d in zip(market.bss, decisions)]
            on = run_onebw2m(market, realization, comm_unserved,
                             sense_unserved, residuals, ocfg)
            temp = list(on.temp_contracts)
            ni_to_bs += on.outcome.proposals_total
            ni_to_client += on.outcome.responses_total
    rt_ms = (time.perf_counter() - t0) * 1e3

    books = _settle(market, comm, sense, temp, realization)
    return TrialOutcome(
        strategy=strat.name, trial=trial, realization=realization,
        volunteer_decisions=tuple(d for d in decisions if d.volunteers),
        comm_contracts=comm, sensing_contracts=sense,
        temp_contracts=tuple(temp),
        mu_utility=books["mu_utility"], bs_utility=books["bs_utility"],
        social_welfare=books["mu_utility"] + books["bs_utility"],
        served_value=books["served_value"], power_cost=books["power_cost"],
        ni_to_bs=ni_to_bs, ni_to_client=ni_to_client,
        n_failed=int(books["n_failed"]), n_contracted=len(comm) + len(sense),
        rdslc_b=books["rdslc_b"], rdslc_p=books["rdslc_p"], rt_ms=rt_ms)


def offline_phases(scenario: Scenario, strategies: Sequence[str | Strategy],
                   match_cfg: MatchConfig | None = None,
                   ) -> dict[tuple[bool, bool, bool], OfflineResult]:
    """One long-term phase per distinct offline variant among the
    strategies, keyed by offline_variant_key."""
    phases: dict[tuple[bool, bool, bool], OfflineResult] = {}
    for strat in map(resolve_strategy, strategies):
        key = offline_variant_key(strat)
        if key is not None and key not in phases:
            phases[key] = offline_phase(scenario, strat, match_cfg)
    return phases


def monte_carlo_outcomes(scenario: Scenario, strategies: Sequence[str | Strategy],
                         n_trials: int, *, match_cfg: MatchConfig | None = None,
                         online_cfg: OnlineConfig | None = None,
                         priors: Mapping[tuple[bool, bool, bool],
                                         OfflineResult] | None = None,
                         ) -> list[TrialOutcome]:
    """All trials of all strategies. Long-term phases run once per scenario
    (shared between strategies with the same offline variant, or passed in
    precomputed); each trial index derives its own random stream from the
    scenario seed, and every strategy replays the same stream so
    participation draws are paired."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    strats = [resolve_strategy(s) for s in strategies]
    if not strats:
        raise ValueError("need at least one strategy")
    prior = priors if priors is not None else offline_phases(
        scenario, strats, match_cfg)
    outcomes = []
    for trial in range(n_trials):
        for strat in strats:
            rng = np.random.default_rng(
                np.random.SeedSequence([scenario.seed, trial]))
            outcomes.append(run_transaction(
                scenario, strat, prior.get(offline_variant_key(strat)), rng,
                online_cfg=online_cfg, trial=trial))
    return outcomes


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True, slots=True)
class InteractionModel:
    """Per-interaction cost ranges: delay, and the sender transmit powers on
    each direction of the negotiation."""

    delay_ms: tuple[float, float] = (1.0, 15.0)
    mu_power_w: tuple[float, float] = (0.2, 0.4)
    bs_power_w: tuple[float, float] = (6.0, 20.0)


METRIC_FIELDS = ("social_welfare", "mu_utility", "bs_utility", "rt_ms", "ni",
                 "dibc_ms", "ecibc_w", "rdslc_b", "rdslc_p", "drlc")

RESULT_COLUMNS = ("scenario_id", "strategy", "n_mus", "n_bss",
                  "trial") + METRIC_FIELDS


def interaction_energy(delays_ms: Sequence[float], powers_w: Sequence[float],
                       ) -> tuple[float, float]:
    """Total delay (ms) and energy (watt-seconds: power times delay summed
    over interactions) of one negotiation."""
    delays = np.asarray(delays_ms, dtype=float)
    powers = np.asarray(powers_w, dtype=float)
    return float(delays.sum()), float((powers * delays).sum() / 1e3)


def interaction_costs(ni_to_bs: int, ni_to_client: int,
                      model: InteractionModel, rng: np.random.Generator,
                      ) -> tuple[float, float]:
    """Draw per-interaction delays and sender powers (users send toward
    stations, stations send toward clients) and accumulate cost totals."""
    d_up = rng.uniform(*model.delay_ms, size=ni_to_bs)
    p_up = rng.uniform(*model.mu_power_w, size=ni_to_bs)
    d_dn = rng.uniform(*model.delay_ms, size=ni_to_client)
    p_dn = rng.uniform(*model.bs_power_w, size=ni_to_client)
    dibc_up, ecibc_up = interaction_energy(d_up, p_up)
    dibc_dn, ecibc_dn = interaction_energy(d_dn, p_dn)
    return dibc_up + dibc_dn, ecibc_up + ecibc_dn


@dataclass(frozen=True, slots=True)
class MetricsReport:
    """Per-strategy trial counts, means, and standard errors for every
    metric field."""

    trials: dict[str, int]
    means: dict[str, dict[str, float]]
    ses: dict[str, dict[str, float]]


def metrics_rng(scenario: Scenario) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([scenario.seed, _METRICS_STREAM]))


def metric_rows(scenario: Scenario, outcomes: Sequence[TrialOutcome],
                model: InteractionModel | None = None,
                rng: np.random.Generator | None = None) -> list[dict]:
    """One results-table row per trial outcome, in the documented column
    order, with interaction costs drawn from the model."""
    model = model if model is not None else InteractionModel()
    rng = rng if rng is not None else metrics_rng(scenario)
    rows = []
    for o in outcomes:
        dibc, ecibc = interaction_costs(o.ni_to_bs, o.ni_to_client, model, rng)
        rows.append({
            "scenario_id": scenario.label, "strategy": o.strategy,
            "n_mus": scenario.n_mus, "n_bss": scenario.n_bss,
            "trial": o.trial, "social_welfare": o.social_welfare,
            "mu_utility": o.mu_utility, "bs_utility": o.bs_utility,
            "rt_ms": o.rt_ms, "ni": o.ni, "dibc_ms": dibc, "ecibc_w": ecibc,
            "rdslc_b": o.rdslc_b, "rdslc_p": o.rdslc_p, "drlc": o.drlc})
    return rows


def summarize_rows(rows: Sequence[Mapping[str, object]]) -> MetricsReport:
    by_strategy: dict[str, list[Mapping[str, object]]] = {}
    for r in rows:
        by_strategy.setdefault(str(r["strategy"]), []).append(r)
    trials = {}
    means: dict[str, dict[str, float]] = {}
    ses: dict[str, dict[str, float]] = {}
    for name, group in by_strategy.items():
        trials[name] = len(group)
        means[name] = {}
        ses[name] = {}
        for metric in METRIC_FIELDS:
            xs = np.array([float(r[metric]) for r in group])
            means[name][metric] = float(xs.mean())
            ses[name][metric] = (float(xs.std(ddof=1) / math.sqrt(len(xs)))
                                 if len(xs) > 1 else 0.0)
    return MetricsReport(trials=trials, means=means, ses=ses)


def compute_metrics(scenario: Scenario, outcomes: Sequence[TrialOutcome],
                    model: InteractionModel | None = None,
                    rng: np.random.Generator | None = None) -> MetricsReport:
    """Aggregate trial outcomes into per-strategy means and standard errors,
    drawing the interaction costs from the model."""
    return summarize_rows(metric_rows(scenario, outcomes, model, rng))


def run_monte_carlo(scenario: Scenario, strategies: Sequence[str | Strategy],
                    n_trials: int, *, match_cfg: MatchConfig | None = None,
                    online_cfg: OnlineConfig | None = None,
                    model: InteractionModel | None = None) -> MetricsReport:
    """Offline phases once, n_trials practical transactions per strategy,
    aggregated into the metrics report."""
    outcomes = monte_carlo_outcomes(scenario, strategies, n_trials,
                                    match_cfg=match_cfg, online_cfg=online_cfg)
    return compute_metrics(scenario, outcomes, model)


# ---------------------------------------------------------------------------
# Result and scenario files


def write_results(path: str, rows: Iterable[Mapping[str, object]],
                  extra_columns: Sequence[str] = ()) -> None:
    cols = RESULT_COLUMNS + tuple(extra_columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wtr = csv.DictWriter(fh, fieldnames=cols)
        wtr.writeheader()
        for r in rows:
            wtr.writerow(r)


def read_results(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for r in reader:
            for k, v in r.items():
                if k not in ("scenario_id", "strategy"):
                    r[k] = float(v)
            rows.append(r)
    return rows


def _weights_doc(w: ValueWeights) -> dict:
    return {"omega1": w.omega1, "omega2": w.omega2, "omega3": w.omega3,
            "omega4": w.omega4, "omega5": w.omega5}


def _thresholds_doc(t: RiskThresholds) -> dict:
    return {"rho1": t.rho1, "rho2": t.rho2, "rho3": t.rho3, "rho4": t.rho4,
            "u_min_c": t.u_min_c, "u_min_s": t.u_min_s,
            "u_max_c": t.u_max_c, "u_max_s": t.u_max_s}


def save_scenario(scenario: Scenario, path: str) -> None:
    m = scenario.market
    doc = {
        "label": scenario.label,
        "seed": scenario.seed,
        "b0": m.b0,
        "weights": _weights_doc(m.weights),
        "thresholds": _thresholds_doc(m.thresholds),
        "grids": {"bandwidth_sub": list(m.grids.bandwidth_sub),
                  "power_w": list(m.grids.power_w)},
        "targets": [[t.x, t.y] for t in scenario.targets],
        "users": [{"id": u.id, "target_id": u.target_id,
                   "rate_req": u.rate_req, "sensing_req": u.sensing_req,
                   "n_rx": u.n_rx, "x": u.location.x, "y": u.location.y,
                   "part_prob": u.part_prob} for u in m.users],
        "bss": [{"id": b.id, "bandwidth_total": b.bandwidth_total,
                 "power_total": b.power_total, "x": b.location.x,
                 "y": b.location.y, "n_tx": b.n_tx, "b0": b.b0,
                 "overbook_b": b.overbook_b, "overbook_p": b.overbook_p}
                for b in m.bss],
        "xi": {str(mu): {str(bs): v for (m2, bs), v in m.xi.items()
                         if m2 == mu} for mu in {k[0] for k in m.xi}},
        "kappa": {str(mu): {str(bs): v for (m2, bs), v in m.kappa.items()
                            if m2 == mu} for mu in {k[0] for k in m.kappa}},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    users = tuple(MobileUser(
        id=u["id"], target_id=u["target_id"], rate_req=u["rate_req"],
        sensing_req=u["sensing_req"], n_rx=u["n_rx"],
        location=Position2D(u["x"], u["y"]), part_prob=u["part_prob"])
        for u in doc["users"])
    bss = tuple(BaseStation(
        id=b["id"], bandwidth_total=b["bandwidth_total"],
        power_total=b["power_total"], location=Position2D(b["x"], b["y"]),
        n_tx=b["n_tx"], b0=b["b0"], overbook_b=b["overbook_b"],
        overbook_p=b["overbook_p"]) for b in doc["bss"])
    xi = {(int(mu), int(bs)): float(v)
          for mu, row in doc["xi"].items() for bs, v in row.items()}
    kappa = {(int(mu), int(bs)): float(v)
             for mu, row in doc["kappa"].items() for bs, v in row.items()}
    market = Market(
        users=users, bss=bss, coalitions=tuple(form_coalitions(users)),
        xi=xi, kappa=kappa, weights=ValueWeights(**doc["weights"]),
        thresholds=RiskThresholds(**doc["thresholds"]),
        grids=ResourceGrids(
            bandwidth_sub=tuple(doc["grids"]["bandwidth_sub"]),
            power_w=tuple(doc["grids"]["power_w"])),
        b0=doc["b0"])
    targets = tuple(Position2D(x, y) for x, y in doc["targets"])
    return Scenario(label=doc["label"], market=market, targets=targets,
                    seed=doc["seed"])
