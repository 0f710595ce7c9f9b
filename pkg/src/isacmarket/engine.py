"""Shared deferred-acceptance machinery for the offline and online matching
layers: ascending-bid proposal rounds against per-station exact knapsack
selection, optional seller-risk repair, and displacement-probability refresh.

Clients are buyers ("c" link clients, "s" sensing teams), each holding a
private candidate-solution table (station, bandwidth, power) with valuations.
Every unmatched buyer proposes its currently best gate-passing candidate each
round. A rejected or evicted buyer escalates: all its candidate bids rise by
one step together, each clamped at that candidate's valuation. A buyer exits
when no candidate passes its gates or when escalation cannot move any bid.
Accepted buyers hold their contract and bid until evicted. One escalation
counter per buyer is what bounds the total round count.

The engine is resumable: callers may inspect the converged state, reset
selected buyers (stability repair), and run further rounds on the same
instance; rounds and interaction counters accumulate.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .market import (
    BaseStation,
    ContractLoad,
    eu_bs_term,
    eu_client_comm,
    eu_client_sense,
    expect_volunteer,
)

_EPS = 1e-9

UNMATCHED = 0
ACCEPTED = 1
EXITED = 2


class ConvergenceError(RuntimeError):
    """Round count exceeded the analytic ladder bound."""


@dataclass
class EngineClient:
    """One buyer and its candidate solutions (parallel arrays)."""

    kind: str
    cid: int
    presence: float
    bs_idx: np.ndarray
    b_units: np.ndarray
    p_units: np.ndarray
    bandwidth: np.ndarray
    power: np.ndarray
    valuation: np.ndarray    # bid cap basis (per-contract price ceiling)
    value_total: np.ndarray  # utility basis (team total for sensing)
    p_min: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.bs_idx)
        for arr in (self.b_units, self.p_units, self.bandwidth, self.power,
                    self.valuation, self.value_total, self.p_min):
            if len(arr) != n:
                raise ValueError("solution arrays must be parallel")


@dataclass(frozen=True, slots=True)
class EngineStation:
    bs: BaseStation
    b_cap_units: int
    p_cap_units: int
    risk_b_cap: float | None   # E-weighted Hz cap, None disables repair
    risk_p_cap: float | None


@dataclass(frozen=True, slots=True)
class EngineConfig:
    bid_step: float
    u_min_c: float = 0.0
    u_min_s: float = 0.0
    rho3: float | None = None
    rho4: float | None = None
    w5: float = 0.0
    pel_u_frac: float = 0.0
    pel_s_frac: float = 0.0
    ev_enabled: bool = False
    ev_exact_limit: int = 20
    ev_mc_samples: int = 2000
    ev_seed: int = 0
    round_slack: int = 64

    def __post_init__(self) -> None:
        if self.bid_step <= 0.0:
            raise ValueError("bid_step must be > 0")


@dataclass(frozen=True, slots=True)
class RoundTrace:
    round: int
    n_proposals: int
    n_accepts: int
    n_rejects: int
    n_evictions: int
    n_bid_updates: int
    n_interactions: int
    bs_values: tuple[tuple[int, float], ...]


@dataclass(frozen=True, slots=True)
class AcceptedSolution:
    kind: str
    client_id: int
    bs_id: int
    sol: int
    bandwidth: float
    power: float
    pay: float
    value_total: float
    valuation: float
    presence: float


@dataclass
class MatchingOutcome:
    accepted: list[AcceptedSolution]
    statuses: dict[tuple[str, int], int]
    rounds: int
    round_bound: int
    run_lengths: list[int]
    traces: list[RoundTrace]
    e_vol: dict[tuple[str, int, int], float]
    proposals_total: int
    responses_total: int
    bid_step: float
    v_max: float
    p_min_global: float


def default_bid_step(clients: list[EngineClient], frac: float) -> float:
    mins = [float(c.p_min.min()) for c in clients if len(c.p_min)]
    if not mins:
        return 1.0
    step = frac * float(np.mean(mins))
    return step if step > 0.0 else 1.0


def cond_vol(q, presence):
    """Unconditional displacement probability -> conditional on presence."""
    q = np.asarray(q, dtype=float)
    return np.minimum(1.0, np.where(q > 0.0, q / presence, 0.0))


def client_expected_utility(kind: str, value_total, pay, presence, e_v,
                            cfg: EngineConfig):
    pel_u = cfg.pel_u_frac * np.asarray(pay)
    pel_s = cfg.pel_s_frac * np.asarray(pay)
    if kind == "c":
        return eu_client_comm(value_total, pay, pel_u, pel_s, presence, e_v)
    return eu_client_sense(value_total, pay, pel_u, pel_s, presence, e_v)


def client_gate(kind: str, value_total, pay, valuation, presence, e_v,
                cfg: EngineConfig) -> np.ndarray:
    """Buyer-side acceptability of a candidate pay: price cap, expected-utility
    floor, and the buyer risk bound in multiplied-out form (rho = 1 reduces to
    the utility floor; degenerate zero-span cases stay well defined)."""
    value_total = np.asarray(value_total, dtype=float)
    pay = np.asarray(pay, dtype=float)
    valuation = np.asarray(valuation, dtype=float)
    e_u = client_expected_utility(kind, value_total, pay, presence, e_v, cfg)
    if kind == "c":
        u_min, rho = cfg.u_min_c, cfg.rho3
    else:
        u_min, rho = cfg.u_min_s, cfg.rho4
    ok = (pay <= valuation + _EPS) & (e_u >= u_min - _EPS)
    if rho is not None:
        u_max = value_total - pay
        ok = ok & ((u_max - e_u) <= rho * (u_max - u_min) + _EPS)
    return ok


def bs_item_value(pay, power, presence, e_v_cond, cfg: EngineConfig):
    pay = np.asarray(pay, dtype=float)
    return eu_bs_term(pay, cfg.w5 * np.asarray(power), cfg.pel_u_frac * pay,
                      cfg.pel_s_frac * pay, presence, e_v_cond)


def knapsack_take(b_units: np.ndarray, p_units: np.ndarray, values: np.ndarray,
                  cap_b: int, cap_p: int) -> np.ndarray:
    """Exact 0-1 knapsack over two integer capacities; returns the take mask
    of a maximum-total-value subset. Ties prefer not taking an item, which
    pins a deterministic selection for identical pools."""
    n = len(values)
    take = np.zeros((n, cap_b + 1, cap_p + 1), dtype=bool)
    dp = np.zeros((cap_b + 1, cap_p + 1))
    for i in range(n):
        wb, wp, v = int(b_units[i]), int(p_units[i]), float(values[i])
        if wb > cap_b or wp > cap_p or v <= _EPS:
            continue
        cand = dp[:cap_b + 1 - wb, :cap_p + 1 - wp] + v
        cur = dp[wb:, wp:]
        better = cand > cur + _EPS * (1.0 + np.abs(cur))
        if better.any():
            new = dp.copy()
            new[wb:, wp:] = np.where(better, cand, cur)
            take[i, wb:, wp:] = better
            dp = new
    mask = np.zeros(n, dtype=bool)
    b, p = cap_b, cap_p
    for i in range(n - 1, -1, -1):
        if take[i, b, p]:
            mask[i] = True
            b -= int(b_units[i])
            p -= int(p_units[i])
    return mask


def risk_repair(mask: np.ndarray, e_bw: np.ndarray, e_pw: np.ndarray,
                values: np.ndarray, order_keys: list, risk_b: float,
                risk_p: float) -> np.ndarray:
    """Drop accepted items of least value per unit of risk-cap stress until
    both expectation-weighted booking sums respect the seller risk caps."""
    mask = mask.copy()
    while True:
        tot_b = float(e_bw[mask].sum())
        tot_p = float(e_pw[mask].sum())
        over_b = tot_b > risk_b + _EPS * (1.0 + risk_b)
        over_p = tot_p > risk_p + _EPS * (1.0 + risk_p)
        if not (over_b or over_p):
            return mask
        idxs = np.nonzero(mask)[0]
        best_i, best_key = -1, None
        for i in idxs:
            stress = max(e_bw[i] / risk_b, e_pw[i] / risk_p)
            density = values[i] / stress if stress > 0 else np.inf
            key = (density, order_keys[i])
            if best_key is None or key < best_key:
                best_key, best_i = key, i
        mask[best_i] = False


def _ev_cache_key(entries: list[tuple[int, int, int, int, float]]) -> int:
    return zlib.crc32(repr(sorted(entries)).encode())


class MatchingEngine:
    """Resumable ascending-bid matching over a fixed client/station universe."""

    def __init__(self, clients: list[EngineClient], stations: list[EngineStation],
                 cfg: EngineConfig) -> None:
        self.clients = clients
        self.stations = stations
        self.cfg = cfg
        n_cl, n_st = len(clients), len(stations)
        self.bids = [c.p_min.astype(float).copy() for c in clients]
        self.dead = [np.zeros(len(c.p_min), dtype=bool) for c in clients]
        self.k = np.zeros(n_cl, dtype=int)
        self.status = np.full(n_cl, UNMATCHED, dtype=int)
        self.proposal = np.full(n_cl, -1, dtype=int)
        self.needs_head = np.ones(n_cl, dtype=bool)
        self.ev = np.zeros((n_cl, n_st)) if n_st else np.zeros((n_cl, 1))
        self.incumbents: dict[int, list[tuple[int, int]]] = {j: [] for j in range(n_st)}
        self.dirty = set(range(n_st))
        self.rounds = 0
        self.proposals_total = 0
        self.responses_total = 0
        self.traces: list[RoundTrace] = []
        self.run_lengths: list[int] = []
        self._ev_cache: dict[tuple[int, int], dict] = {}
        self._forced: dict[int, int] = {}
        self._bs_value = np.zeros(n_st)

        for i, c in enumerate(clients):
            if len(c.p_min) == 0:
                self.status[i] = EXITED
                self.needs_head[i] = False

        all_vals = [v for c in clients for v in c.valuation.tolist()]
        all_mins = [v for c in clients for v in c.p_min.tolist()]
        self.v_max = max(all_vals) if all_vals else 0.0
        self.p_min_global = min(all_mins) if all_mins else 0.0
        ladder = (int(np.ceil(max(0.0, self.v_max - self.p_min_global) / cfg.bid_step))
                  if all_vals else 0)
        self.round_bound = 2 + n_cl * ladder
        self.hard_cap = self.round_bound + cfg.round_slack

    # -- buyer side ---------------------------------------------------------

    def _head_select(self, i: int) -> None:
        c = self.clients[i]
        pay = self.bids[i]
        e_v = cond_vol(self.ev[i, c.bs_idx], c.presence)
        ok = client_gate(c.kind, c.value_total, pay, c.valuation, c.presence,
                         e_v, self.cfg)
        ok = ok & ~self.dead[i]
        if not ok.any():
            self.status[i] = EXITED
            self.proposal[i] = -1
            return
        idx = np.nonzero(ok)[0]
        e_u = client_expected_utility(c.kind, c.value_total[idx], pay[idx],
                                      c.presence, e_v[idx], self.cfg)
        bs_ids = np.array([self.stations[s].bs.id for s in c.bs_idx[idx]])
        order = np.lexsort((c.power[idx], c.bandwidth[idx], bs_ids, pay[idx], -e_u))
        self.proposal[i] = int(idx[order[0]])
        self.status[i] = UNMATCHED

    def _retire_if_capped(self, i: int, s: int) -> None:
        """A candidate turned down at its bid cap can never be re-won through
        bidding: the bid cannot rise and a station's held value never falls.
        Retire it so the head moves on instead of re-proposing it forever."""
        cap = float(self.clients[i].valuation[s])
        if self.bids[i][s] >= cap - _EPS * (1.0 + abs(cap)):
            self.dead[i][s] = True

    def _escalate(self, i: int) -> bool:
        """Rejection/eviction response: raise every candidate bid by one step,
        clamped at its valuation. Exits the buyer when nothing can move.
        Returns whether any bid was actually raised."""
        c = self.clients[i]
        raised = np.minimum(self.bids[i] + self.cfg.bid_step, c.valuation)
        moved = raised > self.bids[i] + _EPS * (1.0 + np.abs(c.valuation))
        if not moved.any():
            self.status[i] = EXITED
            self.proposal[i] = -1
            return False
        self.bids[i] = raised
        self.k[i] += 1
        return True

    # -- displacement probabilities ------------------------------------------

    def _refresh_ev(self, j: int) -> bool:
        members = self.incumbents[j]
        entries = []
        loads = []
        bs = self.stations[j].bs
        for ci, sol in members:
            c = self.clients[ci]
            pay = float(self.bids[ci][sol])
            entries.append((0 if c.kind == "c" else 1, c.cid, int(c.b_units[sol]),
                            int(c.p_units[sol]), round(pay, 9)))
            loads.append(ContractLoad(key=(c.kind, c.cid, bs.id), presence=c.presence,
                                      bandwidth=float(c.bandwidth[sol]),
                                      power=float(c.power[sol]),
                                      pel_s=self.cfg.pel_s_frac * pay))
        key = _ev_cache_key(entries)
        cached = self._ev_cache.get((j, key))
        if cached is None:
            if len(loads) <= self.cfg.ev_exact_limit:
                cached = expect_volunteer(bs, loads, mode="exact")
            else:
                rng = np.random.default_rng(
                    np.random.SeedSequence([self.cfg.ev_seed, bs.id, key]))
                cached = expect_volunteer(bs, loads, mode="monte_carlo",
                                          n_samples=self.cfg.ev_mc_samples, rng=rng)
            self._ev_cache[(j, key)] = cached
        new_col = np.zeros(len(self.clients))
        for ci, _sol in members:
            c = self.clients[ci]
            new_col[ci] = cached[(c.kind, c.cid, bs.id)]
        if np.allclose(self.ev[:, j], new_col, atol=1e-12):
            return False
        self.ev[:, j] = new_col
        return True

    # -- main loop ------------------------------------------------------------

    def run(self) -> None:
        """Run rounds until a fully quiet round (no proposals or responses)."""
        n_cl, n_st = len(self.clients), len(self.stations)
        run_start = self.rounds
        while True:
            self.rounds += 1
            if self.rounds - run_start > self.hard_cap:
                raise ConvergenceError(f"exceeded {self.hard_cap} rounds")

            for i in range(n_cl):
                if self.needs_head[i] and self.status[i] != EXITED:
                    if i in self._forced:
                        self.proposal[i] = self._forced.pop(i)
                        self.status[i] = UNMATCHED
                    else:
                        self._head_select(i)
                    self.needs_head[i] = False

            new_proposers: dict[int, list[int]] = {}
            n_new = 0
            for i in range(n_cl):
                if self.status[i] == UNMATCHED and self.proposal[i] >= 0:
                    j = int(self.clients[i].bs_idx[self.proposal[i]])
                    new_proposers.setdefault(j, []).append(i)
                    n_new += 1
            self.proposals_total += n_new

            n_accepts = n_rejects = n_evictions = n_bumps = 0

            for j in range(n_st):
                pool_new = new_proposers.get(j, [])
                if not pool_new and j not in self.dirty:
                    continue
                members = list(self.incumbents[j])
                members += [(ci, int(self.proposal[ci])) for ci in pool_new]
                self.dirty.discard(j)
                if not members:
                    self._bs_value[j] = 0.0
                    continue
                members.sort(key=lambda m: (self.clients[m[0]].kind,
                                            self.clients[m[0]].cid))
                cls = self.clients
                b_units = np.array([cls[ci].b_units[s] for ci, s in members])
                p_units = np.array([cls[ci].p_units[s] for ci, s in members])
                pays = np.array([self.bids[ci][s] for ci, s in members])
                powers = np.array([cls[ci].power[s] for ci, s in members])
                pres = np.array([cls[ci].presence for ci, s in members])
                evc = cond_vol(np.array([self.ev[ci, j] for ci, _ in members]), pres)
                values = bs_item_value(pays, powers, pres, evc, self.cfg)
                stn = self.stations[j]
                mask = knapsack_take(b_units, p_units, values, stn.b_cap_units,
                                     stn.p_cap_units)
                if stn.risk_b_cap is not None and mask.any():
                    e_bw = pres * np.array([cls[ci].bandwidth[s] for ci, s in members])
                    e_pw = pres * powers
                    keys = [(cls[ci].kind, cls[ci].cid) for ci, _ in members]
                    mask = risk_repair(mask, e_bw, e_pw, values, keys,
                                       stn.risk_b_cap, stn.risk_p_cap)

                new_set = [members[k] for k in np.nonzero(mask)[0]]
                self._bs_value[j] = float(values[mask].sum())
                new_ids = {ci for ci, _ in new_set}
                for ci, _sol in self.incumbents[j]:
                    if ci not in new_ids:
                        n_evictions += 1
                        self.responses_total += 1
                        self.status[ci] = UNMATCHED
                        self._retire_if_capped(ci, int(_sol))
                        if self._escalate(ci):
                            n_bumps += 1
                        self.needs_head[ci] = True
                for ci in pool_new:
                    self.responses_total += 1
                    if ci in new_ids:
                        n_accepts += 1
                        self.status[ci] = ACCEPTED
                    else:
                        n_rejects += 1
                        self._retire_if_capped(ci, int(self.proposal[ci]))
                        if self._escalate(ci):
                            n_bumps += 1
                        self.needs_head[ci] = True
                self.incumbents[j] = new_set

            ev_changed = False
            if self.cfg.ev_enabled:
                for j in range(n_st):
                    if self._refresh_ev(j):
                        ev_changed = True
                        self.dirty.add(j)

            n_responses = n_new + n_evictions
            self.traces.append(RoundTrace(
                self.rounds, n_new, n_accepts, n_rejects, n_evictions, n_bumps,
                n_new + n_responses,
                tuple((self.stations[j].bs.id, float(self._bs_value[j]))
                      for j in range(n_st))))
            if n_new == 0 and n_accepts == 0 and n_rejects == 0 \
                    and n_evictions == 0 and not ev_changed:
                break
        self.run_lengths.append(self.rounds - run_start)

    # -- stability repair hooks ------------------------------------------------

    def reset_client(self, i: int, *, force_sol: int | None = None,
                     force_bid: float | None = None) -> None:
        """Re-enter buyer i. Without a forced candidate the whole ladder
        restarts at reservation bids. With one (stability repair) only the
        held contract is dropped and the next proposal is pinned to the given
        candidate and bid; the rest of the ladder state is kept so already
        settled contests are not re-fought."""
        c = self.clients[i]
        if len(c.p_min) == 0:
            return
        for j, inc in self.incumbents.items():
            kept = [(ci, s) for ci, s in inc if ci != i]
            if len(kept) != len(inc):
                self.incumbents[j] = kept
                self.dirty.add(j)
        self.status[i] = UNMATCHED
        self.needs_head[i] = True
        if force_sol is None:
            self.bids[i] = c.p_min.astype(float).copy()
            self.dead[i][:] = False
            self.k[i] = 0
        else:
            self._forced[i] = int(force_sol)
            self.dead[i][force_sol] = False
            if force_bid is not None:
                self.bids[i][force_sol] = float(force_bid)

    def accepted_solution(self, i: int) -> tuple[int, int] | None:
        for j, inc in self.incumbents.items():
            for ci, sol in inc:
                if ci == i:
                    return j, sol
        return None

    # -- result -----------------------------------------------------------------

    def outcome(self) -> MatchingOutcome:
        accepted = []
        for j in sorted(self.incumbents):
            for ci, sol in self.incumbents[j]:
                c = self.clients[ci]
                accepted.append(AcceptedSolution(
                    kind=c.kind, client_id=c.cid, bs_id=self.stations[j].bs.id,
                    sol=int(sol), bandwidth=float(c.bandwidth[sol]),
                    power=float(c.power[sol]), pay=float(self.bids[ci][sol]),
                    value_total=float(c.value_total[sol]),
                    valuation=float(c.valuation[sol]), presence=c.presence))
        e_vol: dict[tuple[str, int, int], float] = {}
        for i, c in enumerate(self.clients):
            for j in range(len(self.stations)):
                if self.ev[i, j] > 0.0:
                    e_vol[(c.kind, c.cid, self.stations[j].bs.id)] = float(self.ev[i, j])
        statuses = {(c.kind, c.cid): int(self.status[i])
                    for i, c in enumerate(self.clients)}
        return MatchingOutcome(
            accepted=accepted, statuses=statuses, rounds=self.rounds,
            round_bound=self.round_bound, run_lengths=list(self.run_lengths),
            traces=self.traces, e_vol=e_vol,
            proposals_total=self.proposals_total,
            responses_total=self.responses_total, bid_step=self.cfg.bid_step,
            v_max=self.v_max, p_min_global=self.p_min_global)


def run_matching(clients: list[EngineClient], stations: list[EngineStation],
                 cfg: EngineConfig) -> MatchingOutcome:
    eng = MatchingEngine(clients, stations, cfg)
    eng.run()
    return eng.outcome()
