"""Market entities, contracts, coalition formation, realized and expected
utilities, and the tractable risk bounds used by the matching layers.

Client keys are ("c", mu_id) for individual link buyers and ("s",
coalition_id) for sensing teams; contract keys append the station id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .values import Position2D, ValueWeights

_EPS = 1e-9


class CapacityError(ValueError):
    """Exact enumeration requested beyond its size limit."""


def _gt(a: float, b: float) -> bool:
    return a > b + _EPS * (1.0 + abs(b))


@dataclass(frozen=True, slots=True)
class MobileUser:
    id: int
    target_id: int
    rate_req: float
    sensing_req: float
    n_rx: int
    location: Position2D
    part_prob: float

    def __post_init__(self) -> None:
        if not (0.0 < self.part_prob <= 1.0):
            raise ValueError("part_prob must lie in (0, 1]")
        if self.rate_req < 0.0 or self.sensing_req < 0.0:
            raise ValueError("requirements must be >= 0")


@dataclass(frozen=True, slots=True)
class BaseStation:
    id: int
    bandwidth_total: float
    power_total: float
    location: Position2D
    n_tx: int
    b0: float
    overbook_b: float = 0.0
    overbook_p: float = 0.0

    def __post_init__(self) -> None:
        n = round(self.bandwidth_total / self.b0)
        if n < 1 or abs(self.bandwidth_total - n * self.b0) > 1e-6 * self.b0:
            raise ValueError("bandwidth_total must be a positive multiple of b0")
        if self.overbook_b < 0.0 or self.overbook_p < 0.0:
            raise ValueError("overbooking rates must be >= 0")
        if self.power_total <= 0.0:
            raise ValueError("power_total must be > 0")


@dataclass(frozen=True, slots=True)
class Coalition:
    id: int
    member_ids: tuple[int, ...]
    target_id: int

    def __post_init__(self) -> None:
        if not self.member_ids:
            raise ValueError("coalition must have members")
        if tuple(sorted(self.member_ids)) != self.member_ids:
            raise ValueError("member_ids must be sorted ascending")


@dataclass(frozen=True, slots=True)
class CommContract:
    mu_id: int
    bs_id: int
    bandwidth: float
    power: float
    pay: float
    pel_u: float
    pel_s: float
    value: float  # service valuation fixed at signing

    def __post_init__(self) -> None:
        if self.pay < 0.0 or self.pel_u < 0.0 or self.pel_s < 0.0:
            raise ValueError("pay and penalties must be >= 0")


@dataclass(frozen=True, slots=True)
class SensingContract:
    coalition_id: int
    bs_id: int
    bandwidth: float
    power: float
    pay: float
    pel_u: float
    pel_s: float
    value_max: float   # team accuracy valuation fixed at signing
    n_members: int

    def __post_init__(self) -> None:
        if self.pay < 0.0 or self.pel_u < 0.0 or self.pel_s < 0.0:
            raise ValueError("pay and penalties must be >= 0")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")

    @property
    def value_total(self) -> float:
        return self.n_members * self.value_max


@dataclass(frozen=True, slots=True)
class TempContract:
    kind: str          # "c" or "s"
    client_id: int
    bs_id: int
    bandwidth: float
    power: float
    pay: float
    value: float       # served valuation (team total for sensing)


@dataclass(frozen=True)
class Realization:
    alpha: dict[int, int]
    beta: dict[int, int]
    volunteers_c: dict[tuple[int, int], int] = field(default_factory=dict)
    volunteers_s: dict[tuple[int, int], int] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class RiskThresholds:
    rho1: float = 1.0
    rho2: float = 1.0
    rho3: float = 1.0
    rho4: float = 1.0
    u_min_c: float = 0.0
    u_min_s: float = 0.0
    u_max_c: float | None = None
    u_max_s: float | None = None

    def __post_init__(self) -> None:
        for r in (self.rho1, self.rho2, self.rho3, self.rho4):
            if not (0.0 < r <= 1.0):
                raise ValueError("risk thresholds must lie in (0, 1]")


@dataclass(frozen=True, slots=True)
class ResourceGrids:
    bandwidth_sub: tuple[int, ...]
    power_w: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.bandwidth_sub or not self.power_w:
            raise ValueError("grids must be nonempty")
        if any(n < 1 for n in self.bandwidth_sub) or any(p <= 0 for p in self.power_w):
            raise ValueError("grid points must be positive")
        if (tuple(sorted(self.bandwidth_sub)) != self.bandwidth_sub
                or tuple(sorted(self.power_w)) != self.power_w):
            raise ValueError("grids must be sorted ascending")


@dataclass(frozen=True)
class Market:
    """Immutable market instance: participants, channel qualities per
    (mu, bs) pair, value weights, risk thresholds, and the contract grids."""

    users: tuple[MobileUser, ...]
    bss: tuple[BaseStation, ...]
    coalitions: tuple[Coalition, ...]
    xi: dict[tuple[int, int], float]
    kappa: dict[tuple[int, int], float]
    weights: ValueWeights
    thresholds: RiskThresholds
    grids: ResourceGrids
    b0: float

    def user(self, mu_id: int) -> MobileUser:
        for u in self.users:
            if u.id == mu_id:
                return u
        raise KeyError(f"unknown MU id {mu_id}")

    def coalition(self, cid: int) -> Coalition:
        for c in self.coalitions:
            if c.id == cid:
                return c
        raise KeyError(f"unknown coalition id {cid}")

    def station(self, bs_id: int) -> BaseStation:
        for s in self.bss:
            if s.id == bs_id:
                return s
        raise KeyError(f"unknown BS id {bs_id}")


@dataclass(frozen=True)
class Expectations:
    """Expectation inputs for the closed-form expected utilities: presence
    probabilities and unconditional volunteer probabilities (as returned by
    expect_volunteer) keyed by contract. Volunteering implies presence, so the
    closed forms consume the conditional probability q / presence."""

    e_alpha: dict[int, float]
    e_beta: dict[int, float]
    e_vol: dict[tuple[str, int, int], float] = field(default_factory=dict)

    def vol(self, kind: str, client_id: int, bs_id: int) -> float:
        return self.e_vol.get((kind, client_id, bs_id), 0.0)

    def vol_given_present(self, kind: str, client_id: int, bs_id: int,
                          presence: float) -> float:
        q = self.e_vol.get((kind, client_id, bs_id), 0.0)
        if q <= 0.0:
            return 0.0
        return min(1.0, q / presence)


@dataclass(frozen=True, slots=True)
class RiskCheck:
    bound: float
    satisfied: bool


@dataclass(frozen=True, slots=True)
class BsRiskCheck:
    bandwidth_bound: float
    power_bound: float
    satisfied: bool


@dataclass(frozen=True, slots=True)
class Violation:
    constraint: str
    entity: str
    detail: str


# ---------------------------------------------------------------------------
# Coalitions and expectation operators


def form_coalitions(users: Sequence[MobileUser]) -> list[Coalition]:
    """One coalition per distinct target, members sorted; coalition id is the
    target id, which keeps ids stable under subsetting."""
    groups: dict[int, list[int]] = {}
    for u in users:
        groups.setdefault(u.target_id, []).append(u.id)
    return [Coalition(id=t, member_ids=tuple(sorted(ms)), target_id=t)
            for t, ms in sorted(groups.items())]


def expect_beta(coalition: Coalition, users: Sequence[MobileUser]) -> float:
    by_id = {u.id: u for u in users}
    prob_absent = 1.0
    for mid in coalition.member_ids:
        if mid not in by_id:
            raise ValueError(f"unknown member id {mid}")
        prob_absent *= 1.0 - by_id[mid].part_prob
    return 1.0 - prob_absent


def expect_vmax(coalition: Coalition, users: Sequence[MobileUser],
                per_member_values: Mapping[int, float]) -> float:
    """Ex-ante team valuation: max over members of part_prob x sensing value."""
    if not coalition.member_ids:
        raise ValueError("empty coalition")
    by_id = {u.id: u for u in users}
    best = -math.inf
    for mid in coalition.member_ids:
        if mid not in by_id or mid not in per_member_values:
            raise ValueError(f"unknown member id {mid}")
        v = per_member_values[mid]
        if v < 0.0:
            raise ValueError("sensing values must be >= 0")
        best = max(best, by_id[mid].part_prob * v)
    return best


# ---------------------------------------------------------------------------
# Volunteer policy (shared with the online executor)


@dataclass(frozen=True, slots=True)
class ContractLoad:
    """Per-contract load summary used by volunteer selection: presence is
    E[alpha] or E[beta] (1.0 for a realized presence)."""

    key: tuple[str, int, int]
    presence: float
    bandwidth: float
    power: float
    pel_s: float


def volunteer_order(loads: Sequence[ContractLoad], b_cap: float, p_cap: float) -> list[int]:
    """Rank contracts by volunteer priority: cheapest compensation per unit of
    capacity stress first; ties broken by client key."""
    def sort_key(i: int):
        ld = loads[i]
        stress = max(ld.bandwidth / b_cap, ld.power / p_cap)
        ratio = ld.pel_s / stress if stress > 0.0 else math.inf
        return (ratio, ld.key)
    return sorted(range(len(loads)), key=sort_key)


def volunteer_flags(present: np.ndarray, bandwidth: np.ndarray, power: np.ndarray,
                    b_cap: float, p_cap: float) -> np.ndarray:
    """Vectorized volunteer rule over participation cases.

    Inputs are in RANK order (volunteer_order). A present contract volunteers
    iff, with all higher-priority volunteers already removed, remaining demand
    still exceeds either capacity. Rows are independent cases.
    """
    pres = present.astype(float)
    db = pres * bandwidth
    dp = pres * power
    rem_b = db.sum(axis=1, keepdims=True) - (np.cumsum(db, axis=1) - db)
    rem_p = dp.sum(axis=1, keepdims=True) - (np.cumsum(dp, axis=1) - dp)
    over = (rem_b > b_cap + _EPS * (1.0 + b_cap)) | (rem_p > p_cap + _EPS * (1.0 + p_cap))
    return (pres > 0.0) & over


def expect_volunteer(bs: BaseStation, loads: Sequence[ContractLoad],
                     mode: str = "exact", n_samples: int = 2000,
                     rng: np.random.Generator | None = None,
                     ) -> dict[tuple[str, int, int], float]:
    """Volunteer probability per contracted client at one station.

    exact: enumerate all participation cases (chunked), weighting each case by
    the product of presence probabilities. monte_carlo: unbiased estimate from
    n_samples sampled participation vectors.
    """
    n = len(loads)
    if n == 0:
        return {}
    order = volunteer_order(loads, bs.bandwidth_total, bs.power_total)
    bw = np.array([loads[i].bandwidth for i in order])
    pw = np.array([loads[i].power for i in order])
    pr = np.array([loads[i].presence for i in order])

    if mode == "exact":
        if n > 20:
            raise CapacityError("exact enumeration limited to 20 clients; use monte_carlo")
        total = np.zeros(n)
        n_cases = 1 << n
        chunk = 1 << 16
        bits = np.arange(n)
        for start in range(0, n_cases, chunk):
            idx = np.arange(start, min(start + chunk, n_cases), dtype=np.int64)
            present = (idx[:, None] >> bits[None, :]) & 1
            weights = np.prod(np.where(present == 1, pr, 1.0 - pr), axis=1)
            flags = volunteer_flags(present, bw, pw, bs.bandwidth_total, bs.power_total)
            total += weights @ flags
        probs = total
    elif mode == "monte_carlo":
        gen = rng if rng is not None else np.random.default_rng(0)
        present = gen.random((n_samples, n)) < pr
        flags = volunteer_flags(present, bw, pw, bs.bandwidth_total, bs.power_total)
        probs = flags.mean(axis=0)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    return {loads[order[j]].key: float(probs[j]) for j in range(n)}


# ---------------------------------------------------------------------------
# Utility closed forms. The scalar helpers double as numpy ufuncs.


def eu_client_comm(value, pay, pel_u, pel_s, e_a, e_v):
    """Link buyer expected utility: served value net of pay when present and
    not displaced, breach penalty when absent, compensation when displaced."""
    return e_a * (1.0 - e_v) * (value - pay) - (1.0 - e_a) * pel_u + e_a * e_v * pel_s


def eu_client_sense(value_total, pay, pel_u, pel_s, e_b, e_v):
    """Sensing team expected utility with the team-size value already folded
    into value_total."""
    return e_b * e_v * pel_s - (1.0 - e_b) * pel_u + (1.0 - e_v) * e_b * (value_total - pay)


def eu_bs_term(pay, power_cost, pel_u, pel_s, e_p, e_v):
    """Station-side expected utility of one contract."""
    return ((1.0 - e_v) * e_p * (pay - power_cost)
            + (1.0 - e_p) * pel_u - e_p * e_v * pel_s)


def mu_comm_utility(contract: CommContract, realization: Realization) -> float:
    a = realization.alpha[contract.mu_id]
    v = realization.volunteers_c.get((contract.mu_id, contract.bs_id), 0)
    return float(eu_client_comm(contract.value, contract.pay, contract.pel_u,
                                contract.pel_s, a, v))


def coalition_sensing_utility(contract: SensingContract, realization: Realization) -> float:
    b = realization.beta[contract.coalition_id]
    v = realization.volunteers_s.get((contract.coalition_id, contract.bs_id), 0)
    return float(eu_client_sense(contract.value_total, contract.pay, contract.pel_u,
                                 contract.pel_s, b, v))


def bs_utility(bs: BaseStation, comm_contracts: Iterable[CommContract],
               sensing_contracts: Iterable[SensingContract],
               realization: Realization, w: ValueWeights) -> float:
    total = 0.0
    for c in comm_contracts:
        a = realization.alpha[c.mu_id]
        v = realization.volunteers_c.get((c.mu_id, c.bs_id), 0)
        total += eu_bs_term(c.pay, w.omega5 * c.power, c.pel_u, c.pel_s, a, v)
    for s in sensing_contracts:
        b = realization.beta[s.coalition_id]
        v = realization.volunteers_s.get((s.coalition_id, s.bs_id), 0)
        total += eu_bs_term(s.pay, w.omega5 * s.power, s.pel_u, s.pel_s, b, v)
    return float(total)


def expected_mu_comm_utility(contract: CommContract, exp: Expectations) -> float:
    e_a = exp.e_alpha[contract.mu_id]
    e_v = exp.vol_given_present("c", contract.mu_id, contract.bs_id, e_a)
    return float(eu_client_comm(contract.value, contract.pay, contract.pel_u,
                                contract.pel_s, e_a, e_v))


def expected_coalition_utility(contract: SensingContract, exp: Expectations) -> float:
    e_b = exp.e_beta[contract.coalition_id]
    e_v = exp.vol_given_present("s", contract.coalition_id, contract.bs_id, e_b)
    return float(eu_client_sense(contract.value_total, contract.pay, contract.pel_u,
                                 contract.pel_s, e_b, e_v))


def expected_bs_utility(bs: BaseStation, comm_contracts: Iterable[CommContract],
                        sensing_contracts: Iterable[SensingContract],
                        exp: Expectations, w: ValueWeights) -> float:
    total = 0.0
    for c in comm_contracts:
        e_a = exp.e_alpha[c.mu_id]
        total += eu_bs_term(c.pay, w.omega5 * c.power, c.pel_u, c.pel_s, e_a,
                            exp.vol_given_present("c", c.mu_id, c.bs_id, e_a))
    for s in sensing_contracts:
        e_b = exp.e_beta[s.coalition_id]
        total += eu_bs_term(s.pay, w.omega5 * s.power, s.pel_u, s.pel_s, e_b,
                            exp.vol_given_present("s", s.coalition_id, s.bs_id, e_b))
    return float(total)


# ---------------------------------------------------------------------------
# Risk bounds


def markov_bound(e_utility: float, u_max: float, u_min: float) -> float:
    if u_max <= u_min:
        raise ValueError("u_max must exceed u_min")
    return (u_max - e_utility) / (u_max - u_min)


def client_risk(contract: CommContract | SensingContract, exp: Expectations,
                thresholds: RiskThresholds) -> RiskCheck:
    """Markov bound on the probability that the client's utility falls below
    its floor; u_max defaults to the best case (present, not displaced)."""
    if isinstance(contract, CommContract):
        e_u = expected_mu_comm_utility(contract, exp)
        u_max = thresholds.u_max_c if thresholds.u_max_c is not None else (
            contract.value - contract.pay)
        u_min = thresholds.u_min_c
        rho = thresholds.rho3
    else:
        e_u = expected_coalition_utility(contract, exp)
        u_max = thresholds.u_max_s if thresholds.u_max_s is not None else (
            contract.value_total - contract.pay)
        u_min = thresholds.u_min_s
        rho = thresholds.rho4
    bound = markov_bound(e_u, u_max, u_min)
    return RiskCheck(bound=bound, satisfied=not _gt(bound, rho))


def bs_risk(bs: BaseStation, comm_contracts: Iterable[CommContract],
            sensing_contracts: Iterable[SensingContract],
            exp: Expectations, thresholds: RiskThresholds) -> BsRiskCheck:
    eb = sum(exp.e_alpha[c.mu_id] * c.bandwidth for c in comm_contracts)
    ep = sum(exp.e_alpha[c.mu_id] * c.power for c in comm_contracts)
    eb += sum(exp.e_beta[s.coalition_id] * s.bandwidth for s in sensing_contracts)
    ep += sum(exp.e_beta[s.coalition_id] * s.power for s in sensing_contracts)
    b_bound = eb / bs.bandwidth_total
    p_bound = ep / bs.power_total
    ok = (not _gt(b_bound, thresholds.rho1)) and (not _gt(p_bound, thresholds.rho2))
    return BsRiskCheck(bandwidth_bound=b_bound, power_bound=p_bound, satisfied=ok)


# ---------------------------------------------------------------------------
# Online utilities and feasibility audit


def online_utilities(temp_contracts: Iterable[TempContract],
                     ) -> tuple[dict[tuple[str, int], float], dict[int, float]]:
    clients: dict[tuple[str, int], float] = {}
    stations: dict[int, float] = {}
    for t in temp_contracts:
        ck = (t.kind, t.client_id)
        clients[ck] = clients.get(ck, 0.0) + (t.value - t.pay)
        stations[t.bs_id] = stations.get(t.bs_id, 0.0) + t.pay
    return clients, stations


def derive_beta(alpha: Mapping[int, int], coalitions: Sequence[Coalition]) -> dict[int, int]:
    return {c.id: int(any(alpha[m] for m in c.member_ids)) for c in coalitions}


def check_feasibility(market: Market, comm_contracts: Sequence[CommContract],
                      sensing_contracts: Sequence[SensingContract],
                      exp: Expectations, *, risk_checks: bool = True,
                      requirements: Mapping[tuple[str, int], float] | None = None,
                      ) -> list[Violation]:
    """Audit a matching outcome against every seller constraint (booking caps,
    seller risk) and buyer constraint (price caps, service floors, grid
    bounds, buyer risk). Empty report means feasible."""
    out: list[Violation] = []
    sub_lo, sub_hi = market.grids.bandwidth_sub[0], market.grids.bandwidth_sub[-1]
    p_lo, p_hi = market.grids.power_w[0], market.grids.power_w[-1]
    th = market.thresholds

    per_bs_b: dict[int, float] = {s.id: 0.0 for s in market.bss}
    per_bs_p: dict[int, float] = {s.id: 0.0 for s in market.bss}
    seen_comm: dict[int, int] = {}
    seen_sense: dict[int, int] = {}

    def grid_ok(tag: str, ent: str, bandwidth: float, power: float) -> None:
        n = bandwidth / market.b0
        if _gt(sub_lo, n) or _gt(n, sub_hi) or abs(n - round(n)) > 1e-6:
            out.append(Violation("grid-b", ent, f"bandwidth {bandwidth} outside grid"))
        if _gt(p_lo, power) or _gt(power, p_hi):
            out.append(Violation("grid-p", ent, f"power {power} outside grid"))

    def risk_ineq_ok(e_u: float, u_max: float, u_min: float, rho: float) -> bool:
        # Multiplied-out Markov bound; stays defined when u_max == u_min.
        return not _gt(u_max - e_u, rho * (u_max - u_min))

    for c in comm_contracts:
        ent = f"mu:{c.mu_id}/bs:{c.bs_id}"
        seen_comm[c.mu_id] = seen_comm.get(c.mu_id, 0) + 1
        per_bs_b[c.bs_id] += c.bandwidth
        per_bs_p[c.bs_id] += c.power
        if _gt(c.pay, c.value):
            out.append(Violation("price-cap", ent, f"pay {c.pay} exceeds value {c.value}"))
        if requirements is not None:
            req = requirements.get(("c", c.mu_id), 0.0)
            if _gt(req, c.value):
                out.append(Violation("rate-floor", ent,
                                     f"value {c.value} below requirement {req}"))
        grid_ok("c", ent, c.bandwidth, c.power)
        if risk_checks:
            e_u = expected_mu_comm_utility(c, exp)
            u_max = th.u_max_c if th.u_max_c is not None else c.value - c.pay
            if not risk_ineq_ok(e_u, u_max, th.u_min_c, th.rho3):
                out.append(Violation("buyer-risk", ent,
                                     f"expected utility {e_u:.4g} too far below {u_max:.4g}"))

    for s in sensing_contracts:
        ent = f"coalition:{s.coalition_id}/bs:{s.bs_id}"
        seen_sense[s.coalition_id] = seen_sense.get(s.coalition_id, 0) + 1
        per_bs_b[s.bs_id] += s.bandwidth
        per_bs_p[s.bs_id] += s.power
        if _gt(s.pay, s.value_max):
            out.append(Violation("price-cap", ent,
                                 f"pay {s.pay} exceeds value cap {s.value_max}"))
        if requirements is not None:
            req = requirements.get(("s", s.coalition_id), 0.0)
            if _gt(req, s.value_max):
                out.append(Violation("sensing-floor", ent,
                                     f"value {s.value_max} below requirement {req}"))
        grid_ok("s", ent, s.bandwidth, s.power)
        if risk_checks:
            e_u = expected_coalition_utility(s, exp)
            u_max = th.u_max_s if th.u_max_s is not None else s.value_total - s.pay
            if not risk_ineq_ok(e_u, u_max, th.u_min_s, th.rho4):
                out.append(Violation("buyer-risk", ent,
                                     f"expected utility {e_u:.4g} too far below {u_max:.4g}"))

    for mu_id, n in seen_comm.items():
        if n > 1:
            out.append(Violation("single-contract", f"mu:{mu_id}", f"{n} link contracts"))
    for cid, n in seen_sense.items():
        if n > 1:
            out.append(Violation("single-contract", f"coalition:{cid}",
                                 f"{n} sensing contracts"))

    for bs in market.bss:
        cap_b = (1.0 + bs.overbook_b) * bs.bandwidth_total
        cap_p = (1.0 + bs.overbook_p) * bs.power_total
        if _gt(per_bs_b[bs.id], cap_b):
            out.append(Violation("booking-b", f"bs:{bs.id}",
                                 f"booked {per_bs_b[bs.id]:.0f} over cap {cap_b:.0f}"))
        if _gt(per_bs_p[bs.id], cap_p):
            out.append(Violation("booking-p", f"bs:{bs.id}",
                                 f"booked {per_bs_p[bs.id]:.2f} over cap {cap_p:.2f}"))
        if risk_checks:
            cc = [c for c in comm_contracts if c.bs_id == bs.id]
            sc = [s for s in sensing_contracts if s.bs_id == bs.id]
            rk = bs_risk(bs, cc, sc, exp, th)
            if _gt(rk.bandwidth_bound, th.rho1):
                out.append(Violation("seller-risk-b", f"bs:{bs.id}",
                                     f"bandwidth risk bound {rk.bandwidth_bound:.4f}"))
            if _gt(rk.power_bound, th.rho2):
                out.append(Violation("seller-risk-p", f"bs:{bs.id}",
                                     f"power risk bound {rk.power_bound:.4f}"))
    return out
