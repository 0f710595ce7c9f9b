"""Numeric service models: link rate and value, sensing-accuracy value, and the
Fisher-information cross-check oracle for the simplified error bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

SPEED_OF_LIGHT = 299_792_458.0

_REL_TOL = 1e-9


class UnboundedPebError(ValueError):
    """The position error bound diverges (no subchannels or no power)."""


class SingularGeometryError(ValueError):
    """The bound geometry degenerates (line-of-sight angle has cos = 0)."""


@dataclass(frozen=True, slots=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("coordinates must be finite")


@dataclass(frozen=True, slots=True)
class LinkQuality:
    """Per-pair channel quality: xi is gain-to-noise per unit power, kappa the
    normalized sensing capability, zeta the accuracy-bound coefficient."""

    xi: float
    kappa: float
    zeta: float = 1.0

    def __post_init__(self) -> None:
        if self.xi <= 0.0:
            raise ValueError("xi must be > 0")
        if self.kappa < 0.0:
            raise ValueError("kappa must be >= 0")
        if self.zeta <= 0.0:
            raise ValueError("zeta must be > 0")


@dataclass(frozen=True, slots=True)
class ValueWeights:
    """Scaling knobs for service values: omega1 prices rate, omega2/omega3 are
    the power/bandwidth exponents, omega4 prices accuracy, omega5 is the unit
    power cost charged to the seller."""

    omega1: float
    omega2: float
    omega3: float
    omega4: float
    omega5: float

    def __post_init__(self) -> None:
        if self.omega1 <= 0.0 or self.omega4 <= 0.0:
            raise ValueError("omega1 and omega4 must be > 0")
        if not (0.0 <= self.omega2 <= 1.0 and 0.0 <= self.omega3 <= 1.0):
            raise ValueError("omega2 and omega3 must lie in [0, 1]")
        if self.omega5 < 0.0:
            raise ValueError("omega5 must be >= 0")


@dataclass(frozen=True, slots=True)
class SensingGeometry:
    d_mu_target: float
    d_target_bs: float
    tau: float
    theta: float
    phi: float


@dataclass(frozen=True, slots=True)
class CrlbChannel:
    """Channel description for the bound oracle; t_s is the sampling period,
    n_sub the sensing subchannel count."""

    n_tx: int
    n_rx: int
    h: float
    rho: float
    sigma_s2: float
    t_s: float
    n_sub: int

    def __post_init__(self) -> None:
        if self.n_tx < 1 or self.n_rx < 1:
            raise ValueError("antenna counts must be >= 1")
        if min(self.h, self.rho, self.sigma_s2, self.t_s) <= 0.0 or self.n_sub < 1:
            raise ValueError("channel fields must be positive")


def compute_geometry(mu: Position2D, bs: Position2D, target: Position2D) -> SensingGeometry:
    """Distances, round-trip propagation time, and departure/arrival angles for
    one observer/target/station triple. Zero-distance denominators make the
    corresponding angle 0 by convention."""
    d_mt = math.hypot(target.x - mu.x, target.y - mu.y)
    d_tb = math.hypot(target.x - bs.x, target.y - bs.y)
    tau = (d_mt + d_tb) / SPEED_OF_LIGHT
    if d_mt == 0.0:
        theta = 0.0
    else:
        theta = math.acos(max(-1.0, min(1.0, (mu.x - target.x) / d_mt)))
    if d_tb == 0.0:
        phi = 0.0
    else:
        phi = math.pi - math.acos(max(-1.0, min(1.0, (target.x - bs.x) / d_tb)))
    return SensingGeometry(d_mu_target=d_mt, d_target_bs=d_tb, tau=tau, theta=theta, phi=phi)


def _subchannel_count(bandwidth: float, b0: float) -> int:
    n = round(bandwidth / b0)
    if n < 1 or abs(bandwidth - n * b0) > _REL_TOL * max(bandwidth, b0):
        raise ValueError(f"bandwidth {bandwidth} is not a positive multiple of b0={b0}")
    return int(n)


def comm_rate(bandwidth: float, power: float, link: LinkQuality, b0: float) -> float:
    """Achievable rate in bits/s over an integer number of subchannels."""
    _subchannel_count(bandwidth, b0)
    if power < 0.0:
        raise ValueError("power must be >= 0")
    return bandwidth * math.log2(1.0 + b0 * power * link.xi / bandwidth)


def comm_value(bandwidth: float, power: float, link: LinkQuality, b0: float,
               w: ValueWeights) -> float:
    return w.omega1 * comm_rate(bandwidth, power, link, b0)


def peb_simplified(n_sub: int, power: float, zeta: float) -> float:
    """Position error bound zeta / sqrt(n_sub * power)."""
    if zeta <= 0.0:
        raise ValueError("zeta must be > 0")
    if n_sub <= 0 or power <= 0.0:
        raise UnboundedPebError("error bound diverges without subchannels and power")
    return zeta / math.sqrt(n_sub * power)


def sensing_value(power: float, bandwidth: float, link: LinkQuality, w: ValueWeights) -> float:
    """Accuracy value omega4 * kappa * P^omega2 * B^omega3."""
    if power < 0.0 or bandwidth < 0.0:
        raise ValueError("power and bandwidth must be >= 0")
    return w.omega4 * link.kappa * power ** w.omega2 * bandwidth ** w.omega3


def crlb_zeta_oracle(ch: CrlbChannel, geom: SensingGeometry, power: float) -> dict[str, float]:
    """Variance-bound coefficients for the angle/angle/delay estimates and the
    error bound composed from the information-matrix diagonal.

    All three variances are normalized so each scales as 1/(n_sub * power); the
    delay term absorbs its subchannel polynomial into the coefficient via the
    large-array limit, which keeps the composed bound exactly proportional to
    (n_sub * power)^(-1/2). The departure-angle term divides by the
    target-to-station distance and the arrival-angle term by the
    observer-to-target distance.
    """
    if power <= 0.0:
        raise ValueError("power must be > 0")
    cos_t = math.cos(geom.theta)
    if abs(cos_t) < 1e-12:
        raise SingularGeometryError("cos(theta) = 0 makes the angle bounds diverge")
    if geom.d_mu_target <= 0.0 or geom.d_target_bs <= 0.0:
        raise SingularGeometryError("degenerate zero distance")

    nt, nr = ch.n_tx, ch.n_rx
    common = 3.0 * ch.sigma_s2 * ch.rho / (16.0 * math.pi ** 2 * ch.h ** 2 * cos_t ** 2)
    zeta1 = common / (nr * nt * (nt + 1) * (2 * nt + 1))
    zeta2 = common / (nt * nr * (nr + 1) * (2 * nr + 1))
    zeta3 = 3.0 * ch.sigma_s2 * ch.rho * ch.t_s ** 2 / (
        8.0 * math.pi ** 2 * ch.h ** 2 * nt * nr)

    np_prod = ch.n_sub * power
    sin_t = math.sin(geom.theta)
    cos_p = math.cos(geom.phi)
    sin_p = math.sin(geom.phi)
    c2 = SPEED_OF_LIGHT ** 2
    j11 = np_prod * (sin_t ** 2 / (zeta1 * geom.d_target_bs ** 2)
                     + cos_t ** 2 / (zeta2 * geom.d_mu_target ** 2)
                     + (cos_t + cos_p) ** 2 / (zeta3 * c2))
    j22 = np_prod * (cos_t ** 2 / (zeta1 * geom.d_target_bs ** 2)
                     + sin_t ** 2 / (zeta2 * geom.d_mu_target ** 2)
                     + (sin_t + sin_p) ** 2 / (zeta3 * c2))
    peb = math.sqrt(1.0 / j11 + 1.0 / j22)
    return {"zeta1": zeta1, "zeta2": zeta2, "zeta3": zeta3, "peb": peb}
