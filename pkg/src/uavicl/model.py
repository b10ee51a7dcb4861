"""Scenario description and outage-rate channel model.

A network of three ground base stations (BSs) plus one UAV serves K ground
users. Each transmitter splits its power budget between communication and
positioning and splits its bandwidth across users. Communication links obey a
unified Rician fading model parameterized by the multipath power ratio
``omega``: the squared channel gain, normalized by ``g*omega/2`` (``g`` the
distance-based mean gain), follows a noncentral chi-square distribution with
2 degrees of freedom and noncentrality ``2(1-omega)/omega``. With outage
tolerance ``eps`` the usable fraction of the mean gain is therefore

    factor(omega, eps) = (omega/2) * Finv(eps; 2, 2(1-omega)/omega),

and the guaranteed (outage) rate of a link with bandwidth fraction ``s`` and
power ``p`` over distance ``d`` is

    rate = s*B*log2(1 + factor * beta * p / (s*B*N0*d**iota)).

All quantities are linear-scale SI; dB/dBm inputs are converted once at
scenario load time (see ``harness.load_scenario``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

__all__ = [
    "Position3",
    "ChannelParams",
    "ScenarioConfig",
    "Allocation",
    "RateTable",
    "Solution",
    "noncentrality",
    "noncentral_chi2_cdf",
    "inv_noncentral_chi2_cdf",
    "fading_factor",
    "link_gain",
    "link_rate",
    "evaluate_rates",
]

LinkKind = Literal["g2g", "a2g"]

#: transmitter row layout used by every (4, K) array in the package
ROW_BS1, ROW_BS2, ROW_BS3, ROW_UAV = 0, 1, 2, 3


@dataclass(frozen=True)
class Position3:
    """A 3D coordinate in meters; ``h`` is altitude above ground."""

    x: float
    y: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.h)):
            raise ValueError(f"non-finite coordinate: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h], dtype=float)

    @staticmethod
    def from_array(a: Sequence[float]) -> "Position3":
        x, y, h = (float(v) for v in a)
        return Position3(x, y, h)

    def distance_to(self, other: "Position3") -> float:
        return float(np.linalg.norm(self.as_array() - other.as_array()))


def positions_to_array(positions: Sequence[Position3]) -> np.ndarray:
    """Stack positions into an (N, 3) float array."""
    return np.array([p.as_array() for p in positions], dtype=float)


@dataclass
class ChannelParams:
    """Channel and positioning-signal constants (all linear-scale SI).

    Attributes:
        beta: reference path gain at 1 m (linear, from dB at load time).
        iota_g: ground-to-ground path-loss exponent.
        iota_a: air-to-ground path-loss exponent.
        omega_g: G2G multipath power ratio in [0, 1] (1 = no LoS component).
        omega_a: A2G multipath power ratio in [0, 1].
        eps_out: outage probability tolerance in (0, 1).
        n0: noise power density in W/Hz.
        b_comm: communication bandwidth in Hz.
        b_pos: positioning-signal bandwidth in Hz.
        psi: positioning waveform constant in s^2 (ToA variance = psi/SNR).
        sigma_nlos2: NLoS ToA error variance floor in s^2 (ground anchors).
    """

    beta: float
    iota_g: float = 2.3
    iota_a: float = 2.0
    omega_g: float = 1.0
    omega_a: float = 0.2
    eps_out: float = 0.1
    n0: float = 10 ** (-18.7)
    b_comm: float = 1e6
    b_pos: float = 1.8e5
    psi: float = 5.8e-16
    sigma_nlos2: float = 6e-18
    # derived outage factors, filled in __post_init__
    fading_g2g: float = field(init=False, repr=False)
    fading_a2g: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive (linear scale)")
        if self.iota_g < 1 or self.iota_a < 1:
            raise ValueError("path-loss exponents must be >= 1")
        if not 0 <= self.omega_a <= self.omega_g <= 1:
            raise ValueError("require 0 <= omega_a <= omega_g <= 1")
        if not 0 < self.eps_out < 1:
            raise ValueError("eps_out must lie in (0, 1)")
        for name in ("n0", "b_comm", "b_pos", "psi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma_nlos2 < 0:
            raise ValueError("sigma_nlos2 must be nonnegative")
        self.fading_g2g = fading_factor(self.omega_g, self.eps_out)
        self.fading_a2g = fading_factor(self.omega_a, self.eps_out)

    def fading(self, kind: LinkKind) -> float:
        return self.fading_g2g if kind == "g2g" else self.fading_a2g

    def iota(self, kind: LinkKind) -> float:
        return self.iota_g if kind == "g2g" else self.iota_a


@dataclass
class ScenarioConfig:
    """A full problem instance.

    ``bs`` holds the three ground anchors (index 0 is the TDoA reference),
    ``users`` the K target users. ``uav_pos_power`` is the fixed UAV
    positioning power; the three BS positioning powers are decision
    variables of the outer search. ``zeta`` interpolates each user's
    accuracy threshold between the feasible-interval endpoints,
    ``eps_k = lb_k + zeta*(ub_k - lb_k)``, computed at the reference
    positioning power of 0.15 W unless overridden per user.
    """

    bs: tuple
    users: tuple
    channel: ChannelParams
    p_max: float = 1.0
    r_th: float = 2.5e6
    uav_pos_power: float = 0.2
    zeta: float = 0.7
    accuracy_overrides: Optional[dict] = None
    altitude_bounds: tuple = (50.0, 1000.0)
    seed: int = 1

    def __post_init__(self) -> None:
        self.bs = tuple(self.bs)
        self.users = tuple(self.users)
        if len(self.bs) != 3:
            raise ValueError("exactly three ground BS anchors are required")
        if len(self.users) < 2:
            raise ValueError("at least two users are required")
        if not self.p_max > self.uav_pos_power >= 0:
            raise ValueError("require p_max > uav_pos_power >= 0")
        if self.r_th < 0:
            raise ValueError("r_th must be nonnegative")
        if not 0 <= self.zeta <= 1:
            raise ValueError("zeta must lie in [0, 1]")
        hmin, hmax = self.altitude_bounds
        if not 0 <= hmin < hmax:
            raise ValueError("altitude_bounds must satisfy 0 <= hmin < hmax")
        b = positions_to_array(self.bs)
        # collinear horizontal BS layouts make the cone geometry degenerate
        e1 = b[1, :2] - b[0, :2]
        e2 = b[2, :2] - b[0, :2]
        area2 = abs(e1[0] * e2[1] - e1[1] * e2[0])
        if area2 < 1e-9:
            raise ValueError("the three BSs are horizontally collinear")

    @property
    def n_users(self) -> int:
        return len(self.users)

    def bs_array(self) -> np.ndarray:
        return positions_to_array(self.bs)

    def users_array(self) -> np.ndarray:
        return positions_to_array(self.users)

    def search_box(self, margin: float = 200.0) -> np.ndarray:
        """Horizontal bounding box of all nodes, padded; shape (2, 2)."""
        pts = np.vstack([self.bs_array()[:, :2], self.users_array()[:, :2]])
        return np.array(
            [pts.min(axis=0) - margin, pts.max(axis=0) + margin]
        )


@dataclass
class Allocation:
    """Resource allocation of the four transmitters.

    Rows follow the package-wide layout BS1, BS2, BS3, UAV. Row j satisfies
    ``comm_power[j].sum() + pos_power[j] == p_max`` and
    ``bandwidth[j].sum() == 1``.
    """

    comm_power: np.ndarray  # (4, K) watts
    pos_power: np.ndarray  # (4,) watts
    bandwidth: np.ndarray  # (4, K) fractions

    def __post_init__(self) -> None:
        self.comm_power = np.asarray(self.comm_power, dtype=float)
        self.pos_power = np.asarray(self.pos_power, dtype=float)
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)

    def validate(self, p_max: float, atol: float = 1e-8) -> None:
        if self.comm_power.shape != self.bandwidth.shape or self.comm_power.shape[0] != 4:
            raise ValueError("comm_power/bandwidth must both be (4, K)")
        if (self.comm_power < -atol).any() or (self.bandwidth < -atol).any() or (
            self.pos_power < -atol
        ).any():
            raise ValueError("allocation entries must be nonnegative")
        row_power = self.comm_power.sum(axis=1) + self.pos_power
        if not np.allclose(row_power, p_max, rtol=0, atol=atol * max(p_max, 1.0)):
            raise ValueError(f"per-row power must equal p_max: got {row_power}")
        if not np.allclose(self.bandwidth.sum(axis=1), 1.0, rtol=0, atol=atol):
            raise ValueError("per-row bandwidth fractions must sum to 1")


@dataclass
class RateTable:
    """Per-link and per-user outage rates in bits/s."""

    link_rates: np.ndarray  # (4, K)
    user_rates: np.ndarray  # (K,)
    sum_rate: float

    @staticmethod
    def from_links(link_rates: np.ndarray) -> "RateTable":
        link_rates = np.asarray(link_rates, dtype=float)
        user = link_rates.sum(axis=0)
        return RateTable(link_rates, user, float(user.sum()))


@dataclass
class Solution:
    """Result of a joint placement/allocation solve, with diagnostics."""

    uav: Position3
    alloc: Allocation
    rates: RateTable
    objective: float
    diagnostics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# noncentral chi-square machinery (2k degrees of freedom)
# ---------------------------------------------------------------------------


def noncentrality(omega: float) -> float:
    """Noncentrality parameter 2(1-omega)/omega of the normalized gain.

    Raises for ``omega == 0``: a pure-LoS channel is deterministic and has no
    fading distribution; callers should use the deterministic gain path.
    """
    if omega == 0:
        raise ValueError("pure LoS: noncentrality undefined, use deterministic gain path")
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    return 2.0 * (1.0 - omega) / omega


def noncentral_chi2_cdf(x: float, dof: int, lam: float, tail_tol: float = 1e-12) -> float:
    """CDF of the noncentral chi-square distribution with even ``dof``.

    Uses the Poisson mixture of central chi-square CDFs,

        F(x; dof, lam) = sum_i e^{-lam/2} (lam/2)^i / i! * Fc(x; dof + 2i),

    truncated once the remaining Poisson tail mass is below ``tail_tol``
    (each central CDF is <= 1, so the tail mass bounds the truncation error).
    For even degrees of freedom the central CDF is the Erlang closed form
    ``Fc(x; 2m) = 1 - e^{-x/2} sum_{j<m} (x/2)^j / j!``, evaluated by a
    shared running recurrence.
    """
    if dof < 2 or dof % 2 != 0:
        raise ValueError("only even dof >= 2 are supported")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if x <= 0:
        return 0.0
    m = dof // 2
    half_x = 0.5 * x
    half_lam = 0.5 * lam

    # Erlang tail sum_{j<m+i} e^{-x/2} (x/2)^j / j!, advanced as i grows
    erlang_term = math.exp(-half_x)
    erlang_tail = erlang_term  # j = 0 term
    for j in range(1, m):
        erlang_term *= half_x / j
        erlang_tail += erlang_term
    next_j = m

    pois = math.exp(-half_lam)  # Poisson weight, i = 0
    pois_used = 0.0
    total = 0.0
    i = 0
    while True:
        total += pois * (1.0 - min(erlang_tail, 1.0))
        pois_used += pois
        if 1.0 - pois_used < tail_tol or pois_used >= 1.0:
            break
        i += 1
        if i > 100000:
            raise RuntimeError("noncentral chi2 CDF series failed to converge")
        pois *= half_lam / i
        erlang_term *= half_x / next_j
        erlang_tail += erlang_term
        next_j += 1
    return min(max(total, 0.0), 1.0)


def inv_noncentral_chi2_cdf(
    p: float,
    dof: int,
    lam: float,
    rel_tol: float = 1e-10,
    max_iter: int = 400,
) -> float:
    """Quantile ``x`` with ``F(x; dof, lam) = p``, by bracketed bisection.

    The bracket starts at [0, dof + lam + 1] and doubles its upper end until
    it encloses ``p``; bisection then runs to ``rel_tol`` relative width.
    """
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    hi = dof + lam + 1.0
    for _ in range(200):
        if noncentral_chi2_cdf(hi, dof, lam) > p:
            break
        hi *= 2.0
    else:
        raise RuntimeError("quantile bracket expansion failed")
    lo = 0.0
    for i in range(max_iter):
        mid = 0.5 * (lo + hi)
        if noncentral_chi2_cdf(mid, dof, lam) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rel_tol * max(hi, 1e-300):
            return 0.5 * (lo + hi)
    residual = noncentral_chi2_cdf(0.5 * (lo + hi), dof, lam) - p
    raise RuntimeError(
        f"quantile bisection did not converge: residual {residual:.3e} after {max_iter} iterations"
    )


def fading_factor(omega: float, eps_out: float) -> float:
    """Effective outage channel factor multiplying the mean link gain.

    The squared gain normalized by ``g*omega/2`` is noncentral chi-square
    with 2 dof and noncentrality ``2(1-omega)/omega``, so the eps-outage
    gain is ``g * (omega/2) * Finv(eps; 2, lam)``. The omega/2 scaling is
    part of this factor; for the reference parameters (omega, eps) =
    (1.0, 0.1) and (0.2, 0.1) it evaluates to 0.1054 and 0.3157. A pure-LoS
    channel (omega = 0) is deterministic, so the factor is exactly 1.
    """
    if omega == 0:
        return 1.0
    if not 0 < eps_out < 1:
        raise ValueError("eps_out must lie in (0, 1)")
    lam = noncentrality(omega)
    return 0.5 * omega * inv_noncentral_chi2_cdf(eps_out, 2, lam)


# ---------------------------------------------------------------------------
# link rates
# ---------------------------------------------------------------------------


def link_gain(dist: float, kind: LinkKind, ch: ChannelParams) -> float:
    """Per-watt effective SNR of a link: ``factor*beta / (B*N0*d^iota)``.

    With bandwidth fraction ``s`` and power ``p`` the link SNR is
    ``gain * p / s`` and the rate is ``s*B*log2(1 + gain*p/s)``.
    """
    if dist <= 0:
        raise ValueError("co-located transmitter and user")
    return ch.fading(kind) * ch.beta / (ch.b_comm * ch.n0 * dist ** ch.iota(kind))


def link_rate(s: float, p: float, dist: float, kind: LinkKind, ch: ChannelParams) -> float:
    """Outage rate of one link in bits/s.

    Returns 0 for ``s == 0`` or ``p == 0`` (the continuous limit of
    ``s*B*log2(1 + gain*p/s)`` at the boundary), keeping allocation
    objectives well defined at simplex vertices.
    """
    if s < 0 or p < 0:
        raise ValueError("s and p must be nonnegative")
    if s == 0.0 or p == 0.0:
        return 0.0
    snr = link_gain(dist, kind, ch) * p / s
    return s * ch.b_comm * math.log2(1.0 + snr)


def gain_matrix(uav: Position3, cfg: ScenarioConfig) -> np.ndarray:
    """(4, K) per-watt SNR gains for the three BS rows and the UAV row."""
    users = cfg.users_array()
    bs = cfg.bs_array()
    ch = cfg.channel
    d_bs = np.linalg.norm(bs[:, None, :] - users[None, :, :], axis=2)
    d_uav = np.linalg.norm(uav.as_array()[None, :] - users, axis=1)
    if (d_bs <= 0).any() or (d_uav <= 0).any():
        raise ValueError("co-located transmitter and user")
    g = np.empty((4, cfg.n_users))
    g[:3] = ch.fading_g2g * ch.beta / (ch.b_comm * ch.n0 * d_bs ** ch.iota_g)
    g[ROW_UAV] = ch.fading_a2g * ch.beta / (ch.b_comm * ch.n0 * d_uav ** ch.iota_a)
    return g


def rates_from_gains(gains: np.ndarray, alloc: Allocation, b_comm: float) -> RateTable:
    """Rate table for precomputed link gains (vectorized hot path)."""
    s = alloc.bandwidth
    p = alloc.comm_power
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = np.where(s > 0, gains * p / np.where(s > 0, s, 1.0), 0.0)
        links = np.where((s > 0) & (p > 0), s * b_comm * np.log2(1.0 + snr), 0.0)
    return RateTable.from_links(links)


def evaluate_rates(uav: Position3, alloc: Allocation, cfg: ScenarioConfig) -> RateTable:
    """Fill the full rate table for an allocation at UAV position ``uav``."""
    alloc.validate(cfg.p_max)
    return rates_from_gains(gain_matrix(uav, cfg), alloc, cfg.channel.b_comm)
