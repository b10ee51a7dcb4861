"""TDoA localization geometry: variances, Fisher information, feasible cones.

A user at ``w`` is localized from time-difference measurements against
reference anchor BS1. With per-anchor ToA variances ``sigma_i^2`` the TDoA
covariance is ``C = diag(s2, s3, su) + s1 * ones(3,3)`` and the Jacobian of
the TDoA vector in the user coordinates has rows ``q2-q1, q3-q1, qu-q1``
built from the unit vectors ``q_i`` pointing from the user to each anchor.
Localization accuracy is scored by the determinant of the Fisher information,

    opt_d = det(H^T C^-1 H) = det(H)^2 / det(C),

and, since ``det(C) = D1 + D2`` with ``D1 = s1*s2*s3`` carrying no UAV term,
by the UAV-power-free approximation ``opt_d1 = det(H)^2 / D1``. The level
set ``opt_d1 >= eps`` is, for a fixed sign of ``det(H)``, a second-order
cone with vertex at the user: writing ``alpha = (q2-q1) x (q3-q1)`` one has
``det(H) = alpha . (qu - q1)``, so the constraint becomes

    a . (u - w) >= thr * ||u - w||,   a = sign * alpha,
    thr = sqrt(eps * D1) + a . q1,

which is nonempty and bounded per altitude exactly when
``c3 < thr <= c1`` with ``c1 = ||alpha||`` and ``c3 = ||alpha[:2]||``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Sequence, Tuple

import numpy as np

from .model import ChannelParams, Position3, ScenarioConfig, positions_to_array

__all__ = [
    "SPEED_OF_LIGHT",
    "ToAVariances",
    "TdoaCovariance",
    "GeometryFrame",
    "FeasibleRegion",
    "toa_variance",
    "tdoa_covariance",
    "det_c_split",
    "geometry_frame",
    "opt_d",
    "opt_d1",
    "crlb",
    "alpha_coeffs",
    "accuracy_bounds",
    "det_sign",
    "region_for_user",
    "cone_contains",
    "cone_margin",
    "ellipse_at_altitude",
    "ellipse_points",
]

SPEED_OF_LIGHT = 3e8  # m/s

AnchorKind = Literal["bs", "uav"]


@dataclass
class ToAVariances:
    """Per-anchor ToA variances in s^2; ``sigma2_bs[0]`` is the reference.

    The BS variances must be strictly positive (they build D1); the UAV
    variance may be zero, the noiseless-anchor limit in which the
    approximate and exact accuracy scores coincide.
    """

    sigma2_bs: np.ndarray  # (3,)
    sigma2_uav: float

    def __post_init__(self) -> None:
        self.sigma2_bs = np.asarray(self.sigma2_bs, dtype=float)
        if self.sigma2_bs.shape != (3,) or (self.sigma2_bs <= 0).any() or self.sigma2_uav < 0:
            raise ValueError("BS ToA variances must be positive (three entries), UAV >= 0")


@dataclass
class TdoaCovariance:
    """3x3 TDoA covariance; off-diagonals all equal the reference variance."""

    c: np.ndarray

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float)
        if self.c.shape != (3, 3) or not np.allclose(self.c, self.c.T, rtol=0, atol=1e-300):
            raise ValueError("covariance must be a symmetric 3x3 matrix")


@dataclass
class GeometryFrame:
    """Unit vectors from the user to the anchors and the TDoA Jacobian."""

    q_bs: np.ndarray  # (3, 3) rows q1, q2, q3
    q_uav: np.ndarray  # (3,)
    jacobian: np.ndarray  # (3, 3) rows q2-q1, q3-q1, qu-q1


@dataclass
class FeasibleRegion:
    """Per-user conic UAV region for one accuracy threshold.

    ``alpha`` is the raw cross-product normal (q2-q1)x(q3-q1); ``case_sign``
    is the sign of det(H) on the operating branch. Membership is evaluated in
    the normalized form ``axis . (u - w) >= threshold * ||u - w||`` with
    ``axis = case_sign * alpha`` and ``threshold = sqrt(eps_k*D1) + axis.q1``.
    ``eps_tilde`` keeps the case's raw constant (threshold for case +1,
    -threshold for case -1).
    """

    alpha: np.ndarray
    c1: float
    c2: float
    c3: float
    d1: float
    case_sign: int
    eps_tilde: float
    eps_k: float
    user: Position3
    axis: np.ndarray
    threshold: float

    def as_tuple(self) -> Tuple[np.ndarray, float, np.ndarray]:
        return self.axis, self.threshold, self.user.as_array()


# ---------------------------------------------------------------------------
# variances and information
# ---------------------------------------------------------------------------


def toa_variance(
    anchor: Position3,
    user: Position3,
    pos_power: float,
    kind: AnchorKind,
    ch: ChannelParams,
) -> float:
    """ToA measurement variance of one anchor in s^2.

    Ground anchors: ``psi * Bpos*N0*d^iota_g / (beta*pos_power) + sigma_nlos2``.
    UAV anchor: same with the A2G exponent and no NLoS floor.
    """
    if pos_power <= 0:
        raise ValueError("anchor silent: infinite variance")
    d = anchor.distance_to(user)
    if d <= 0:
        raise ValueError("anchor coincides with user")
    iota = ch.iota_g if kind == "bs" else ch.iota_a
    snr = ch.beta * pos_power / (ch.b_pos * ch.n0 * d**iota)
    base = ch.psi / snr
    return base + ch.sigma_nlos2 if kind == "bs" else base


def bs_variances(user: Position3, pos_power_bs: Sequence[float], cfg: ScenarioConfig) -> np.ndarray:
    """ToA variances of the three ground anchors for one user."""
    ch = cfg.channel
    p = np.asarray(pos_power_bs, dtype=float)
    if (p <= 0).any():
        raise ValueError("anchor silent: infinite variance")
    d = _anchor_distances(user, cfg.bs)
    return ch.psi * ch.b_pos * ch.n0 * d**ch.iota_g / (ch.beta * p) + ch.sigma_nlos2


def tdoa_covariance(v: ToAVariances) -> TdoaCovariance:
    """Covariance of the TDoA vector (reference anchor noise correlates all)."""
    s1, s2, s3 = v.sigma2_bs
    su = v.sigma2_uav
    c = np.diag([s2, s3, su]) + s1
    return TdoaCovariance(c)


def det_c_split(v: ToAVariances) -> Tuple[float, float]:
    """Split det(C) = D1 + D2 with D1 free of the UAV variance.

    D1 = s1*s2*s3 and D2 = su*(s2*s3 + s1*s3 + s1*s2).
    """
    s1, s2, s3 = v.sigma2_bs
    su = v.sigma2_uav
    d1 = s1 * s2 * s3
    d2 = su * (s2 * s3 + s1 * s3 + s1 * s2)
    return float(d1), float(d2)


def geometry_frame(u: Position3, user: Position3, bs: Sequence[Position3]) -> GeometryFrame:
    """Unit anchor directions and the TDoA Jacobian for one user."""
    w = user.as_array()
    anchors = np.vstack([positions_to_array(bs), u.as_array()])
    diff = anchors - w
    norms = np.linalg.norm(diff, axis=1)
    if (norms <= 0).any():
        raise ValueError("anchor coincides with user")
    q = diff / norms[:, None]
    jac = np.vstack([q[1] - q[0], q[2] - q[0], q[3] - q[0]])
    return GeometryFrame(q_bs=q[:3], q_uav=q[3], jacobian=jac)


def opt_d(frame: GeometryFrame, cov: TdoaCovariance) -> float:
    """D-optimality score det(H)^2 / det(C) of the position estimate."""
    det_c = float(np.linalg.det(cov.c))
    if det_c <= 0:
        raise ValueError("covariance must be positive definite")
    det_h = float(np.linalg.det(frame.jacobian))
    return det_h * det_h / det_c


def opt_d1(frame: GeometryFrame, d1: float) -> float:
    """Approximate score det(H)^2 / D1, independent of the UAV variance."""
    if d1 <= 0:
        raise ValueError("D1 must be positive")
    det_h = float(np.linalg.det(frame.jacobian))
    return det_h * det_h / d1


def crlb(frame: GeometryFrame, cov: TdoaCovariance) -> Tuple[float, float]:
    """Root CRLB position errors (horizontal, vertical) in meters.

    The Jacobian rows are unit-vector differences (dimensionless), so the
    time-domain Fisher information ``F = H^T C^-1 H`` converts to a position
    error covariance via the speed of light: ``cov_pos = c^2 * F^-1``.
    """
    jac = frame.jacobian
    try:
        cinv = np.linalg.inv(cov.c)
        fim = jac.T @ cinv @ jac
        finv = np.linalg.inv(fim)
    except np.linalg.LinAlgError as exc:
        raise ValueError("unlocalizable geometry: singular FIM") from exc
    pcov = SPEED_OF_LIGHT**2 * finv
    diag = np.diag(pcov)
    if (diag <= 0).any() or not np.all(np.isfinite(diag)):
        raise ValueError("unlocalizable geometry: singular FIM")
    return float(math.sqrt(diag[0] + diag[1])), float(math.sqrt(diag[2]))


# ---------------------------------------------------------------------------
# conic feasible-region geometry
# ---------------------------------------------------------------------------


def alpha_coeffs(frame: GeometryFrame) -> np.ndarray:
    """Cone normal alpha = (q2 - q1) x (q3 - q1).

    Cofactor expansion of the Jacobian along its last row gives the identity
    ``alpha . (qu - q1) == det(H)`` for every geometry.
    """
    q = frame.q_bs
    return np.cross(q[1] - q[0], q[2] - q[0])


@lru_cache(maxsize=8192)
def _anchor_geometry(user: Position3, bs: tuple):
    """Cached (alpha, q1, distances) for one user; UAV-independent.

    Returned arrays are shared through the cache and must not be mutated.
    """
    w = user.as_array()
    b = np.array([p.as_array() for p in bs])
    diff = b - w
    dist = np.linalg.norm(diff, axis=1)
    if (dist <= 0).any():
        raise ValueError("anchor coincides with user")
    q = diff / dist[:, None]
    alpha = np.cross(q[1] - q[0], q[2] - q[0])
    return alpha, q[0], dist


def _anchor_distances(user: Position3, bs: tuple) -> np.ndarray:
    return _anchor_geometry(user, tuple(bs))[2]


def _anchor_constants(user: Position3, cfg: ScenarioConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(alpha, q1) for one user; both independent of the UAV position."""
    alpha, q1, _ = _anchor_geometry(user, tuple(cfg.bs))
    return alpha, q1


@lru_cache(maxsize=8192)
def _det_sign_cached(user: Position3, bs: tuple, probe_alt: float) -> int:
    probe = Position3(user.x, user.y, probe_alt)
    frame = geometry_frame(probe, user, bs)
    d = float(np.linalg.det(frame.jacobian))
    if abs(d) < 1e-14:
        raise ValueError("coplanar probe, raise altitude")
    return 1 if d > 0 else -1


def det_sign(user: Position3, bs: Sequence[Position3], probe_alt: float = 300.0) -> int:
    """Sign of det(H) probed directly above the user at ``probe_alt``.

    det(H) keeps one sign on the connected operating domain, so a single
    high-altitude probe fixes the case for the whole region.
    """
    return _det_sign_cached(user, tuple(bs), probe_alt)


def accuracy_bounds(
    user_idx: int,
    pos_power_bs: Sequence[float],
    cfg: ScenarioConfig,
    probe_alt: float = 300.0,
) -> Tuple[float, float, int]:
    """Feasible accuracy-threshold interval (lb, ub) for one user.

    For case sign ``s`` the cone is nonempty and altitude-bounded when
    ``c3 - s*c2 < sqrt(eps*D1) < c1 - s*c2``; squaring and dividing by D1
    yields the interval endpoints (the lower endpoint clamps at 0 when
    ``c3 - s*c2 < 0``).
    """
    user = cfg.users[user_idx]
    alpha, q1 = _anchor_constants(user, cfg)
    c1 = float(np.linalg.norm(alpha))
    c2 = float(alpha @ q1)
    c3 = float(np.hypot(alpha[0], alpha[1]))
    sign = det_sign(user, cfg.bs, probe_alt)
    lo_root = max(c3 - sign * c2, 0.0)
    hi_root = c1 - sign * c2
    if hi_root <= lo_root or hi_root <= 0:
        raise ValueError("degenerate anchor geometry: empty accuracy interval")
    sig = bs_variances(user, pos_power_bs, cfg)
    d1 = float(np.prod(sig))
    return lo_root**2 / d1, hi_root**2 / d1, sign


def region_for_user(
    user_idx: int,
    pos_power_bs: Sequence[float],
    eps_k: float,
    cfg: ScenarioConfig,
    probe_alt: float = 300.0,
) -> FeasibleRegion:
    """Conic UAV region in which user ``user_idx`` meets accuracy ``eps_k``."""
    lb, ub, sign = accuracy_bounds(user_idx, pos_power_bs, cfg, probe_alt)
    if not lb <= eps_k <= ub:
        raise ValueError(
            f"accuracy threshold {eps_k:.3e} outside feasible interval "
            f"[{lb:.3e}, {ub:.3e}] for user {user_idx}"
        )
    user = cfg.users[user_idx]
    alpha, q1 = _anchor_constants(user, cfg)
    sig = bs_variances(user, pos_power_bs, cfg)
    d1 = float(np.prod(sig))
    c1 = float(np.linalg.norm(alpha))
    c2 = float(alpha @ q1)
    c3 = float(np.hypot(alpha[0], alpha[1]))
    root = math.sqrt(eps_k * d1)
    axis = sign * alpha
    threshold = root + sign * c2
    eps_tilde = threshold if sign > 0 else -threshold
    return FeasibleRegion(
        alpha=alpha,
        c1=c1,
        c2=c2,
        c3=c3,
        d1=d1,
        case_sign=sign,
        eps_tilde=eps_tilde,
        eps_k=eps_k,
        user=user,
        axis=axis,
        threshold=threshold,
    )


def cone_margin(region: FeasibleRegion, points: np.ndarray) -> np.ndarray:
    """Normalized membership margin; >= 0 inside, scaled by ||axis||*||v||.

    ``points`` is (..., 3); vertices (points equal to the user) get -inf.
    """
    v = np.asarray(points, dtype=float) - region.user.as_array()
    norms = np.linalg.norm(v, axis=-1)
    proj = v @ region.axis
    with np.errstate(invalid="ignore", divide="ignore"):
        margin = (proj - region.threshold * norms) / (region.c1 * norms)
    return np.where(norms > 0, margin, -np.inf)


def cone_contains(region: FeasibleRegion, u: Position3, rel_tol: float = 1e-9) -> bool:
    """Cone membership with a relative boundary tolerance."""
    v = u.as_array() - region.user.as_array()
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ValueError("cone vertex: UAV at the user position")
    lhs = float(region.axis @ v)
    return lhs >= region.threshold * norm - rel_tol * region.c1 * norm


def ellipse_at_altitude(region: FeasibleRegion, h: float) -> Tuple[float, ...]:
    """Boundary conic of the region sliced at altitude ``h``.

    Returns coefficients (a, b, c, d, e, f) of
    ``a dx^2 + b dx dy + c dy^2 + d dx + e dy + f = 0`` in user-centered
    coordinates (dx, dy). The slice is an ellipse iff ``c3 < threshold``
    (equivalently the conic discriminant ``b^2 - 4ac`` is negative); below
    that the region is unbounded at fixed altitude and an error is raised.
    An error is also raised when the altitude plane misses the cone, which
    happens when the mirror cone (not the feasible branch) is sliced.
    """
    a1, a2, a3 = region.axis
    thr = region.threshold
    if math.hypot(a1, a2) >= thr:
        raise ValueError("region unbounded at this altitude (ellipse condition fails)")
    dz = h - region.user.h
    a = thr**2 - a1 * a1
    b = -2.0 * a1 * a2
    c = thr**2 - a2 * a2
    d = -2.0 * a1 * a3 * dz
    e = -2.0 * a2 * a3 * dz
    f = (thr**2 - a3 * a3) * dz * dz
    # slice validity: the conic center must lie on the feasible branch
    m = np.array([[2 * a, b], [b, 2 * c]])
    center = np.linalg.solve(m, -np.array([d, e]))
    side = a1 * center[0] + a2 * center[1] + a3 * dz
    if side < 0:
        raise ValueError("region empty at this altitude (mirror-cone slice)")
    return a, b, c, d, e, f


def ellipse_points(region: FeasibleRegion, h: float, n: int = 360) -> np.ndarray:
    """(n, 2) absolute (x, y) samples of the sliced boundary ellipse."""
    a, b, c, d, e, f = ellipse_at_altitude(region, h)
    m = np.array([[a, b / 2.0], [b / 2.0, c]])
    center = np.linalg.solve(2.0 * m, -np.array([d, e]))
    # value of the quadratic at its center; radii follow from eigenvalues
    g = float(
        a * center[0] ** 2
        + b * center[0] * center[1]
        + c * center[1] ** 2
        + d * center[0]
        + e * center[1]
        + f
    )
    evals, evecs = np.linalg.eigh(m)
    if (evals <= 0).any() or g > 0:
        raise ValueError("degenerate ellipse slice")
    radii = np.sqrt(-g / evals)
    theta = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pts = center + (circle * radii) @ evecs.T
    return pts + np.array([region.user.x, region.user.y])
