"""UAV position optimization under fixed allocation (successive convexification).

Only the UAV row of the rate table depends on the UAV position ``u``, through
the squared distances ``e_k = ||u - w_k||^2``: each UAV link rate is
``s*B*log2(1 + g_k * e_k^(-iota/2))``, a convex decreasing function of
``e_k``. Its tangent at the current point is therefore a global concave
lower bound (surrogate) in ``u``, which makes every accepted step a true
ascent step. The surrogate subproblem is

    maximize   sum_k slope_k * ||u - w_k||^2      (slope_k <= 0)
    subject to u in every accuracy cone           (exact, convex)
               altitude box, trust ball           (exact)
               surrogate rate floors              (balls around users)

and is solved by projected gradient ascent with Dykstra's alternating
projections, every individual projection being closed-form (second-order
cone, ball, box). Linearized rate floors turn into balls because the
surrogate rate of user k depends on ``u`` only through ``e_k`` with a
negative slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .locgeom import FeasibleRegion, cone_margin
from .model import Allocation, Position3, ScenarioConfig, evaluate_rates

__all__ = [
    "ConeInfeasibleError",
    "PlacementState",
    "find_feasible_u",
    "sca_step",
    "solve_udo",
]

LN2 = math.log(2.0)


class ConeInfeasibleError(RuntimeError):
    """The accuracy cones (plus altitude bounds) have empty intersection."""


@dataclass
class PlacementState:
    """Current placement iterate."""

    u: Position3
    objective: float
    iterate: int = 0
    trust_radius: float = 100.0
    converged: bool = False


# ---------------------------------------------------------------------------
# closed-form projections
# ---------------------------------------------------------------------------


def _project_cone(v: np.ndarray, axis: np.ndarray, threshold: float) -> np.ndarray:
    """Project onto {v : axis.v >= threshold*||v||} (vertex at origin).

    With cos(theta) = threshold/||axis|| this is the circular cone of
    half-angle theta around the axis; the projection is the usual
    three-case formula (inside / polar cone -> vertex / surface).
    """
    a_norm = float(np.linalg.norm(axis))
    cos_t = threshold / a_norm
    cos_t = min(max(cos_t, -1.0), 1.0)
    sin_t = math.sqrt(max(1.0 - cos_t * cos_t, 0.0))
    ahat = axis / a_norm
    p = float(v @ ahat)
    perp = v - p * ahat
    q = float(np.linalg.norm(perp))
    if q <= 0:
        # on the axis: inside iff pointing along +axis (cos_t <= 1 always)
        return v if p >= 0 else np.zeros(3)
    if p * sin_t >= q * cos_t:  # inside the cone
        return v
    m = p * cos_t + q * sin_t
    if m <= 0:  # inside the polar cone: closest point is the vertex
        return np.zeros(3)
    qhat = perp / q
    return m * (cos_t * ahat + sin_t * qhat)


def _project_ball(v: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    d = v - center
    n = float(np.linalg.norm(d))
    if n <= radius:
        return v
    return center + d * (radius / n)


def _project_alt(v: np.ndarray, hmin: float, hmax: float) -> np.ndarray:
    out = v.copy()
    out[2] = min(max(out[2], hmin), hmax)
    return out


class _Projector:
    """Dykstra's alternating projections onto an intersection of sets."""

    def __init__(self, regions: Sequence[FeasibleRegion], alt_bounds, balls, trust):
        self.regions = list(regions)
        self.alt = alt_bounds
        self.balls = list(balls)  # (center, radius) pairs
        self.trust = trust  # (center, radius) or None

    def _sets(self):
        for reg in self.regions:
            w = reg.user.as_array()
            yield lambda v, reg=reg, w=w: w + _project_cone(v - w, reg.axis, reg.threshold)
        yield lambda v: _project_alt(v, self.alt[0], self.alt[1])
        for center, radius in self.balls:
            yield lambda v, c=center, r=radius: _project_ball(v, c, r)
        if self.trust is not None:
            c, r = self.trust
            yield lambda v: _project_ball(v, c, r)

    def project(self, v: np.ndarray, tol: float = 1e-10, max_cycles: int = 300) -> np.ndarray:
        sets = list(self._sets())
        x = v.astype(float).copy()
        corrections = [np.zeros(3) for _ in sets]
        scale = max(1.0, float(np.linalg.norm(v)))
        for _ in range(max_cycles):
            x_prev = x.copy()
            for i, proj in enumerate(sets):
                y = proj(x + corrections[i])
                corrections[i] = x + corrections[i] - y
                x = y
            if np.linalg.norm(x - x_prev) <= tol * scale:
                break
        return x

    def margin(self, v: np.ndarray) -> float:
        """Worst normalized constraint margin at v (>= 0 when feasible)."""
        m = math.inf
        for reg in self.regions:
            m = min(m, float(cone_margin(reg, v)))
        m = min(m, (v[2] - self.alt[0]) / max(self.alt[1], 1.0))
        m = min(m, (self.alt[1] - v[2]) / max(self.alt[1], 1.0))
        for center, radius in self.balls:
            m = min(m, (radius - float(np.linalg.norm(v - center))) / max(radius, 1.0))
        if self.trust is not None:
            c, r = self.trust
            m = min(m, (r - float(np.linalg.norm(v - c))) / max(r, 1.0))
        return m


# ---------------------------------------------------------------------------
# feasible initialization
# ---------------------------------------------------------------------------


def _min_margin(regions: Sequence[FeasibleRegion], pts: np.ndarray) -> np.ndarray:
    """Minimum normalized cone margin over regions for each point (N, 3)."""
    m = np.full(pts.shape[0], np.inf)
    for reg in regions:
        m = np.minimum(m, cone_margin(reg, pts))
    return m


def find_feasible_u(
    regions: Sequence[FeasibleRegion],
    alt_bounds: Tuple[float, float],
    search_box: Optional[np.ndarray] = None,
    grid: Tuple[int, int, int] = (13, 13, 7),
) -> Position3:
    """A point strictly inside every accuracy cone and the altitude band.

    Maximizes the minimum normalized cone margin over a coarse grid (plus
    each cone's axis ray, which covers near-closed cones), then polishes by
    per-coordinate ternary search. Raises ConeInfeasibleError when the best
    margin is not strictly positive.
    """
    if not regions:
        raise ValueError("at least one feasible region is required")
    hmin, hmax = alt_bounds
    if search_box is None:
        centers = np.array([[r.user.x, r.user.y] for r in regions])
        search_box = np.array([centers.min(axis=0) - 300.0, centers.max(axis=0) + 300.0])

    xs = np.linspace(search_box[0, 0], search_box[1, 0], grid[0])
    ys = np.linspace(search_box[0, 1], search_box[1, 1], grid[1])
    hs = np.linspace(hmin, hmax, grid[2])
    gx, gy, gh = np.meshgrid(xs, ys, hs, indexing="ij")
    cand = np.stack([gx.ravel(), gy.ravel(), gh.ravel()], axis=1)

    extra = []
    for reg in regions:
        ahat = reg.axis / reg.c1
        w = reg.user.as_array()
        if abs(ahat[2]) > 1e-9:
            for frac in (0.25, 0.5, 0.75):
                h_target = hmin + frac * (hmax - hmin)
                tlen = (h_target - w[2]) / ahat[2]
                if tlen > 0:
                    extra.append(w + tlen * ahat)
    if extra:
        extra = np.array(extra)
        extra = extra[(extra[:, 2] >= hmin) & (extra[:, 2] <= hmax)]
        if len(extra):
            cand = np.vstack([cand, extra, extra.mean(axis=0, keepdims=True)])

    margins = _min_margin(regions, cand)
    best = cand[int(np.argmax(margins))].copy()

    # coordinate-ascent polish with shrinking spans
    span = np.array(
        [
            (search_box[1, 0] - search_box[0, 0]) / grid[0],
            (search_box[1, 1] - search_box[0, 1]) / grid[1],
            (hmax - hmin) / grid[2],
        ]
    )
    lo_b = np.array([search_box[0, 0], search_box[0, 1], hmin])
    hi_b = np.array([search_box[1, 0], search_box[1, 1], hmax])
    for _ in range(4):
        for axis in range(3):
            offsets = np.linspace(-span[axis], span[axis], 9)
            trials = np.repeat(best[None, :], len(offsets), axis=0)
            trials[:, axis] = np.clip(trials[:, axis] + offsets, lo_b[axis], hi_b[axis])
            m = _min_margin(regions, trials)
            best = trials[int(np.argmax(m))].copy()
        span *= 0.35

    if _min_margin(regions, best[None, :])[0] <= 0:
        raise ConeInfeasibleError("accuracy cones have empty intersection in the search box")
    return Position3.from_array(best)


# ---------------------------------------------------------------------------
# successive convex approximation
# ---------------------------------------------------------------------------


def _uav_link_params(alloc: Allocation, cfg: ScenarioConfig):
    """Per-user surrogate ingredients of the UAV row.

    Returns (s_u, kappa, m) with UAV link rate
    ``s*B*log2(1 + kappa_k * e^(-m))`` in the squared distance e.
    """
    ch = cfg.channel
    s_u = alloc.bandwidth[3]
    p_u = alloc.comm_power[3]
    served = (s_u > 0) & (p_u > 0)
    const = ch.fading_a2g * ch.beta / (ch.b_comm * ch.n0)
    kappa = np.where(served, const * p_u / np.where(served, s_u, 1.0), 0.0)
    return s_u, kappa, ch.iota_a / 2.0, served


def _surrogate(u0: np.ndarray, alloc: Allocation, cfg: ScenarioConfig):
    """Tangent model at u0: slopes, expansion rates, and G2G constants."""
    users = cfg.users_array()
    ch = cfg.channel
    s_u, kappa, m, served = _uav_link_params(alloc, cfg)
    e0 = ((u0[None, :] - users) ** 2).sum(axis=1)
    em = e0**m
    rate0 = np.where(served, s_u * ch.b_comm * np.log2(1.0 + kappa / em), 0.0)
    slope = np.where(
        served,
        -s_u * ch.b_comm * m * kappa / (LN2 * e0 * (em + kappa)),
        0.0,
    )
    return e0, rate0, slope


def _true_objective(u: np.ndarray, alloc: Allocation, cfg: ScenarioConfig):
    rates = evaluate_rates(Position3.from_array(u), alloc, cfg)
    return rates.sum_rate, rates


def sca_step(
    state: PlacementState,
    alloc: Allocation,
    regions: Sequence[FeasibleRegion],
    cfg: ScenarioConfig,
) -> PlacementState:
    """One monotone surrogate-ascent step on the UAV position.

    Builds the tangent surrogate at the current point, solves the convex
    subproblem by projected gradient with Dykstra projections (cones,
    altitude box, linearized rate balls, trust ball), and accepts the step
    only if the true objective does not decrease; otherwise the trust
    radius shrinks and the step retries. A trust radius below 1e-3 m marks
    convergence.
    """
    users = cfg.users_array()
    u0 = state.u.as_array()
    obj0, rates0 = _true_objective(u0, alloc, cfg)
    e0, rate_u0, slope = _surrogate(u0, alloc, cfg)
    g2g = rates0.user_rates - rate_u0  # BS contributions, u-independent

    active = slope < 0
    if not active.any():
        return PlacementState(state.u, obj0, state.iterate + 1, state.trust_radius, True)

    # linearized per-user rate floors become balls ||u - w_k||^2 <= e_max;
    # users with no UAV allocation have u-independent rates, so placement
    # can neither help nor hurt them and they impose no ball
    balls = []
    restoration_needed = False
    if cfg.r_th > 0:
        for k in np.where(active)[0]:
            headroom = g2g[k] + rate_u0[k] - cfg.r_th
            e_max = e0[k] + headroom / (-slope[k])
            if e_max <= 0:
                restoration_needed = True
                continue
            balls.append((users[k], math.sqrt(e_max)))

    trust = state.trust_radius
    lipschitz = 2.0 * float(np.abs(slope).sum())
    step_len = 1.0 / max(lipschitz, 1e-12)

    while trust >= 1e-3:
        projector = _Projector(regions, cfg.altitude_bounds, balls, (u0, trust))
        if restoration_needed or projector.margin(u0) < -1e-9:
            u_start = _restore_feasibility(u0, projector)
        else:
            u_start = u0
        u = projector.project(u_start)
        for _ in range(120):
            grad = 2.0 * (slope[active, None] * (u[None, :] - users[active])).sum(axis=0)
            u_next = projector.project(u + step_len * grad)
            if np.linalg.norm(u_next - u) <= 1e-9 * max(1.0, np.linalg.norm(u)):
                u = u_next
                break
            u = u_next
        obj1, _ = _true_objective(u, alloc, cfg)
        if obj1 >= obj0 - 1e-9 * max(abs(obj0), 1.0) and _min_margin(regions, u[None, :])[0] >= -1e-9:
            grew = min(trust * 1.5, 1000.0)
            moved = float(np.linalg.norm(u - u0))
            converged = moved < 1e-6 * max(1.0, np.linalg.norm(u0))
            return PlacementState(
                Position3.from_array(u),
                max(obj1, obj0),
                state.iterate + 1,
                grew,
                converged,
            )
        trust *= 0.5

    return PlacementState(state.u, obj0, state.iterate + 1, trust, True)


def _restore_feasibility(u0, projector: _Projector, steps: int = 60):
    """Maximize the minimum normalized margin by projected subgradient."""
    cones_only = _Projector(projector.regions, projector.alt, [], projector.trust)
    u = cones_only.project(u0.copy())
    best, best_m = u.copy(), projector.margin(u)
    step = 20.0
    for _ in range(steps):
        # subgradient of the worst ball margin: move toward that ball center
        worst = None
        worst_m = math.inf
        for center, radius in projector.balls:
            m = radius - float(np.linalg.norm(u - center))
            if m < worst_m:
                worst_m, worst = m, center
        if worst is None or worst_m >= 0:
            break
        direction = worst - u
        norm = float(np.linalg.norm(direction))
        if norm <= 0:
            break
        u = cones_only.project(u + step * direction / norm)
        m = projector.margin(u)
        if m > best_m:
            best, best_m = u.copy(), m
        else:
            step *= 0.7
    return best


def solve_udo(
    u0: Position3,
    alloc: Allocation,
    regions: Sequence[FeasibleRegion],
    cfg: ScenarioConfig,
    tol: float = 1e-3,
    max_steps: int = 100,
) -> PlacementState:
    """Iterate surrogate-ascent steps until the objective improvement stalls."""
    obj0, _ = _true_objective(u0.as_array(), alloc, cfg)
    state = PlacementState(u=u0, objective=obj0)
    for _ in range(max_steps):
        new_state = sca_step(state, alloc, regions, cfg)
        improvement = new_state.objective - state.objective
        state = new_state
        if state.converged or improvement < tol:
            break
    return state
