"""Annealed probabilistic search over the discretized BS positioning powers.

The three BS positioning powers live on the grid {0, dP, 2dP, ..., p_max}.
Each outer iteration evaluates the current vector and its axis neighbors
(at most 7 candidates) by running the inner block-coordinate loop
(allocation solve alternating with placement ascent) to get the best sum
rate J for that power vector, then either

* samples the next vector with probability proportional to exp(J/T)
  (softmax over the candidate set, temperature annealed by T <- alpha*T), or
* raises all three powers by one grid step when every candidate is
  localization- or rate-infeasible.

Raw J values are on the order of 1e7 bit/s, which would make any O(1)
temperature an argmax; run() therefore z-score-normalizes the finite
candidate values before sampling, so the configured temperature acts on a
unit scale. ``transfer_sample`` itself applies the softmax exactly as
given, with log-sum-exp stabilization.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import bapo, locgeom, placement
from .model import Allocation, Position3, RateTable, ScenarioConfig, Solution

__all__ = [
    "ScenarioInfeasibleError",
    "GibbsConfig",
    "Candidate",
    "candidate_set",
    "evaluate_candidate",
    "transfer_probabilities",
    "transfer_sample",
    "escalate",
    "run",
]


class ScenarioInfeasibleError(RuntimeError):
    """No positioning-power vector on the grid admits a feasible solution."""


@dataclass
class GibbsConfig:
    """Outer-loop knobs.

    ``delta_p=None`` resolves to ``p_max/20`` at run time. ``t0`` is the
    initial sampling temperature on the normalized-score scale and
    ``alpha`` the per-iteration annealing factor.
    """

    delta_p: Optional[float] = None
    t0: float = 1.0
    alpha: float = 0.95
    max_outer: int = 60
    inner_tol: float = 1e3
    seed: Optional[int] = None
    max_inner: int = 12
    patience: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if self.delta_p is not None and self.delta_p <= 0:
            raise ValueError("delta_p must be positive")


@dataclass
class Candidate:
    """A grid-aligned BS positioning-power vector and its evaluated value."""

    pos_power_bs: np.ndarray
    value: float = -math.inf
    solution: Optional[Tuple[Position3, Allocation, RateTable]] = None
    nu_warm: Optional[np.ndarray] = None
    inner_calls: int = 0

    def key(self, delta_p: float) -> Tuple[int, int, int]:
        return tuple(int(round(p / delta_p)) for p in self.pos_power_bs)


def candidate_set(p_hat: Sequence[float], delta_p: float, p_max: float) -> List[Candidate]:
    """The origin vector plus its in-range axis neighbors (<= 7 candidates)."""
    p_hat = np.asarray(p_hat, dtype=float)
    cands = [Candidate(p_hat.copy())]
    for axis in range(3):
        for sign in (-1.0, 1.0):
            nxt = p_hat.copy()
            nxt[axis] += sign * delta_p
            if -1e-12 <= nxt[axis] <= p_max + 1e-12:
                nxt[axis] = min(max(nxt[axis], 0.0), p_max)
                cands.append(Candidate(nxt))
    return cands


def escalate(p_hat: Sequence[float], delta_p: float, p_max: float) -> np.ndarray:
    """Raise every BS positioning power one grid step, clipped at p_max."""
    return np.minimum(np.asarray(p_hat, dtype=float) + delta_p, p_max)


def _build_regions(
    p_hat: np.ndarray, eps_k: np.ndarray, cfg: ScenarioConfig
) -> Optional[List[locgeom.FeasibleRegion]]:
    regions = []
    for k in range(cfg.n_users):
        try:
            regions.append(locgeom.region_for_user(k, p_hat, eps_k[k], cfg))
        except ValueError:
            return None
    return regions


def evaluate_candidate(
    cand: Candidate,
    warm: Optional[Tuple[Position3, Allocation, RateTable]],
    cfg: ScenarioConfig,
    eps_k: np.ndarray,
    inner_tol: float = 1e3,
    max_inner: int = 12,
    freeze_u: Optional[Position3] = None,
    fast: bool = True,
) -> Candidate:
    """Run the inner block-coordinate loop for one power vector.

    Fills ``cand.value`` with the best sum rate (or -inf when the accuracy
    regions are empty, no feasible UAV position exists, or the rate floor is
    unattainable) and stores the best (position, allocation, rates) triple.
    A warm triple seeds the starting position when it stays cone-feasible.
    """
    regions = _build_regions(cand.pos_power_bs, eps_k, cfg)
    if regions is None:
        cand.value = -math.inf
        return cand

    if freeze_u is not None:
        u = freeze_u
        if not all(locgeom.cone_contains(r, u) for r in regions):
            cand.value = -math.inf
            return cand
    else:
        u = None
        if warm is not None:
            try:
                if all(locgeom.cone_contains(r, warm[0]) for r in regions):
                    u = warm[0]
            except ValueError:
                u = None
        if u is None:
            try:
                u = placement.find_feasible_u(regions, cfg.altitude_bounds, cfg.search_box())
            except placement.ConeInfeasibleError:
                cand.value = -math.inf
                return cand

    pos_power = np.append(cand.pos_power_bs, cfg.uav_pos_power)
    best_val = -math.inf
    best_triple = None
    nu_warm = cand.nu_warm
    prev_obj = -math.inf
    calls = 0
    for _ in range(max_inner):
        try:
            sol = bapo.solve_bapo(u, pos_power, cfg, fast=fast, nu0=nu_warm)
        except bapo.RateInfeasibleError:
            break
        calls += 1
        nu_warm = sol.nu_final
        if sol.objective > best_val:
            best_val = sol.objective
            best_triple = (u, sol.alloc, sol.rates)
        if sol.objective - prev_obj < inner_tol:
            break
        prev_obj = sol.objective
        if freeze_u is not None:
            continue
        place = placement.solve_udo(u, sol.alloc, regions, cfg)
        calls += 1
        u = place.u

    cand.value = best_val if best_triple is not None else -math.inf
    cand.solution = best_triple
    cand.nu_warm = nu_warm
    cand.inner_calls = calls
    return cand


def transfer_probabilities(values: Sequence[float], temperature: float) -> np.ndarray:
    """Softmax transfer probabilities exp(J/T)/sum exp(J/T).

    Log-sum-exp stabilized; -inf entries get probability zero. Raises when
    no entry is finite (the caller escalates the powers instead).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not finite.any():
        raise ScenarioInfeasibleError("all candidates infeasible")
    scores = np.where(finite, values / temperature, -np.inf)
    shift = scores[finite].max()
    weights = np.exp(scores - shift)
    return weights / weights.sum()


def transfer_sample(
    cands: Sequence[Candidate], temperature: float, rng: np.random.Generator
) -> Candidate:
    """Sample a candidate with probability exp(J/T)/sum exp(J/T)."""
    probs = transfer_probabilities([c.value for c in cands], temperature)
    idx = int(rng.choice(len(cands), p=probs))
    return cands[idx]


def _normalized_for_sampling(cands: Sequence[Candidate]) -> List[Candidate]:
    """Z-score candidate values across the set (finite entries only)."""
    values = np.array([c.value for c in cands], dtype=float)
    finite = np.isfinite(values)
    fin = values[finite]
    mean = fin.mean()
    std = fin.std()
    scaled = np.where(finite, (values - mean) / (std if std > 0 else 1.0), -np.inf)
    return [
        Candidate(c.pos_power_bs, float(v), c.solution, c.nu_warm) for c, v in zip(cands, scaled)
    ]


def run(
    cfg: ScenarioConfig,
    gibbs: Optional[GibbsConfig] = None,
    eps_k: Optional[np.ndarray] = None,
    freeze_u: Optional[Position3] = None,
    trace: Optional[list] = None,
    fast_inner: bool = True,
) -> Solution:
    """Full outer search (annealed sampling over BS positioning powers).

    Starts from (2dP, 2dP, 2dP), keeps the best feasible solution seen, and
    stops when the best value has not improved for ``patience`` consecutive
    outer iterations or ``max_outer`` is reached. Deterministic for a fixed
    seed. ``trace``, when given a list, receives one row per outer
    iteration: (iteration, temperature, best value, chosen power vector).

    ``freeze_u`` pins the UAV position (used by the center-deployment
    baseline); candidate evaluation then skips the placement stage.
    """
    gibbs = gibbs or GibbsConfig()
    t_wall = time.perf_counter()
    t_cpu = time.process_time()
    if eps_k is None:
        from .harness import derive_accuracy_thresholds

        eps_k = derive_accuracy_thresholds(cfg)
    eps_k = np.asarray(eps_k, dtype=float)
    delta_p = gibbs.delta_p if gibbs.delta_p is not None else cfg.p_max / 20.0
    if not 0 < delta_p <= cfg.p_max:
        raise ValueError("delta_p must lie in (0, p_max]")
    seed = gibbs.seed if gibbs.seed is not None else cfg.seed
    rng = np.random.default_rng(seed)

    p_hat = np.minimum(np.full(3, 2.0 * delta_p), cfg.p_max)
    temperature = gibbs.t0
    cache: Dict[Tuple[int, int, int], Candidate] = {}
    best: Optional[Candidate] = None
    best_value = -math.inf
    stale = 0
    outer_done = 0
    evals = 0
    inner_calls = 0

    for outer in range(gibbs.max_outer):
        outer_done = outer + 1
        cands = candidate_set(p_hat, delta_p, cfg.p_max)
        warm = best.solution if best is not None and best.solution else None
        for cand in cands:
            key = cand.key(delta_p)
            if key in cache:
                cached = cache[key]
                cand.value = cached.value
                cand.solution = cached.solution
                cand.nu_warm = cached.nu_warm
                continue
            evaluate_candidate(
                cand,
                warm,
                cfg,
                eps_k,
                inner_tol=gibbs.inner_tol,
                max_inner=gibbs.max_inner,
                freeze_u=freeze_u,
                fast=fast_inner,
            )
            evals += 1
            inner_calls += cand.inner_calls
            cache[key] = cand

        finite = [c for c in cands if math.isfinite(c.value)]
        if not finite:
            if np.allclose(p_hat, cfg.p_max):
                raise ScenarioInfeasibleError(
                    "accuracy constraints infeasible at full positioning power"
                )
            p_hat = escalate(p_hat, delta_p, cfg.p_max)
            temperature *= gibbs.alpha
            if trace is not None:
                trace.append((outer, temperature, best_value, tuple(p_hat)))
            continue

        top = max(finite, key=lambda c: c.value)
        if top.value > best_value + max(1e-9 * abs(top.value), 1e-6):
            best_value = top.value
            best = top
            stale = 0
        else:
            stale += 1

        chosen = transfer_sample(_normalized_for_sampling(cands), temperature, rng)
        p_hat = chosen.pos_power_bs.copy()
        temperature *= gibbs.alpha
        if trace is not None:
            trace.append((outer, temperature, best_value, tuple(p_hat)))
        if stale >= gibbs.patience:
            break

    if best is None or best.solution is None:
        raise ScenarioInfeasibleError("no feasible candidate found")

    # final polish at full accuracy on the winning power vector
    u_best, alloc_best, rates_best = best.solution
    pos_power = np.append(best.pos_power_bs, cfg.uav_pos_power)
    try:
        polished = bapo.solve_bapo(u_best, pos_power, cfg, fast=False)
        inner_calls += 1
        if polished.objective >= rates_best.sum_rate:
            alloc_best, rates_best = polished.alloc, polished.rates
    except bapo.RateInfeasibleError:
        pass

    return Solution(
        uav=u_best,
        alloc=alloc_best,
        rates=rates_best,
        objective=rates_best.sum_rate,
        diagnostics={
            "outer_iterations": outer_done,
            "candidate_evaluations": evals,
            "inner_solver_calls": inner_calls,
            "pos_power_bs": [float(p) for p in best.pos_power_bs],
            "wall_time_s": time.perf_counter() - t_wall,
            "cpu_time_s": time.process_time() - t_cpu,
        },
    )
