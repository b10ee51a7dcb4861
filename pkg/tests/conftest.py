import dataclasses

import numpy as np
import pytest

from uavicl import harness
from uavicl.model import ChannelParams, Position3, ScenarioConfig


@pytest.fixture(scope="session")
def paper_cfg() -> ScenarioConfig:
    return harness.load_scenario(harness.paper_scenario_path())


@pytest.fixture(scope="session")
def mirrored_cfg(paper_cfg) -> ScenarioConfig:
    """Same scenario with BS2 and BS3 swapped: flips the det(H) case sign."""
    bs = (paper_cfg.bs[0], paper_cfg.bs[2], paper_cfg.bs[1])
    return dataclasses.replace(paper_cfg, bs=bs)


@pytest.fixture(scope="session")
def paper_eps(paper_cfg) -> np.ndarray:
    return harness.derive_accuracy_thresholds(paper_cfg)


def random_scenario(rng: np.random.Generator, n_users=None, r_th_frac=None) -> ScenarioConfig:
    """A random well-posed instance on a 1 km area (paper channel constants)."""
    n_users = n_users or int(rng.integers(2, 8))
    while True:
        bs_xy = rng.uniform(-450, 450, size=(3, 2))
        e1 = bs_xy[1] - bs_xy[0]
        e2 = bs_xy[2] - bs_xy[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) > 5e4:  # keep the anchor triangle fat
            break
    bs = tuple(Position3(x, y, float(rng.uniform(5, 25))) for x, y in bs_xy)
    users = tuple(
        Position3(
            float(rng.uniform(-400, 400)),
            float(rng.uniform(-400, 400)),
            float(rng.uniform(0, 35)),
        )
        for _ in range(n_users)
    )
    channel = ChannelParams(beta=10 ** (-3.889))
    frac = r_th_frac if r_th_frac is not None else float(rng.uniform(0.0, 0.5))
    cfg = ScenarioConfig(
        bs=bs,
        users=users,
        channel=channel,
        p_max=float(rng.uniform(0.5, 1.2)),
        r_th=0.0,
        uav_pos_power=0.2,
        zeta=float(rng.uniform(0.3, 0.8)),
        seed=int(rng.integers(0, 2**31)),
    )
    if frac > 0:
        # scale the rate floor to a feasible fraction of a capacity proxy
        from uavicl.model import gain_matrix

        u = Position3(0.0, 0.0, 300.0)
        g = gain_matrix(u, cfg)
        budget = cfg.p_max - 0.2
        rmax = (cfg.channel.b_comm * np.log2(1.0 + g * budget)).sum(axis=0).min()
        cfg = dataclasses.replace(cfg, r_th=float(frac * rmax / n_users * 2.0))
    return cfg
