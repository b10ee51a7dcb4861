"""Joint UAV placement and communication/positioning resource allocation.

Subpackage map:

* :mod:`uavicl.model` - scenario types and the outage-rate channel model
* :mod:`uavicl.locgeom` - TDoA variances, Fisher information, feasible cones
* :mod:`uavicl.bapo` - bandwidth/power allocation (dual + LP + reference path)
* :mod:`uavicl.placement` - UAV position ascent under the cone constraints
* :mod:`uavicl.gibbs` - annealed search over BS positioning powers
* :mod:`uavicl.baselines` - PSO / equal-power / center-deployment, CRLB maps
* :mod:`uavicl.harness` - scenario JSON, experiment runner, persistence
"""

from .model import (
    Allocation,
    ChannelParams,
    Position3,
    RateTable,
    ScenarioConfig,
    Solution,
)
from .harness import load_scenario, paper_scenario_path

__version__ = "0.1.0"

__all__ = [
    "Allocation",
    "ChannelParams",
    "Position3",
    "RateTable",
    "ScenarioConfig",
    "Solution",
    "load_scenario",
    "paper_scenario_path",
    "__version__",
]
