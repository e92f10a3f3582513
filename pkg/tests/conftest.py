import time
from dataclasses import dataclass

import pytest

import resilient_swarm as rs

SCENARIOS = ("nominal", "understate", "overstate")
SEEDS = tuple(range(1, 11))


@dataclass
class ScenarioSuite:
    runs: dict
    wall_time: float

    def get(self, scenario, seed):
        return self.runs[(scenario, seed)]


@pytest.fixture(scope="session")
def scenario_suite():
    """All 30 studied runs (3 scenarios x 10 seeds), shared by the acceptance tests."""
    runs = {}
    t0 = time.perf_counter()
    for scenario in SCENARIOS:
        for seed in SEEDS:
            cfg = rs.scenario_config(scenario, seed=seed)
            log, verdict = rs.run_scenario(cfg)
            runs[(scenario, seed)] = (cfg, log, verdict)
    return ScenarioSuite(runs=runs, wall_time=time.perf_counter() - t0)
