"""Run counters backing the pipeline cost instrumentation."""

from dataclasses import dataclass


@dataclass
class RunCounters:
    projections_run: int = 0
    hill_climbs_run: int = 0
    regressors_trained: int = 0

    def reset(self) -> None:
        self.projections_run = 0
        self.hill_climbs_run = 0
        self.regressors_trained = 0

    def snapshot(self) -> dict:
        return {
            "projections_run": self.projections_run,
            "hill_climbs_run": self.hill_climbs_run,
            "regressors_trained": self.regressors_trained,
        }


# Process-wide counters; commands reset them at the start of a run.
counters = RunCounters()
