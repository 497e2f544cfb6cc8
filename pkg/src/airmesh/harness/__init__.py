"""Load harness: workload generation, fault injection, metrics and verification."""

from .consistency import ConsistencyReport, ConsistencyTracker, check_consistency
from .metrics import Histogram, MetricsReport
from .report import emit_report, load_report, verify
from .workload import FaultConfig, ScenarioError, Transport, WorkloadSpec, load_scenario


def run(spec: WorkloadSpec) -> MetricsReport:
    """Run a workload on the clock it names."""
    spec.validate()
    if spec.clock == "virtual":
        from .sim import run_virtual

        return run_virtual(spec)
    from .live import run_live

    return run_live(spec)


__all__ = [
    "ConsistencyReport",
    "ConsistencyTracker",
    "FaultConfig",
    "Histogram",
    "MetricsReport",
    "ScenarioError",
    "Transport",
    "WorkloadSpec",
    "check_consistency",
    "emit_report",
    "load_report",
    "load_scenario",
    "run",
    "verify",
]
