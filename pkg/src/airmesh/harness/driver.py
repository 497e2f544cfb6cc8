"""Pieces shared by the virtual-time and real-time runners."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..gateway import Request, Response
from ..services import AirSystem, SystemConfig
from ..services.fixtures import user_password
from .consistency import check_consistency, trails_of
from .metrics import MetricsReport, Recorder
from .workload import Op, WorkloadSpec

PROBE_PERIOD_S = 1.0
PROBE_TIMEOUT_S = 1.0
PROBE_SOURCE = "probe"


def system_config(spec: WorkloadSpec) -> SystemConfig:
    return SystemConfig(
        seed=spec.seed,
        payment_fail_prob=spec.faults.payment_fail_prob,
        duplicate_delivery_prob=spec.faults.duplicate_delivery_prob,
    )


class RequestFactory:
    """Turns generated operations into gateway requests from per-user clients."""

    def __init__(self, system: AirSystem):
        self.system = system
        self.users = [u["user_id"] for u in system.fixtures.users]
        self.flight_ids = sorted(system.flights.inventory())
        self.search_keys = system.fixtures.search_keys
        self.tokens = {u: system.auth.issue(u, user_password(u)).access_token for u in self.users}

    def build(self, op: Op, defer: bool = False) -> Request:
        user = self.users[op.user]
        headers = {"Authorization": f"Bearer {self.tokens[user]}"}
        source = f"10.{op.user // 65536}.{(op.user // 256) % 256}.{op.user % 256}"
        if op.kind == "search":
            origin, destination, date = self.search_keys[op.key]
            q = {"origin": origin, "destination": destination, "date": date}
            return Request("GET", "/v1/flights", headers, query=q, source=source)
        if op.kind == "booking":
            body = {"flight_id": self.flight_ids[op.key], "seats": op.seats}
            return Request("POST", "/v1/bookings", headers, body, source=source, defer=defer)
        if op.kind == "profile":
            return Request("GET", f"/v1/users/{user}", headers, source=source)
        if op.kind == "trip":
            return Request("GET", f"/v1/trips/{user}", headers, source=source)
        raise ValueError(op.kind)

    @staticmethod
    def probe() -> Request:
        return Request("GET", "/v1/flights", source=PROBE_SOURCE)


@dataclass
class Tally:
    """Outcome counters; merged across client threads at report time."""

    statuses: dict[int, int] = field(default_factory=dict)
    errors: int = 0
    probes: int = 0
    probe_ok: int = 0

    def response(self, response: Response) -> None:
        self.statuses[response.status] = self.statuses.get(response.status, 0) + 1
        if response.status >= 500:
            self.errors += 1

    def merge(self, other: Tally) -> None:
        for k, v in other.statuses.items():
            self.statuses[k] = self.statuses.get(k, 0) + v
        self.errors += other.errors
        self.probes += other.probes
        self.probe_ok += other.probe_ok


def booking_counts(system: AirSystem) -> dict[str, int]:
    counts: dict[str, int] = {}
    for b in system.bookings.bookings(copy_values=False).values():
        counts[b["status"]] = counts.get(b["status"], 0) + 1
    return dict(sorted(counts.items()))


def build_report(
    spec: WorkloadSpec,
    system: AirSystem,
    duration_s: float,
    events_consumed: int,
    response_times: Recorder,
    propagation: Recorder,
    tally: Tally,
    inflight_rate: float,
    samples: int,
    resource_samples: list,
) -> MetricsReport:
    final = check_consistency(system.snapshot(), final=True, trails=trails_of(system))
    requests = sum(tally.statuses.values())
    stuck = len(system.bookings.stuck())
    # a stuck saga surfaces to its client as a 5xx, so it is already in tally.errors
    errors = tally.errors
    cache = system.cache.stats().as_dict()
    payments = system.payments
    faults = {
        "payment_attempts": payments.attempts,
        "payment_failures": payments.failures,
        "duplicate_notifications": system.bookings.duplicates_injected,
        "stuck_sagas": stuck,
        "notifications_processed": system.notifier.processed,
        "notification_records": len(system.notification_docs.doc_ids("notifications")),
    }
    return MetricsReport(
        scenario=spec.name,
        seed=spec.seed,
        clock=spec.clock,
        transport=spec.transport.value,
        duration_s=duration_s,
        requests=requests,
        events_consumed=events_consumed,
        throughput_eps=events_consumed / duration_s if duration_s > 0 else 0.0,
        response_time_ms=response_times.histogram(),
        propagation_latency_ms=propagation.histogram(),
        clock_anomalies=propagation.anomalies,
        cache=cache,
        error_rate=errors / requests if requests else 0.0,
        errors=errors,
        status_counts={str(k): v for k, v in sorted(tally.statuses.items())},
        bookings=booking_counts(system),
        consistency_rate_inflight=inflight_rate,
        consistency_samples=samples,
        consistency_rate_final=final.consistency_rate,
        consistency_violations=[list(v) for v in final.violations[:100]],
        availability=tally.probe_ok / tally.probes if tally.probes else 1.0,
        probes=tally.probes,
        faults=faults,
        cpu_mem_samples=resource_samples,
    )


def lognormal_ms(rng, fault) -> float:
    if fault is None:
        return 0.0
    return float(rng.lognormal(fault.mu, fault.sigma)) if fault.sigma > 0 else math.exp(fault.mu)
