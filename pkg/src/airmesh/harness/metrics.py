"""Latency histograms and the run report."""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Any

# Upper bucket bounds in ms; the last bucket is open-ended.
BUCKET_BOUNDS_MS = (0.1, 0.25, 0.5, 1, 2.5, 5, 10, 25, 50, 75, 100, 250, 500, 1000, 2500, 5000)


def nearest_rank(sorted_values: list[float], q: float) -> float:
    """Nearest-rank percentile: the smallest value with at least ``q`` of the mass at or below it."""
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


class Recorder:
    """Thread-safe sample sink; summarised into a :class:`Histogram` at report time."""

    def __init__(self):
        self._values: list[float] = []
        self._lock = threading.Lock()
        self.anomalies = 0  # negative samples, excluded

    def add(self, value_ms: float) -> None:
        if value_ms < 0:
            with self._lock:
                self.anomalies += 1
            return
        with self._lock:
            self._values.append(value_ms)

    def __len__(self) -> int:
        return len(self._values)

    def values(self) -> list[float]:
        with self._lock:
            return list(self._values)

    def histogram(self) -> Histogram:
        return Histogram.of(self.values())


@dataclass
class Histogram:
    count: int = 0
    mean: float = 0.0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    max: float = 0.0
    buckets: list[list] = field(default_factory=list)  # [upper_bound_ms or "+Inf", count]

    @classmethod
    def of(cls, values: list[float]) -> Histogram:
        if not values:
            return cls(buckets=[[b, 0] for b in BUCKET_BOUNDS_MS] + [["+Inf", 0]])
        v = sorted(values)
        counts = [0] * (len(BUCKET_BOUNDS_MS) + 1)
        i = 0
        for x in v:
            while i < len(BUCKET_BOUNDS_MS) and x > BUCKET_BOUNDS_MS[i]:
                i += 1
            counts[i] += 1
        bounds: list[Any] = list(BUCKET_BOUNDS_MS) + ["+Inf"]
        return cls(
            count=len(v),
            mean=math.fsum(v) / len(v),
            p50=nearest_rank(v, 0.50),
            p95=nearest_rank(v, 0.95),
            p99=nearest_rank(v, 0.99),
            max=v[-1],
            buckets=[[b, c] for b, c in zip(bounds, counts)],
        )


@dataclass
class MetricsReport:
    scenario: str = ""
    seed: int = 0
    clock: str = "virtual"
    transport: str = "inproc"
    duration_s: float = 0.0
    requests: int = 0
    events_consumed: int = 0
    throughput_eps: float = 0.0
    response_time_ms: Histogram = field(default_factory=Histogram)
    propagation_latency_ms: Histogram = field(default_factory=Histogram)
    clock_anomalies: int = 0
    cache: dict = field(default_factory=dict)
    error_rate: float = 0.0
    errors: int = 0
    status_counts: dict = field(default_factory=dict)
    bookings: dict = field(default_factory=dict)
    consistency_rate_inflight: float = 1.0
    consistency_samples: int = 0
    consistency_rate_final: float = 1.0
    consistency_violations: list = field(default_factory=list)
    availability: float = 1.0
    probes: int = 0
    faults: dict = field(default_factory=dict)
    cpu_mem_samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        d = dict(d)
        d["response_time_ms"] = Histogram(**d["response_time_ms"])
        d["propagation_latency_ms"] = Histogram(**d["propagation_latency_ms"])
        return cls(**d)

    def scalars(self) -> dict[str, Any]:
        """Flattened dotted-path view of every numeric metric (lists excluded)."""
        out: dict[str, Any] = {}

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for k in sorted(value):
                    walk(f"{prefix}.{k}" if prefix else k, value[k])
            elif isinstance(value, (int, float)) and not isinstance(value, bool):
                out[prefix] = value
            elif value is None:
                out[prefix] = None

        walk("", self.to_dict())
        return out
