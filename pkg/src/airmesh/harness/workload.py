"""Workload scenarios and seeded request generation."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

OPERATIONS = ("search", "booking", "profile", "trip")


class ScenarioError(ValueError):
    pass


class Transport(str, enum.Enum):
    INPROC = "inproc"
    HTTP = "http"


@dataclass
class LatencyFault:
    distribution: str = "lognormal"
    mu: float = 0.0  # of ln(ms)
    sigma: float = 0.0

    @property
    def mean_ms(self) -> float:
        return math.exp(self.mu + self.sigma**2 / 2)


@dataclass
class FaultConfig:
    payment_fail_prob: float = 0.0
    duplicate_delivery_prob: float = 0.0
    consumer_restart_period_s: float | None = None
    consumer_downtime_s: float = 0.2
    added_latency: LatencyFault | None = None

    def validate(self) -> None:
        for name in ("payment_fail_prob", "duplicate_delivery_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"{name} must be in [0, 1], got {p}")
        if self.consumer_restart_period_s is not None and self.consumer_restart_period_s <= 0:
            raise ScenarioError("consumer_restart_period_s must be positive or null")
        if self.consumer_downtime_s < 0:
            raise ScenarioError("consumer_downtime_s must be >= 0")
        if self.added_latency is not None:
            if self.added_latency.distribution != "lognormal":
                raise ScenarioError("added_latency supports only the lognormal distribution")
            if self.added_latency.sigma < 0:
                raise ScenarioError("added_latency.sigma must be >= 0")


@dataclass
class WorkloadSpec:
    name: str
    duration_s: float
    arrival_rate: float
    mix: dict[str, float]
    key_skew: float = 1.0
    seed: int = 0
    transport: Transport = Transport.INPROC
    clock: str = "virtual"
    ramp_s: float = 0.0
    key_universe: int | None = None  # number of search keys drawn from; None = all
    booking_seats: tuple[int, int] = (1, 2)
    sampling_period_ms: float = 100.0
    workers: int = 8
    faults: FaultConfig = field(default_factory=FaultConfig)

    def validate(self) -> WorkloadSpec:
        if self.duration_s < 0:
            raise ScenarioError("duration_s must be >= 0")
        if self.arrival_rate < 0:
            raise ScenarioError("arrival_rate must be >= 0")
        unknown = set(self.mix) - set(OPERATIONS)
        if unknown:
            raise ScenarioError(f"unknown operations in mix: {sorted(unknown)}")
        if any(v < 0 for v in self.mix.values()):
            raise ScenarioError("mix fractions must be >= 0")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ScenarioError(f"mix fractions must sum to 1, got {sum(self.mix.values())}")
        if self.key_skew < 0:
            raise ScenarioError("key_skew must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")
        if self.clock not in ("virtual", "real"):
            raise ScenarioError("clock must be 'virtual' or 'real'")
        if self.ramp_s < 0 or self.ramp_s > max(self.duration_s, 0):
            raise ScenarioError("ramp_s must lie in [0, duration_s]")
        if self.key_universe is not None and self.key_universe < 1:
            raise ScenarioError("key_universe must be >= 1")
        lo, hi = self.booking_seats
        if not 1 <= lo <= hi:
            raise ScenarioError("booking_seats must be [lo, hi] with 1 <= lo <= hi")
        if self.sampling_period_ms <= 0 or self.workers < 1:
            raise ScenarioError("sampling_period_ms and workers must be positive")
        if self.transport is Transport.HTTP and self.clock == "virtual":
            raise ScenarioError("http transport needs the real clock")
        self.faults.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transport"] = self.transport.value
        d["booking_seats"] = list(self.booking_seats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadSpec:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario fields: {sorted(extra)}")
        faults = dict(d.pop("faults", None) or {})
        fault_fields = set(FaultConfig.__dataclass_fields__)
        if set(faults) - fault_fields:
            raise ScenarioError(f"unknown fault fields: {sorted(set(faults) - fault_fields)}")
        latency = faults.pop("added_latency", None)
        try:
            fc = FaultConfig(**faults, added_latency=LatencyFault(**latency) if latency else None)
            if "transport" in d:
                d["transport"] = Transport(d["transport"])
            if "booking_seats" in d:
                d["booking_seats"] = tuple(d["booking_seats"])
            spec = cls(**d, faults=fc)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc)) from exc
        return spec.validate()


def scenario_path(name_or_path: str) -> Path:
    """A bundled scenario name (``faulted``) or a file path."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = resources.files("airmesh.scenarios") / f"{name_or_path.removesuffix('.json')}.json"
    if bundled.is_file():
        return Path(str(bundled))
    raise ScenarioError(f"no scenario {name_or_path!r}")


def thresholds_path(name_or_path: str) -> Path:
    """A bundled thresholds name (``faulted``) or a file path."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = resources.files("airmesh.scenarios") / "thresholds" / f"{name_or_path.removesuffix('.json')}.json"
    if bundled.is_file():
        return Path(str(bundled))
    return p  # let the caller report the missing file


def load_scenario(name_or_path: str) -> WorkloadSpec:
    path = scenario_path(name_or_path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return WorkloadSpec.from_dict(data)


class ZipfSampler:
    """Ranks 0..n-1 with P(k) proportional to (k+1)^-s; s = 0 is uniform."""

    def __init__(self, n: int, s: float, rng: np.random.Generator):
        weights = np.arange(1, n + 1, dtype=float) ** -s
        self.cdf = np.cumsum(weights / weights.sum())
        self.cdf[-1] = 1.0
        self.rng = rng

    def sample(self, size: int | None = None):
        u = self.rng.random(size)
        return np.searchsorted(self.cdf, u, side="right")


@dataclass(frozen=True)
class Op:
    t_ns: int  # scheduled arrival, relative to run start
    kind: str
    user: int
    key: int  # search-key rank or flight rank
    seats: int


def arrival_times(spec: WorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrivals over [0, duration); with a ramp the rate grows linearly to ``arrival_rate``.

    Uses time rescaling: unit-rate arrivals are mapped through the inverse of
    the cumulative intensity.
    """
    rate, T, R = spec.arrival_rate, spec.duration_s, spec.ramp_s
    if rate <= 0 or T <= 0:
        return np.zeros(0)
    total = rate * (T - R / 2)
    # draw a few more than expected, then trim
    n = int(total + 10 * math.sqrt(total) + 20)
    while True:
        cum = np.cumsum(rng.exponential(1.0, n))
        if cum[-1] >= total:
            break
        n *= 2
    cum = cum[cum < total]
    if R <= 0:
        return cum / rate
    ramp_mass = rate * R / 2
    return np.where(cum < ramp_mass, np.sqrt(2 * cum * R / rate), R + (cum - ramp_mass) / rate)


def generate_ops(spec: WorkloadSpec, n_users: int, n_flights: int, n_search_keys: int) -> list[Op]:
    rng = np.random.default_rng(spec.seed)
    times = arrival_times(spec, rng)
    n = len(times)
    kinds = [k for k in OPERATIONS if spec.mix.get(k, 0) > 0]
    probs = np.array([spec.mix[k] for k in kinds])
    kind_idx = rng.choice(len(kinds), size=n, p=probs / probs.sum()) if n else np.zeros(0, dtype=int)
    users = rng.integers(0, n_users, size=n)
    universe = min(spec.key_universe or n_search_keys, n_search_keys)
    search_rank = ZipfSampler(universe, spec.key_skew, rng).sample(n) if n else np.zeros(0, dtype=int)
    flight_rank = ZipfSampler(n_flights, spec.key_skew, rng).sample(n) if n else np.zeros(0, dtype=int)
    lo, hi = spec.booking_seats
    seats = rng.integers(lo, hi + 1, size=n)
    ops = []
    for i in range(n):
        kind = kinds[kind_idx[i]]
        key = int(search_rank[i]) if kind == "search" else int(flight_rank[i])
        ops.append(Op(int(times[i] * 1e9), kind, int(users[i]), key, int(seats[i])))
    return ops
