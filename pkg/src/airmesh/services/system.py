"""Wires the broker, stores, cache, auth and the five services into one testbed instance."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..auth import AuthService, StaticDirectory
from ..broker import Broker
from ..cache import DEFAULT_CAPACITY, TtlCache
from ..clock import Clock, RealClock
from ..store import DocumentStore, TxnStore, canonical_json, snapshot_digest
from . import fixtures
from .bookings import BookingService
from .consumers import EVENT_TOPICS, EventProjector, NotificationService
from .flights import FlightService
from .payments import PaymentService
from .profiles import ProfileService
from .trips import TripReader

ADMIN_USER = "admin"
ADMIN_PASSWORD = "admin-pw"
REPORTING_CLIENT = "svc-reporting"
REPORTING_SECRET = "svc-reporting-secret"


@dataclass
class SystemConfig:
    seed: int = 0
    n_flights: int = 200
    n_users: int = 1000
    payment_fail_prob: float = 0.0
    duplicate_delivery_prob: float = 0.0
    rate_capacity: float = 100.0
    rate_refill: float = 100.0
    partitions: int = 4
    cache_capacity: int = DEFAULT_CAPACITY
    secret: bytes = b"airmesh-dev-secret"
    flights: list[dict] | None = field(default=None, repr=False)  # overrides generated flights


class _Directory:
    """Users come from the profile store; operators and clients from a static table."""

    def __init__(self, profiles: ProfileService, static: StaticDirectory):
        self.profiles = profiles
        self.static = static

    def credentials(self, principal: str):
        return self.static.credentials(principal) or self.profiles.credentials(principal)


@dataclass
class Snapshot:
    """Read-only view of every service store, as the consistency checker needs it."""

    bookings: dict[str, dict]
    payments: dict[str, dict]
    holds: dict[str, dict]
    inventory: dict[str, dict]
    notifications: set[str]


class AirSystem:
    def __init__(self, config: SystemConfig | None = None, clock: Clock | None = None):
        self.config = config = config or SystemConfig()
        self.clock = clock or RealClock()
        self.fixtures = fixtures.generate(config.seed, config.n_flights, config.n_users)

        self.broker = Broker(self.clock, config.partitions)
        for t in EVENT_TOPICS:
            self.broker.create_topic(t)

        self.flight_docs = DocumentStore("flights")
        self.profile_docs = DocumentStore("profiles")
        self.notification_docs = DocumentStore("notifications")
        self.event_docs = DocumentStore("events")
        self.flight_txn = TxnStore("inventory")
        self.booking_txn = TxnStore("bookings")
        self.payment_txn = TxnStore("payments")
        self.cache = TtlCache(self.clock, config.cache_capacity)

        self.flights = FlightService(self.flight_docs, self.flight_txn, self.cache, self.broker)
        self.flights.load(config.flights if config.flights is not None else self.fixtures.flights)
        self.payments = PaymentService(self.payment_txn, self.broker, config.payment_fail_prob, config.seed)
        self.profiles = ProfileService(self.profile_docs, self.cache)
        for user in self.fixtures.users:
            self.profiles.register(user, fixtures.user_password(user["user_id"]), fixtures.USER_SCOPES)
        self.bookings = BookingService(
            self.booking_txn,
            self.broker,
            self.flights,
            self.payments,
            self.clock,
            duplicate_prob=config.duplicate_delivery_prob,
            seed=config.seed,
            sms_preference=self.profiles.wants_sms,
        )
        self.notifier = NotificationService(self.broker, self.notification_docs, self.clock)
        self.projector = EventProjector(self.broker, self.event_docs, self.clock)
        self.trips = TripReader(self.profiles, self.bookings, self.flights, self.payments)

        static = StaticDirectory()
        static.add(ADMIN_USER, ADMIN_PASSWORD, fixtures.ADMIN_SCOPES)
        static.add(REPORTING_CLIENT, REPORTING_SECRET, ("booking.read", "payment.read", "profile.read", "admin"))
        self.auth = AuthService(config.secret, _Directory(self.profiles, static), self.clock, seed=config.seed)

        from ..gateway import Gateway  # gateway imports service types; import late to avoid a cycle

        self.gateway = Gateway(self, rate_capacity=config.rate_capacity, rate_refill=config.rate_refill)

    # -- introspection

    def get_trip(self, user_id: str) -> dict:
        return self.trips.get_trip(user_id)

    def quiesce(self, rounds: int = 100) -> None:
        """Drain topics and notification queues until nothing is left in flight."""
        for _ in range(rounds):
            moved = self.projector.drain() + self.notifier.drain()
            if moved == 0 and self.projector.lag() == 0 and self.notifier.pending() == 0:
                return
        raise RuntimeError("system did not quiesce")

    def snapshot(self) -> Snapshot:
        b = {v["booking_id"]: v for _, v in self.booking_txn.scan("booking:", copy_values=False)}
        p = {v["payment_id"]: v for _, v in self.payment_txn.scan("pay:", copy_values=False)}
        holds = {k[5:]: v for k, v in self.flight_txn.scan("hold:", copy_values=False)}
        inv = {k[6:]: v for k, v in self.flight_txn.scan("seats:", copy_values=False)}
        return Snapshot(b, p, holds, inv, set(self.notification_docs.doc_ids("notifications")))

    def broker_fingerprint(self) -> str:
        state = {
            "topics": {t: self.broker.topic(t).end_offsets() for t in self.broker.topics()},
            "queues": {q: self.broker.queue_depth(q) for q in self.broker.queues()},
        }
        return hashlib.sha256(canonical_json(state).encode()).hexdigest()

    def digests(self) -> dict[str, str]:
        stores = (
            self.flight_docs,
            self.profile_docs,
            self.notification_docs,
            self.event_docs,
            self.flight_txn,
            self.booking_txn,
            self.payment_txn,
        )
        out = {s.name + ":" + type(s).__name__: snapshot_digest(s) for s in stores}
        out["broker"] = self.broker_fingerprint()
        return out
