"""Cross-service consistency checks over booking, payment and inventory state.

A booking is consistent when its status agrees with its payment and its seat
hold. While a run is in progress a Pending booking is consistent only in a
state the forward saga path passes through (seats held, payment absent or
charged); a Pending booking whose hold is released or whose payment failed
is mid-compensation and counts as inconsistent. At quiesce, Pending is
itself a violation and notification and event-trail completeness apply.
"""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, field

from ..services.system import AirSystem, Snapshot

HELD = "held"


@dataclass
class ConsistencyReport:
    total_bookings: int = 0
    consistent_bookings: int = 0
    violations: list[tuple[str, str]] = field(default_factory=list)

    @property
    def consistency_rate(self) -> float:
        if self.total_bookings == 0:
            return 1.0
        return self.consistent_bookings / self.total_bookings


def booking_violations(booking: dict, payment: dict | None, hold: dict | None, final: bool,
                       notifications: set[str] | None = None, trail: list[str] | None = None) -> list[str]:
    bid = booking["booking_id"]
    status = booking["status"]
    out = []
    paid = payment is not None and payment["status"] == "Charged"
    held = hold is not None and hold["state"] == HELD
    if hold is not None and (hold["flight_id"] != booking["flight_id"] or hold["seats"] != booking["seats"]):
        out.append("hold does not match booking")
    if status == "Confirmed":
        if not paid:
            out.append("confirmed without charged payment")
        elif booking.get("payment_id") != payment["payment_id"]:
            out.append("confirmed with wrong payment id")
        if not held:
            out.append("confirmed without held seats")
    elif status in ("Compensated", "Cancelled"):
        if paid:
            out.append("compensated but payment still charged")
        if held:
            out.append("compensated but seats still held")
    elif status == "Pending":
        if final:
            out.append("pending at quiesce")
        elif not held or (payment is not None and not paid):
            out.append("mid-compensation")
    else:
        out.append(f"unknown status {status}")

    if final and notifications is not None:
        sent = f"{bid}:Email" in notifications
        if status == "Confirmed" and not sent:
            out.append("confirmed without notification")
        if status != "Confirmed" and (sent or f"{bid}:SMS" in notifications):
            out.append("notification for unconfirmed booking")
    if final and trail is not None:
        if trail.count("BookingCreated") != 1:
            out.append("event trail lacks BookingCreated")
        ends = (trail.count("BookingConfirmed"), trail.count("BookingCompensated"))
        expected = {"Confirmed": (1, 0), "Compensated": (0, 1)}.get(status)
        if expected is not None and ends != expected:
            out.append("event trail terminal events wrong")
    return out


def flight_violations(inventory: dict[str, dict], holds: dict[str, dict]) -> dict[str, str]:
    """Per-flight seat conservation: capacity = available + seats in held holds."""
    held = defaultdict(int)
    for h in holds.values():
        if h["state"] == HELD:
            held[h["flight_id"]] += h["seats"]
    bad = {}
    for fid, inv in inventory.items():
        if not 0 <= inv["available"] <= inv["capacity"]:
            bad[fid] = "availability out of range"
        elif inv["capacity"] != inv["available"] + held[fid]:
            bad[fid] = "seat conservation"
    return bad


def check_consistency(snapshot: Snapshot, final: bool = True, trails: dict[str, list[str]] | None = None) -> ConsistencyReport:
    report = ConsistencyReport()
    bad_flights = flight_violations(snapshot.inventory, snapshot.holds)
    for bid in sorted(snapshot.bookings):
        booking = snapshot.bookings[bid]
        problems = booking_violations(
            booking,
            snapshot.payments.get(f"pay-{bid}"),
            snapshot.holds.get(bid),
            final,
            snapshot.notifications if final else None,
            trails.get(bid, []) if (final and trails is not None) else None,
        )
        if booking["flight_id"] in bad_flights:
            problems.append(bad_flights[booking["flight_id"]])
        report.total_bookings += 1
        if problems:
            report.violations.extend((bid, p) for p in problems)
        else:
            report.consistent_bookings += 1
    if final:
        for hid, hold in sorted(snapshot.holds.items()):
            if hold["state"] == HELD and hid not in snapshot.bookings:
                report.total_bookings += 1
                report.violations.append((hid, "held seats without booking"))
    return report


def trails_of(system: AirSystem) -> dict[str, list[str]]:
    return {d["booking_id"]: [e["type"] for e in d["events"] if e["topic"] == "bookings"] for d in system.event_docs.doc_query("trails")}


class ConsistencyTracker:
    """In-flight consistency sampling that re-checks only what changed.

    Commit hooks on the three transactional stores mark bookings and flights
    dirty; ``sample()`` re-evaluates those and returns the fraction of all
    bookings currently consistent. Equivalent to a full in-flight
    ``check_consistency`` over a snapshot taken at the same moment.
    """

    def __init__(self, system: AirSystem):
        self.system = system
        self._lock = threading.Lock()
        self._dirty_bookings: set[str] = set()
        self._dirty_flights: set[str] = set()
        self._bad: set[str] = set()  # bookings failing their own rules
        self._known: set[str] = set()
        self._flight_of: dict[str, str] = {}
        self._by_flight: dict[str, set[str]] = defaultdict(set)
        self._held: dict[str, dict[str, int]] = defaultdict(dict)  # flight -> hold -> seats
        self._hold_flight: dict[str, str] = {}
        self._bad_flights: set[str] = set()
        self.samples: list[float] = []
        system.booking_txn.on_commit(self._booking_keys)
        system.payment_txn.on_commit(self._payment_keys)
        system.flight_txn.on_commit(self._flight_keys)

    def _booking_keys(self, keys) -> None:
        with self._lock:
            self._dirty_bookings.update(k[8:] for k in keys if k.startswith("booking:"))

    def _payment_keys(self, keys) -> None:
        with self._lock:
            self._dirty_bookings.update(k[8:] for k in keys if k.startswith("pay:pay-"))

    def _flight_keys(self, keys) -> None:
        with self._lock:
            for k in keys:
                if k.startswith("hold:"):
                    self._dirty_bookings.add(k[5:])
                elif k.startswith("seats:"):
                    self._dirty_flights.add(k[6:])

    def sample(self) -> float:
        sys_ = self.system
        with self._lock:
            bookings, self._dirty_bookings = self._dirty_bookings, set()
            flights, self._dirty_flights = self._dirty_flights, set()
        for bid in bookings:
            hold = sys_.flight_txn.get(f"hold:{bid}")
            if hold is not None:
                fid = hold["flight_id"]
                old = self._hold_flight.get(bid)
                if old is not None and old != fid:
                    self._held[old].pop(bid, None)
                    flights.add(old)
                self._hold_flight[bid] = fid
                if hold["state"] == HELD:
                    self._held[fid][bid] = hold["seats"]
                else:
                    self._held[fid].pop(bid, None)
                flights.add(fid)
            booking = sys_.booking_txn.get(f"booking:{bid}")
            if booking is None:
                continue
            if bid not in self._known:
                self._known.add(bid)
                self._flight_of[bid] = booking["flight_id"]
                self._by_flight[booking["flight_id"]].add(bid)
            if booking_violations(booking, sys_.payment_txn.get(f"pay:pay-{bid}"), hold, final=False):
                self._bad.add(bid)
            else:
                self._bad.discard(bid)
        for fid in flights:
            inv = sys_.flight_txn.get(f"seats:{fid}")
            if inv is None:
                continue
            ok = 0 <= inv["available"] <= inv["capacity"] and inv["capacity"] == inv["available"] + sum(self._held[fid].values())
            if ok:
                self._bad_flights.discard(fid)
            else:
                self._bad_flights.add(fid)
        total = len(self._known)
        if total == 0:
            rate = 1.0
        else:
            bad = set(self._bad)
            for fid in self._bad_flights:
                bad |= self._by_flight[fid]
            rate = (total - len(bad)) / total
        self.samples.append(rate)
        return rate

    @property
    def inflight_rate(self) -> float:
        return sum(self.samples) / len(self.samples) if self.samples else 1.0
