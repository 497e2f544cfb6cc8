from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

from ..broker import Broker
from ..cache import TtlCache, TtlClass
from ..store import DocumentStore, TxnStore, retry_transaction

TXN_RETRIES = 10


class NotFound(Exception):
    pass


@dataclass(frozen=True)
class ReserveResult:
    reserved: bool
    hold_id: str
    available: int


def search_key(origin, destination, date) -> str:
    return f"search:{origin or '*'}:{destination or '*'}:{date or '*'}"


class FlightService:
    """Flight catalog and seat inventory.

    Static schedule documents live in the document store; seat counts and
    per-booking holds live in the transactional store so reserve/release are
    atomic.
    """

    def __init__(self, docs: DocumentStore, txn: TxnStore, cache: TtlCache, broker: Broker):
        self.docs = docs
        self.txn = txn
        self.cache = cache
        self.broker = broker
        self.store_queries = 0
        self._holds = itertools.count(1)

    def load(self, flights: list[dict]) -> None:
        for f in flights:
            self.docs.doc_put("flights", f["flight_id"], f)
            self.txn.put(f"seats:{f['flight_id']}", {"capacity": f["capacity"], "available": f["capacity"]})

    def _with_seats(self, doc: dict) -> dict:
        seats = self.txn.get(f"seats:{doc['flight_id']}")
        return {**doc, "seats_available": seats["available"]}

    def search_flights(self, origin=None, destination=None, date=None) -> list[dict]:
        def load():
            self.store_queries += 1
            flt = {k: v for k, v in (("origin", origin), ("destination", destination), ("date", date)) if v}
            docs = self.docs.doc_query("flights", flt)
            return sorted((self._with_seats(d) for d in docs), key=lambda f: (f["departure_ts"], f["flight_id"]))

        return self.cache.get_or_load(search_key(origin, destination, date), load, TtlClass.SHORT)

    def get_flight(self, flight_id: str) -> dict:
        doc = self.docs.doc_get("flights", flight_id)
        if doc is None:
            raise NotFound(flight_id)
        return {**doc, "seats_available": self.availability(flight_id)}

    def availability(self, flight_id: str) -> int:
        def load():
            self.store_queries += 1
            seats = self.txn.get(f"seats:{flight_id}")
            if seats is None:
                raise NotFound(flight_id)
            return seats["available"]

        return self.cache.get_or_load(f"avail:{flight_id}", load, TtlClass.SHORT)

    def price(self, flight_id: str) -> int:
        doc = self.docs.doc_get("flights", flight_id)
        if doc is None:
            raise NotFound(flight_id)
        return doc["price"]

    def _event(self, kind: str, hold_id: str, flight_id: str, seats: int) -> None:
        payload = json.dumps({"type": kind, "booking_id": hold_id, "flight_id": flight_id, "seats": seats}, sort_keys=True)
        self.broker.publish("inventory", hold_id, payload, correlation_id=hold_id)

    def reserve_seats(self, flight_id: str, n: int, hold_id: str | None = None) -> ReserveResult:
        if n < 1:
            raise ValueError("n must be >= 1")
        if hold_id is None:
            hold_id = f"hold-{next(self._holds)}"

        def body(h):
            hold = self.txn.txn_get(h, f"hold:{hold_id}")
            seats = self.txn.txn_get(h, f"seats:{flight_id}")
            if seats is None:
                self.txn.txn_abort(h)
                raise NotFound(flight_id)
            if hold is not None and hold["state"] == "held":
                self.txn.txn_abort(h)
                return ReserveResult(True, hold_id, seats["available"]), False
            if seats["available"] < n:
                self.txn.txn_abort(h)
                return ReserveResult(False, hold_id, seats["available"]), False
            seats["available"] -= n
            self.txn.txn_set(h, f"seats:{flight_id}", seats)
            self.txn.txn_set(h, f"hold:{hold_id}", {"flight_id": flight_id, "seats": n, "state": "held"})
            return ReserveResult(True, hold_id, seats["available"]), True

        result, changed = retry_transaction(self.txn, body, TXN_RETRIES)
        if changed:
            self.cache.invalidate(f"avail:{flight_id}")
            self._event("SeatsReserved", hold_id, flight_id, n)
        return result

    def release_seats(self, flight_id: str, n: int, hold_id: str | None = None) -> int:
        """Release a hold (idempotently) or, without a hold id, return ``n`` seats."""

        def body(h):
            seats = self.txn.txn_get(h, f"seats:{flight_id}")
            if seats is None:
                self.txn.txn_abort(h)
                raise NotFound(flight_id)
            count = n
            if hold_id is not None:
                hold = self.txn.txn_get(h, f"hold:{hold_id}")
                if hold is None or hold["state"] != "held":
                    self.txn.txn_abort(h)
                    return seats["available"], False
                count = hold["seats"]
                self.txn.txn_set(h, f"hold:{hold_id}", {**hold, "state": "released"})
            seats["available"] = min(seats["capacity"], seats["available"] + count)
            self.txn.txn_set(h, f"seats:{flight_id}", seats)
            return seats["available"], True

        available, changed = retry_transaction(self.txn, body, TXN_RETRIES)
        if changed:
            self.cache.invalidate(f"avail:{flight_id}")
            if hold_id is not None:
                self._event("SeatsReleased", hold_id, flight_id, n)
        return available

    def inventory(self) -> dict[str, dict]:
        return {k.split(":", 1)[1]: v for k, v in self.txn.scan("seats:")}

    def holds(self) -> dict[str, dict]:
        return {k.split(":", 1)[1]: v for k, v in self.txn.scan("hold:")}
