"""Booking service and the cross-service booking saga.

Steps, in order: reserve seats, charge payment, confirm booking. A failure
at the charge step releases the seats (and refunds a charge, if any) in
reverse order; a failure at the reserve step is a plain rejection and
leaves no booking record behind.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass
from typing import Callable

from ..broker import Broker
from ..clock import Clock
from ..store import TxnStore, retry_transaction
from ..txn import JournalEntry, SagaExecution, SagaState, SagaStep, StepFailed
from .flights import FlightService
from .payments import PaymentService

CONFIRMED = "Confirmed"
REJECTED = "Rejected"
COMPENSATED = "Compensated"
STUCK = "Stuck"


@dataclass(frozen=True)
class BookingResult:
    status: str
    booking_id: str
    reason: str | None = None

    @property
    def is_error(self) -> bool:
        return self.status == STUCK


@dataclass
class BookingContext:
    booking_id: str
    user_id: str
    flight_id: str
    seats: int
    payment: dict | None = None


class BookingFlow:
    """A booking in progress. ``advance`` performs one side effect at a time."""

    def __init__(self, service: BookingService, ctx: BookingContext, saga: SagaExecution):
        self.service = service
        self.ctx = ctx
        self.saga = saga
        self.result: BookingResult | None = None

    @property
    def booking_id(self) -> str:
        return self.ctx.booking_id

    def advance(self) -> BookingResult | None:
        if self.result is not None:
            return self.result
        if not self.saga.done:
            self.saga.advance()
            return None
        self.result = self.service._finish(self)
        return self.result

    def run(self) -> BookingResult:
        while (result := self.advance()) is None:
            pass
        return result


class BookingService:
    def __init__(
        self,
        txn: TxnStore,
        broker: Broker,
        flights: FlightService,
        payments: PaymentService,
        clock: Clock,
        duplicate_prob: float = 0.0,
        seed: int = 0,
        sms_preference: Callable[[str], bool] | None = None,
    ):
        self.txn = txn
        self.broker = broker
        self.flights = flights
        self.payments = payments
        self.clock = clock
        self.duplicate_prob = duplicate_prob
        self.sms_preference = sms_preference
        self._rng = random.Random(seed ^ 0x5EED)
        self._lock = threading.Lock()
        self._flows: dict[str, BookingFlow] = {}
        self.duplicates_injected = 0

    # -- persistence helpers

    def _put_booking(self, booking: dict) -> None:
        def body(h):
            index_key = f"user_bookings:{booking['user_id']}"
            index = self.txn.txn_get(h, index_key, [])
            if booking["booking_id"] not in index:
                index.append(booking["booking_id"])
            self.txn.txn_set(h, index_key, index)
            self.txn.txn_set(h, f"booking:{booking['booking_id']}", booking)

        retry_transaction(self.txn, body)

    def _update_booking(self, booking_id: str, **changes) -> dict:
        def body(h):
            b = self.txn.txn_get(h, f"booking:{booking_id}")
            b.update(changes)
            self.txn.txn_set(h, f"booking:{booking_id}", b)
            return b

        return retry_transaction(self.txn, body)

    def _journal(self, entry: JournalEntry) -> None:
        self.txn.put(f"saga:{entry.saga_id}:{entry.seq:04d}", entry.as_dict())

    def _publish(self, kind: str, booking: dict, **extra) -> None:
        body = {"type": kind, "booking_id": booking["booking_id"], "user_id": booking["user_id"], "flight_id": booking["flight_id"], "seats": booking["seats"], **extra}
        self.broker.publish("bookings", booking["booking_id"], json.dumps(body, sort_keys=True), correlation_id=booking["booking_id"])

    # -- saga steps

    def _reserve(self, ctx: BookingContext):
        result = self.flights.reserve_seats(ctx.flight_id, ctx.seats, hold_id=ctx.booking_id)
        if not result.reserved:
            raise StepFailed("insufficient seats")
        if self.txn.get(f"booking:{ctx.booking_id}") is None:
            booking = {
                "booking_id": ctx.booking_id,
                "user_id": ctx.user_id,
                "flight_id": ctx.flight_id,
                "seats": ctx.seats,
                "status": "Pending",
                "payment_id": None,
                "created_ts": self.clock.now_ns(),
            }
            self._put_booking(booking)
            self._publish("BookingCreated", booking)
        return result.hold_id

    def _release(self, ctx: BookingContext):
        self.flights.release_seats(ctx.flight_id, ctx.seats, hold_id=ctx.booking_id)

    def _charge(self, ctx: BookingContext):
        amount = ctx.seats * self.flights.price(ctx.flight_id)
        try:
            ctx.payment = self.payments.charge(ctx.booking_id, amount)
        except Exception as exc:  # noqa: BLE001 - an unreachable payment service fails the step
            raise StepFailed(f"payment service error: {exc}") from exc
        if ctx.payment["status"] != "Charged":
            raise StepFailed("payment declined")
        return ctx.payment["payment_id"]

    def _refund(self, ctx: BookingContext):
        payment = self.payments.get_payment(f"pay-{ctx.booking_id}")
        if payment is not None and payment["status"] == "Charged":
            self.payments.refund(payment["payment_id"])

    def _confirm(self, ctx: BookingContext):
        booking = self._update_booking(ctx.booking_id, status=CONFIRMED, payment_id=ctx.payment["payment_id"])
        self._publish("BookingConfirmed", booking, payment_id=booking["payment_id"])
        self._notify(booking)
        return booking["booking_id"]

    def _cancel(self, ctx: BookingContext):
        self._update_booking(ctx.booking_id, status="Cancelled")

    def _notify(self, booking: dict) -> None:
        message = json.dumps({"booking_id": booking["booking_id"], "user_id": booking["user_id"], "kind": "Email"}, sort_keys=True)
        self.broker.enqueue("notify.email", message)
        with self._lock:
            duplicate = self.duplicate_prob > 0 and self._rng.random() < self.duplicate_prob
        if duplicate:
            self.broker.enqueue("notify.email", message)
            self.duplicates_injected += 1
        if self.sms_preference is not None and self.sms_preference(booking["user_id"]):
            sms = json.dumps({"booking_id": booking["booking_id"], "user_id": booking["user_id"], "kind": "SMS"}, sort_keys=True)
            self.broker.enqueue("notify.sms", sms)

    def steps(self) -> list[SagaStep]:
        return [
            SagaStep("ReserveSeats", self._reserve, self._release),
            SagaStep("ChargePayment", self._charge, self._refund),
            SagaStep("ConfirmBooking", self._confirm, self._cancel),
        ]

    # -- public API

    def begin_booking(self, user_id: str, flight_id: str, seats: int, booking_id: str) -> BookingFlow:
        if seats < 1:
            raise ValueError("seats must be >= 1")
        with self._lock:
            flow = self._flows.get(booking_id)
            if flow is not None:
                return flow  # client retry with the same correlation id
            ctx = BookingContext(booking_id, user_id, flight_id, seats)
            saga = SagaExecution(self.steps(), ctx, saga_id=booking_id, clock=self.clock, journal_sink=self._journal)
            flow = self._flows[booking_id] = BookingFlow(self, ctx, saga)
            return flow

    def create_booking(self, user_id: str, flight_id: str, seats: int, booking_id: str) -> BookingResult:
        return self.begin_booking(user_id, flight_id, seats, booking_id).run()

    def _finish(self, flow: BookingFlow) -> BookingResult:
        saga = flow.saga
        bid = flow.booking_id
        if saga.state is SagaState.COMPLETED:
            return BookingResult(CONFIRMED, bid)
        if saga.state is SagaState.STUCK_COMPENSATING:
            return BookingResult(STUCK, bid, saga.reason)
        if saga.failed_step == "ReserveSeats":
            return BookingResult(REJECTED, bid, saga.reason)
        booking = self._update_booking(bid, status=COMPENSATED)
        self._publish("BookingCompensated", booking, reason=saga.reason)
        return BookingResult(COMPENSATED, bid, saga.reason)

    def get_booking(self, booking_id: str) -> dict | None:
        return self.txn.get(f"booking:{booking_id}")

    def bookings_for(self, user_id: str) -> list[dict]:
        ids = self.txn.get(f"user_bookings:{user_id}", [])
        return [self.txn.get(f"booking:{bid}") for bid in ids]

    def bookings(self, copy_values: bool = True) -> dict[str, dict]:
        return {v["booking_id"]: v for _, v in self.txn.scan("booking:", copy_values)}

    def journal(self, booking_id: str) -> list[dict]:
        return [v for _, v in self.txn.scan(f"saga:{booking_id}:")]

    def in_flight(self) -> int:
        with self._lock:
            return sum(1 for f in self._flows.values() if f.result is None)

    def stuck(self) -> list[str]:
        with self._lock:
            return sorted(b for b, f in self._flows.items() if f.result is not None and f.result.status == STUCK)
