from __future__ import annotations

import json
import random
import threading

from ..broker import Broker
from ..store import TxnStore, retry_transaction


class InvalidState(Exception):
    pass


class ServiceUnavailable(Exception):
    pass


class PaymentService:
    """Charges and refunds, with seeded fault injection on charge."""

    def __init__(self, txn: TxnStore, broker: Broker, fail_prob: float = 0.0, seed: int = 0):
        if not 0.0 <= fail_prob <= 1.0:
            raise ValueError("fail_prob must be in [0, 1]")
        self.txn = txn
        self.broker = broker
        self.fail_prob = fail_prob
        self.available = True
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self.attempts = 0
        self.failures = 0

    def _event(self, payment: dict) -> None:
        kind = {"Charged": "PaymentCharged", "Failed": "PaymentFailed", "Refunded": "PaymentRefunded"}[payment["status"]]
        body = {"type": kind, "payment_id": payment["payment_id"], "booking_id": payment["booking_id"], "amount": payment["amount"]}
        self.broker.publish("payments", payment["booking_id"], json.dumps(body, sort_keys=True), correlation_id=payment["booking_id"])

    def charge(self, booking_id: str, amount: int) -> dict:
        if not self.available:
            raise ServiceUnavailable("payment service unavailable")
        payment_id = f"pay-{booking_id}"
        existing = self.txn.get(f"pay:{payment_id}")
        if existing is not None:
            return existing
        with self._lock:
            self.attempts += 1
            failed = self._rng.random() < self.fail_prob
            self.failures += failed
        payment = {
            "payment_id": payment_id,
            "booking_id": booking_id,
            "amount": amount,
            "status": "Failed" if failed else "Charged",
        }

        def body(h):
            current = self.txn.txn_get(h, f"pay:{payment_id}")
            if current is not None:
                self.txn.txn_abort(h)
                return current, False
            self.txn.txn_set(h, f"pay:{payment_id}", payment)
            return payment, True

        result, created = retry_transaction(self.txn, body)
        if created:
            self._event(result)
        return result

    def refund(self, payment_id: str) -> dict:
        def body(h):
            current = self.txn.txn_get(h, f"pay:{payment_id}")
            if current is None:
                self.txn.txn_abort(h)
                raise InvalidState(f"no payment {payment_id}")
            if current["status"] == "Refunded":
                self.txn.txn_abort(h)
                return current, False
            if current["status"] != "Charged":
                self.txn.txn_abort(h)
                raise InvalidState(f"cannot refund a {current['status']} payment")
            current["status"] = "Refunded"
            self.txn.txn_set(h, f"pay:{payment_id}", current)
            return current, True

        result, changed = retry_transaction(self.txn, body)
        if changed:
            self._event(result)
        return result

    def get_payment(self, payment_id: str) -> dict | None:
        return self.txn.get(f"pay:{payment_id}")

    def payments(self) -> dict[str, dict]:
        return {v["payment_id"]: v for _, v in self.txn.scan("pay:")}
