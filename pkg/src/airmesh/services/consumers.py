"""Long-lived consumers: the notification worker (queues) and the event projector (topics)."""

from __future__ import annotations

import json
import logging
import threading
from typing import Callable

from ..broker import Broker, EventRecord, QueueMessage, StaleTag
from ..clock import Clock
from ..store import DocumentStore, StoreError

log = logging.getLogger(__name__)

NOTIFY_QUEUES = ("notify.email", "notify.sms")
EVENT_TOPICS = ("bookings", "payments", "inventory")
VISIBILITY_TIMEOUT_S = 5.0


class Crashed(Exception):
    """Simulated process death between processing and ack."""


class NotificationService:
    def __init__(self, broker: Broker, docs: DocumentStore, clock: Clock):
        self.broker = broker
        self.docs = docs
        self.clock = clock
        self.store_failures = 0  # inject: next N writes fail
        self.processed = 0
        for q in NOTIFY_QUEUES:
            broker.declare_queue(q)

    def _record(self, message: QueueMessage) -> None:
        if self.store_failures > 0:
            self.store_failures -= 1
            raise StoreError("notification store unavailable")
        body = json.loads(message.payload)
        doc_id = f"{body['booking_id']}:{body['kind']}"
        if self.docs.doc_get("notifications", doc_id) is None:
            self.docs.doc_put(
                "notifications",
                doc_id,
                {
                    "notification_id": doc_id,
                    "kind": body["kind"],
                    "booking_id": body["booking_id"],
                    "user_id": body["user_id"],
                    "sent_ts": self.clock.now_ns(),
                },
            )

    def consume_once(self, queue: str = "notify.email", visibility_timeout: float = VISIBILITY_TIMEOUT_S, crash_before_ack: bool = False) -> bool:
        """Handle at most one message. Returns False when the queue had nothing visible."""
        message = self.broker.receive(queue, visibility_timeout)
        if message is None:
            return False
        try:
            self._record(message)
        except StoreError:
            self.broker.nack(queue, message.delivery_tag)
            return True
        if crash_before_ack:
            raise Crashed(message.delivery_tag)
        try:
            self.broker.ack(queue, message.delivery_tag)
        except StaleTag:
            # visibility expired mid-processing; the redelivery will be deduplicated
            log.info("late ack for %s", message.delivery_tag)
        self.processed += 1
        return True

    def drain(self, visibility_timeout: float = VISIBILITY_TIMEOUT_S) -> int:
        n = 0
        for q in NOTIFY_QUEUES:
            while self.consume_once(q, visibility_timeout):
                n += 1
        return n

    def notifications(self) -> list[dict]:
        return self.docs.doc_query("notifications")

    def records_for(self, booking_id: str) -> list[dict]:
        return self.docs.doc_query("notifications", {"booking_id": booking_id})

    def pending(self) -> int:
        return sum(self.broker.queue_depth(q) for q in NOTIFY_QUEUES)


class EventProjector:
    """Applies topic events to a per-booking event trail, once per record.

    Deduplication is by (topic, partition, offset) against the stored trail,
    so a restarted projector replaying uncommitted records is harmless.

    ``on_apply(record, apply_ts)`` is called the first time a record is
    applied, which is where propagation latency is sampled.
    """

    def __init__(self, broker: Broker, docs: DocumentStore, clock: Clock, group: str = "projector",
                 on_apply: Callable[[EventRecord, int], None] | None = None):
        self.broker = broker
        self.docs = docs
        self.clock = clock
        self.group = group
        self.on_apply = on_apply
        self.applied = 0
        self._lock = threading.Lock()

    def apply(self, record: EventRecord) -> bool:
        body = record.json()
        entry = {"topic": record.topic, "partition": record.partition, "offset": record.offset, "type": body["type"]}
        with self._lock:
            trail = self.docs.doc_get("trails", body["booking_id"]) or {"booking_id": body["booking_id"], "events": []}
            if any(e["topic"] == record.topic and e["partition"] == record.partition and e["offset"] == record.offset for e in trail["events"]):
                return False
            trail["events"].append(entry)
            self.docs.doc_put("trails", body["booking_id"], trail)
            self.applied += 1
        if self.on_apply is not None:
            self.on_apply(record, self.clock.now_ns())
        return True

    def poll_once(self, topic: str, max: int = 500, timeout: float = 0.0) -> int:
        n = 0
        for record in self.broker.poll(topic, self.group, max=max, timeout=timeout):
            self.apply(record)
            self.broker.commit(self.group, topic, record.partition, record.offset)
            n += 1
        return n

    def drain(self) -> int:
        n = 0
        for t in EVENT_TOPICS:
            while (k := self.poll_once(t)) > 0:
                n += k
        return n

    def lag(self) -> int:
        return sum(self.broker.lag(self.group, t) for t in EVENT_TOPICS)

    def trail(self, booking_id: str) -> list[dict]:
        doc = self.docs.doc_get("trails", booking_id)
        return doc["events"] if doc else []
