"""Embedded message broker.

Two delivery models live side by side:

* topics: append-only partitioned logs read through consumer-group offsets,
  so any number of groups can replay the same events independently;
* queues: at-least-once delivery with a visibility timeout; a received
  message is hidden until acked, and reappears with ``attempt + 1`` if the
  consumer goes quiet.
"""

from __future__ import annotations

import base64
import heapq
import itertools
import json
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .clock import NS_PER_S, Clock, RealClock

DEFAULT_PARTITIONS = 4

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class BrokerError(Exception):
    pass


class AlreadyExists(BrokerError):
    pass


class NotFound(BrokerError):
    pass


class OutOfRange(BrokerError):
    pass


class StaleTag(BrokerError):
    pass


def hash64(data: bytes) -> int:
    """64-bit FNV-1a."""
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & _MASK64
    return h


def _as_bytes(value: bytes | str) -> bytes:
    return value.encode() if isinstance(value, str) else bytes(value)


@dataclass(frozen=True)
class EventRecord:
    topic: str
    partition: int
    offset: int
    key: bytes
    payload: bytes
    publish_ts: int
    correlation_id: str | None = None

    def json(self) -> dict:
        return json.loads(self.payload)


@dataclass(frozen=True)
class QueueMessage:
    queue: str
    message_id: str
    delivery_tag: str
    payload: bytes
    attempt: int
    visible_at: int


@dataclass
class ConsumerGroupState:
    group: str
    topic: str
    committed: dict[int, int] = field(default_factory=dict)


class Topic:
    def __init__(self, name: str, partitions: int):
        self.name = name
        self.partitions: list[list[EventRecord]] = [[] for _ in range(partitions)]
        self.groups: dict[str, ConsumerGroupState] = {}
        self.cond = threading.Condition()

    @property
    def partition_count(self) -> int:
        return len(self.partitions)

    def end_offsets(self) -> list[int]:
        with self.cond:
            return [len(p) for p in self.partitions]


@dataclass
class _Message:
    message_id: str
    seq: int
    payload: bytes
    attempt: int = 0
    delivery_tag: str | None = None
    visible_at: int = 0


class _Queue:
    def __init__(self, name: str):
        self.name = name
        self.lock = threading.Lock()
        self.ready: list[tuple[int, str]] = []  # (enqueue seq, message_id)
        self.inflight: dict[str, _Message] = {}  # delivery_tag -> message
        self.expiry: list[tuple[int, str]] = []  # (visible_at, delivery_tag)
        self.messages: dict[str, _Message] = {}
        self.seq = itertools.count()
        self.acked = 0


class Broker:
    def __init__(self, clock: Clock | None = None, default_partitions: int = DEFAULT_PARTITIONS):
        self.clock = clock or RealClock()
        self.default_partitions = default_partitions
        self._topics: dict[str, Topic] = {}
        self._queues: dict[str, _Queue] = {}
        self._lock = threading.Lock()
        self._tags = itertools.count(1)
        self._publish_hooks: list[Callable[[EventRecord], None]] = []
        self._enqueue_hooks: list[Callable[[str, str], None]] = []

    # -- hooks let a discrete-event driver wake consumers without polling loops

    def on_publish(self, hook: Callable[[EventRecord], None]) -> None:
        self._publish_hooks.append(hook)

    def on_enqueue(self, hook: Callable[[str, str], None]) -> None:
        self._enqueue_hooks.append(hook)

    # -- topics

    def create_topic(self, name: str, partitions: int | None = None) -> Topic:
        partitions = self.default_partitions if partitions is None else partitions
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        with self._lock:
            if name in self._topics:
                raise AlreadyExists(name)
            topic = self._topics[name] = Topic(name, partitions)
            return topic

    def topic(self, name: str) -> Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise NotFound(name) from None

    def topics(self) -> list[str]:
        return sorted(self._topics)

    def partition_for(self, topic: str, key: bytes | str) -> int:
        return hash64(_as_bytes(key)) % self.topic(topic).partition_count

    def publish(
        self,
        topic: str,
        key: bytes | str,
        payload: bytes | str,
        correlation_id: str | None = None,
    ) -> tuple[int, int]:
        t = self.topic(topic)
        key_b = _as_bytes(key)
        part = hash64(key_b) % t.partition_count
        with t.cond:
            log = t.partitions[part]
            ts = self.clock.now_ns()
            if log and ts < log[-1].publish_ts:
                ts = log[-1].publish_ts
            record = EventRecord(topic, part, len(log), key_b, _as_bytes(payload), ts, correlation_id)
            log.append(record)
            t.cond.notify_all()
        for hook in self._publish_hooks:
            hook(record)
        return part, record.offset

    def _group(self, t: Topic, group: str) -> ConsumerGroupState:
        state = t.groups.get(group)
        if state is None:
            state = t.groups[group] = ConsumerGroupState(group, t.name)
        return state

    def _available(self, t: Topic, group: str, limit: int) -> list[EventRecord]:
        state = self._group(t, group)
        cursors = [state.committed.get(p, -1) + 1 for p in range(t.partition_count)]
        out: list[EventRecord] = []
        # round-robin across partitions, per-partition order preserved
        progress = True
        while len(out) < limit and progress:
            progress = False
            for p, log in enumerate(t.partitions):
                if len(out) >= limit:
                    break
                if cursors[p] < len(log):
                    out.append(log[cursors[p]])
                    cursors[p] += 1
                    progress = True
        return out

    def poll(self, topic: str, group: str, max: int = 100, timeout: float = 0.0) -> list[EventRecord]:
        t = self.topic(topic)
        with t.cond:
            records = self._available(t, group, max)
            if records or timeout <= 0 or self.clock.virtual:
                return records
            deadline = self.clock.now_ns() + int(timeout * NS_PER_S)
            while not records:
                remaining = (deadline - self.clock.now_ns()) / NS_PER_S
                if remaining <= 0:
                    break
                t.cond.wait(remaining)
                records = self._available(t, group, max)
            return records

    def commit(self, group: str, topic: str, partition: int, offset: int) -> None:
        t = self.topic(topic)
        with t.cond:
            if not 0 <= partition < t.partition_count:
                raise OutOfRange(f"partition {partition}")
            if offset < -1 or offset >= len(t.partitions[partition]):
                raise OutOfRange(f"offset {offset} beyond log end {len(t.partitions[partition])}")
            state = self._group(t, group)
            if offset > state.committed.get(partition, -1):
                state.committed[partition] = offset

    def committed(self, group: str, topic: str) -> dict[int, int]:
        t = self.topic(topic)
        with t.cond:
            return dict(self._group(t, group).committed)

    def lag(self, group: str, topic: str) -> int:
        t = self.topic(topic)
        with t.cond:
            state = self._group(t, group)
            return sum(len(log) - state.committed.get(p, -1) - 1 for p, log in enumerate(t.partitions))

    def records(self, topic: str) -> list[EventRecord]:
        t = self.topic(topic)
        with t.cond:
            return [r for log in t.partitions for r in log]

    def dump_ndjson(self, fh, topics: Iterable[str] | None = None) -> int:
        n = 0
        for name in topics or self.topics():
            for r in self.records(name):
                row = {
                    "topic": r.topic,
                    "partition": r.partition,
                    "offset": r.offset,
                    "key": r.key.decode("utf-8", "replace"),
                    "payload_b64": base64.b64encode(r.payload).decode(),
                    "publish_ts_ns": r.publish_ts,
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")
                n += 1
        return n

    # -- queues

    def _queue(self, name: str) -> _Queue:
        with self._lock:
            q = self._queues.get(name)
            if q is None:
                q = self._queues[name] = _Queue(name)
            return q

    def declare_queue(self, name: str) -> None:
        self._queue(name)

    def enqueue(self, queue: str, payload: bytes | str) -> str:
        q = self._queue(queue)
        with q.lock:
            seq = next(q.seq)
            msg = _Message(f"{queue}#{seq}", seq, _as_bytes(payload))
            q.messages[msg.message_id] = msg
            heapq.heappush(q.ready, (seq, msg.message_id))
        for hook in self._enqueue_hooks:
            hook(queue, msg.message_id)
        return msg.message_id

    def _expire(self, q: _Queue, now: int) -> None:
        while q.expiry and q.expiry[0][0] <= now:
            _, tag = heapq.heappop(q.expiry)
            msg = q.inflight.pop(tag, None)
            if msg is not None:
                msg.delivery_tag = None
                heapq.heappush(q.ready, (msg.seq, msg.message_id))

    def receive(self, queue: str, visibility_timeout: float = 30.0) -> QueueMessage | None:
        q = self._queue(queue)
        now = self.clock.now_ns()
        with q.lock:
            self._expire(q, now)
            if not q.ready:
                return None
            _, mid = heapq.heappop(q.ready)
            msg = q.messages[mid]
            msg.attempt += 1
            msg.delivery_tag = f"{queue}:{next(self._tags)}"
            msg.visible_at = now + int(visibility_timeout * NS_PER_S)
            q.inflight[msg.delivery_tag] = msg
            heapq.heappush(q.expiry, (msg.visible_at, msg.delivery_tag))
            return QueueMessage(queue, mid, msg.delivery_tag, msg.payload, msg.attempt, msg.visible_at)

    def _take_inflight(self, q: _Queue, delivery_tag: str) -> _Message:
        self._expire(q, self.clock.now_ns())
        msg = q.inflight.pop(delivery_tag, None)
        if msg is None:
            raise StaleTag(delivery_tag)
        msg.delivery_tag = None
        return msg

    def ack(self, queue: str, delivery_tag: str) -> None:
        q = self._queue(queue)
        with q.lock:
            msg = self._take_inflight(q, delivery_tag)
            del q.messages[msg.message_id]
            q.acked += 1

    def nack(self, queue: str, delivery_tag: str) -> None:
        q = self._queue(queue)
        with q.lock:
            msg = self._take_inflight(q, delivery_tag)
            heapq.heappush(q.ready, (msg.seq, msg.message_id))

    def queue_depth(self, queue: str) -> int:
        """Messages not yet acked, in flight or not."""
        q = self._queue(queue)
        with q.lock:
            return len(q.messages)

    def queues(self) -> list[str]:
        with self._lock:
            return sorted(self._queues)
