"""TTL cache-aside layer with LRU bounding and single-flight loading."""

from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Callable

from .clock import NS_PER_S, Clock, RealClock

DEFAULT_CAPACITY = 100_000


class TtlClass(enum.Enum):
    SHORT = 120
    LONG = 3600

    @property
    def seconds(self) -> int:
        return self.value


class _Miss:
    def __repr__(self) -> str:
        return "MISS"

    def __bool__(self) -> bool:
        return False


MISS: Any = _Miss()


@dataclass
class CacheEntry:
    key: str
    value: Any
    stored_at: int
    ttl: int  # ns

    def expired(self, now: int) -> bool:
        return now > self.stored_at + self.ttl


def _prefix(key: str) -> str:
    return key.split(":", 1)[0]


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    expirations: int = 0
    by_prefix: dict[str, list[int]] = field(default_factory=dict)  # prefix -> [hits, misses]

    @property
    def hit_ratio(self) -> float | None:
        total = self.hits + self.misses
        return None if total == 0 else self.hits / total

    def as_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "evictions": self.evictions,
            "expirations": self.expirations,
            "hit_ratio": self.hit_ratio,
            "by_prefix": {
                p: {"hits": h, "misses": m, "hit_ratio": h / (h + m) if h + m else None}
                for p, (h, m) in sorted(self.by_prefix.items())
            },
        }


class _Flight:
    __slots__ = ("done", "value", "error", "stale")

    def __init__(self):
        self.stale = False
        self.done = threading.Event()
        self.value: Any = None
        self.error: BaseException | None = None


class TtlCache:
    def __init__(self, clock: Clock | None = None, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.clock = clock or RealClock()
        self.capacity = capacity
        self._entries: OrderedDict[str, CacheEntry] = OrderedDict()
        self._lock = threading.Lock()
        self._inflight: dict[str, _Flight] = {}
        self._stats = CacheStats()

    def _count(self, key: str, hit: bool) -> None:
        slot = self._stats.by_prefix.setdefault(_prefix(key), [0, 0])
        if hit:
            self._stats.hits += 1
            slot[0] += 1
        else:
            self._stats.misses += 1
            slot[1] += 1

    def _lookup(self, key: str) -> Any:
        entry = self._entries.get(key)
        if entry is None:
            return MISS
        if entry.expired(self.clock.now_ns()):
            del self._entries[key]
            self._stats.expirations += 1
            return MISS
        self._entries.move_to_end(key)
        return entry.value

    def _store(self, key: str, value: Any, ttl_class: TtlClass) -> None:
        self._entries.pop(key, None)
        self._entries[key] = CacheEntry(key, value, self.clock.now_ns(), ttl_class.seconds * NS_PER_S)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)
            self._stats.evictions += 1

    def put(self, key: str, value: Any, ttl_class: TtlClass = TtlClass.SHORT) -> None:
        with self._lock:
            self._store(key, value, ttl_class)

    def get(self, key: str) -> Any:
        """Return the cached value, or ``MISS``."""
        with self._lock:
            value = self._lookup(key)
            self._count(key, value is not MISS)
            return value

    def get_or_load(self, key: str, loader: Callable[[], Any], ttl_class: TtlClass = TtlClass.SHORT) -> Any:
        with self._lock:
            value = self._lookup(key)
            self._count(key, value is not MISS)
            if value is not MISS:
                return value
            flight = self._inflight.get(key)
            leader = flight is None
            if leader:
                flight = self._inflight[key] = _Flight()
        if not leader:
            flight.done.wait()
            if flight.error is not None:
                raise flight.error
            return flight.value
        try:
            value = loader()
        except BaseException as exc:
            flight.error = exc
            with self._lock:
                del self._inflight[key]
            flight.done.set()
            raise
        with self._lock:
            # an invalidate during the load means the value may predate the write
            if not flight.stale:
                self._store(key, value, ttl_class)
            del self._inflight[key]
        flight.value = value
        flight.done.set()
        return value

    def invalidate(self, key: str) -> bool:
        with self._lock:
            flight = self._inflight.get(key)
            if flight is not None:
                flight.stale = True
            return self._entries.pop(key, None) is not None

    def stats(self) -> CacheStats:
        with self._lock:
            s = self._stats
            return CacheStats(
                s.hits, s.misses, s.evictions, s.expirations, {k: list(v) for k, v in s.by_prefix.items()}
            )

    def entry(self, key: str) -> CacheEntry | None:
        with self._lock:
            return self._entries.get(key)

    def __len__(self) -> int:
        return len(self._entries)
