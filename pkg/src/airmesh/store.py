"""Embedded persistence engines.

``DocumentStore`` holds schemaless JSON documents grouped in collections.
``TxnStore`` is a key-value store with optimistic multi-key transactions:
writes are buffered in a handle and applied atomically at commit, provided
no key the handle read was changed by another commit since it was read.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable

_ABSENT = object()


class StoreError(Exception):
    pass


class Rejected(StoreError):
    """Document is not a JSON object."""


class Conflict(StoreError):
    pass


class HandleClosed(StoreError):
    pass


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _check_document(document: Any) -> dict:
    if not isinstance(document, dict):
        raise Rejected("document must be a JSON object")
    try:
        canonical_json(document)
    except (TypeError, ValueError) as exc:
        raise Rejected(str(exc)) from exc
    return copy.deepcopy(document)


class DocumentStore:
    def __init__(self, name: str = "docs"):
        self.name = name
        self._collections: dict[str, dict[str, dict]] = {}
        self._lock = threading.RLock()
        self.query_count = 0

    def doc_put(self, collection: str, doc_id: str, document: dict) -> None:
        doc = _check_document(document)
        with self._lock:
            self._collections.setdefault(collection, {})[doc_id] = doc

    def doc_get(self, collection: str, doc_id: str) -> dict | None:
        with self._lock:
            doc = self._collections.get(collection, {}).get(doc_id)
            return copy.deepcopy(doc) if doc is not None else None

    def doc_delete(self, collection: str, doc_id: str) -> bool:
        with self._lock:
            return self._collections.get(collection, {}).pop(doc_id, None) is not None

    def doc_query(self, collection: str, filter: dict | None = None) -> list[dict]:
        filter = filter or {}
        with self._lock:
            self.query_count += 1
            docs = self._collections.get(collection, {})
            return [
                copy.deepcopy(doc)
                for _, doc in sorted(docs.items())
                if all(k in doc and doc[k] == v for k, v in filter.items())
            ]

    def doc_ids(self, collection: str) -> list[str]:
        with self._lock:
            return sorted(self._collections.get(collection, {}))

    def collections(self) -> list[str]:
        with self._lock:
            return sorted(self._collections)

    def items(self) -> Iterable[tuple[str, str, dict]]:
        with self._lock:
            rows = [(c, d, copy.deepcopy(doc)) for c, docs in self._collections.items() for d, doc in docs.items()]
        return sorted(rows, key=lambda r: (r[0], r[1]))

    def snapshot_rows(self) -> list[dict]:
        return [{"collection": c, "id": d, "doc": doc} for c, d, doc in self.items()]


@dataclass
class TxnHandle:
    txn_id: int
    read_set: dict[str, int] = field(default_factory=dict)  # key -> version seen
    write_set: dict[str, Any] = field(default_factory=dict)
    closed: bool = False


@dataclass(frozen=True)
class CommitRecord:
    seq: int
    txn_id: int
    writes: tuple[tuple[str, Any], ...]


class TxnStore:
    def __init__(self, name: str = "txn"):
        self.name = name
        self._data: dict[str, Any] = {}
        self._versions: dict[str, int] = {}
        self._journal: list[CommitRecord] = []
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        self._commit_hooks: list = []
        self.conflicts = 0

    def on_commit(self, hook) -> None:
        """Call ``hook(keys)`` with the written keys after every successful commit."""
        self._commit_hooks.append(hook)

    # -- transactions

    def txn_begin(self) -> TxnHandle:
        return TxnHandle(next(self._ids))

    def _live(self, h: TxnHandle) -> None:
        if h.closed:
            raise HandleClosed(f"transaction {h.txn_id} already finished")

    def txn_get(self, h: TxnHandle, key: str, default: Any = None) -> Any:
        self._live(h)
        if key in h.write_set:
            value = h.write_set[key]
            return default if value is _ABSENT else copy.deepcopy(value)
        with self._lock:
            version = self._versions.get(key, 0)
            value = self._data.get(key, _ABSENT)
        h.read_set.setdefault(key, version)
        return default if value is _ABSENT else copy.deepcopy(value)

    def txn_set(self, h: TxnHandle, key: str, value: Any) -> None:
        self._live(h)
        canonical_json(value)
        h.write_set[key] = copy.deepcopy(value)

    def txn_delete(self, h: TxnHandle, key: str) -> None:
        self._live(h)
        h.write_set[key] = _ABSENT

    def txn_commit(self, h: TxnHandle) -> CommitRecord:
        self._live(h)
        h.closed = True
        with self._lock:
            for key, seen in h.read_set.items():
                if self._versions.get(key, 0) != seen:
                    self.conflicts += 1
                    raise Conflict(key)
            for key, value in h.write_set.items():
                self._versions[key] = self._versions.get(key, 0) + 1
                if value is _ABSENT:
                    self._data.pop(key, None)
                else:
                    self._data[key] = value
            record = CommitRecord(
                len(self._journal),
                h.txn_id,
                tuple((k, None if v is _ABSENT else v) for k, v in h.write_set.items()),
            )
            self._journal.append(record)
        if self._commit_hooks:
            keys = tuple(h.write_set)
            for hook in self._commit_hooks:
                hook(keys)
        return record

    def txn_abort(self, h: TxnHandle) -> None:
        self._live(h)
        h.closed = True
        h.write_set.clear()

    # -- committed-state reads

    def get(self, key: str, default: Any = None) -> Any:
        with self._lock:
            value = self._data.get(key, _ABSENT)
        return default if value is _ABSENT else copy.deepcopy(value)

    def scan(self, prefix: str = "", copy_values: bool = True) -> list[tuple[str, Any]]:
        """Committed rows under ``prefix`` in key order.

        ``copy_values=False`` hands out the stored objects themselves; callers
        must treat them as read-only.
        """
        with self._lock:
            rows = [(k, v) for k, v in self._data.items() if k.startswith(prefix)]
        rows.sort(key=lambda r: r[0])
        if not copy_values:
            return rows
        return [(k, copy.deepcopy(v)) for k, v in rows]

    def put(self, key: str, value: Any) -> None:
        """Single-key blind write as its own transaction."""
        h = self.txn_begin()
        self.txn_set(h, key, value)
        self.txn_commit(h)

    def journal(self) -> list[CommitRecord]:
        with self._lock:
            return list(self._journal)

    def snapshot_rows(self) -> list[dict]:
        return [{"key": k, "value": v} for k, v in self.scan(copy_values=False)]  # serialised, never mutated


def retry_transaction(store: TxnStore, body, retries: int = 10):
    """Run ``body(handle)`` and commit, retrying on Conflict up to ``retries`` times.

    ``body`` may return a value; it is passed through once the commit succeeds.
    """
    for attempt in range(retries + 1):
        h = store.txn_begin()
        try:
            result = body(h)
        except BaseException:
            if not h.closed:
                store.txn_abort(h)
            raise
        if h.closed:
            return result
        try:
            store.txn_commit(h)
            return result
        except Conflict:
            if attempt == retries:
                raise
    raise AssertionError("unreachable")


def snapshot_digest(store: DocumentStore | TxnStore) -> str:
    """Order-independent SHA-256 over the store's canonical row form."""
    rows = sorted(canonical_json(r) for r in store.snapshot_rows())
    return hashlib.sha256(canonical_json(rows).encode()).hexdigest()


EMPTY_DIGEST = hashlib.sha256(b"[]").hexdigest()


def write_snapshot(store: DocumentStore | TxnStore, path) -> int:
    rows = store.snapshot_rows()
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(canonical_json(row) + "\n")
    return len(rows)
