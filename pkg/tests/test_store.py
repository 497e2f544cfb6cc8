import itertools
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airmesh.store import (
    EMPTY_DIGEST,
    Conflict,
    DocumentStore,
    HandleClosed,
    Rejected,
    TxnStore,
    retry_transaction,
    snapshot_digest,
    write_snapshot,
)


def test_doc_put_get():
    s = DocumentStore()
    s.doc_put("flights", "F1", {"origin": "DAC", "seats": 3})
    assert s.doc_get("flights", "F1") == {"origin": "DAC", "seats": 3}
    assert s.doc_get("flights", "nope") is None


def test_doc_put_replaces_whole_document():
    s = DocumentStore()
    s.doc_put("c", "1", {"a": 1, "b": 2})
    s.doc_put("c", "1", {"a": 5})
    assert s.doc_get("c", "1") == {"a": 5}


def test_doc_malformed():
    s = DocumentStore()
    with pytest.raises(Rejected):
        s.doc_put("c", "1", ["not", "a", "dict"])
    with pytest.raises(Rejected):
        s.doc_put("c", "1", {"x": object()})


def test_query_empty():
    assert DocumentStore().doc_query("flights", {"origin": "DAC"}) == []


def test_query_matches_linear_scan():
    rng = random.Random(3)
    airports = ["DAC", "DXB", "LHR", "JFK", "SIN"]
    s = DocumentStore()
    docs = {}
    for i in range(200):
        o, d = rng.sample(airports, 2)
        doc = {"flight_id": f"F{i:03d}", "origin": o, "destination": d, "day": rng.randint(0, 6)}
        docs[doc["flight_id"]] = doc
        s.doc_put("flights", doc["flight_id"], doc)
    for flt in ({"origin": "DAC"}, {"origin": "DAC", "day": 3}, {"destination": "SIN", "origin": "JFK"}, {}):
        oracle = [docs[k] for k in sorted(docs) if all(docs[k].get(f) == v for f, v in flt.items())]
        assert s.doc_query("flights", flt) == oracle


def test_txn_commit_visible():
    s = TxnStore()
    h = s.txn_begin()
    s.txn_set(h, "k", 1)
    s.txn_commit(h)
    assert s.get("k") == 1


def test_txn_abort_discards():
    s = TxnStore()
    h = s.txn_begin()
    s.txn_set(h, "k", 1)
    s.txn_abort(h)
    assert s.get("k") is None
    with pytest.raises(HandleClosed):
        s.txn_set(h, "k", 2)


def test_read_your_writes_and_isolation():
    s = TxnStore()
    h1, h2 = s.txn_begin(), s.txn_begin()
    s.txn_set(h1, "k", "mine")
    assert s.txn_get(h1, "k") == "mine"
    assert s.txn_get(h2, "k") is None
    s.txn_commit(h1)


def test_conflict_detected():
    s = TxnStore()
    s.put("k", 0)
    h1, h2 = s.txn_begin(), s.txn_begin()
    s.txn_set(h1, "k", s.txn_get(h1, "k") + 1)
    s.txn_set(h2, "k", s.txn_get(h2, "k") + 1)
    s.txn_commit(h1)
    with pytest.raises(Conflict):
        s.txn_commit(h2)
    assert s.get("k") == 1


def test_two_concurrent_increments_with_retry():
    s = TxnStore()
    s.put("k", 0)
    barrier = threading.Barrier(2)

    def inc():
        first = [True]

        def body(h):
            v = s.txn_get(h, "k")
            if first[0]:
                first[0] = False
                barrier.wait()  # both read before either commits
            s.txn_set(h, "k", v + 1)

        retry_transaction(s, body)

    ts = [threading.Thread(target=inc) for _ in range(2)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert s.get("k") == 2
    assert s.conflicts == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.tuples(st.sampled_from("abc"), st.integers(-3, 3)), min_size=1, max_size=3), min_size=1, max_size=4), st.randoms())
def test_serializable_against_serial_oracle(programs, rnd):
    """Interleave N<=4 read-modify-write transactions; final state equals some serial order."""
    s = TxnStore()
    for k in "abc":
        s.put(k, 0)
    pending = list(range(len(programs)))
    handles = {}
    while pending:
        i = rnd.choice(pending)
        if i not in handles:
            handles[i] = s.txn_begin()
            for key, delta in programs[i]:
                s.txn_set(handles[i], key, s.txn_get(handles[i], key) + delta)
            continue
        try:
            s.txn_commit(handles.pop(i))
            pending.remove(i)
        except Conflict:
            pass  # retry from scratch next time it is picked
    final = {k: s.get(k) for k in "abc"}

    def serial(order):
        state = dict.fromkeys("abc", 0)
        for i in order:
            for key, delta in programs[i]:
                state[key] += delta
        return state

    assert any(serial(order) == final for order in itertools.permutations(range(len(programs))))


def test_atomic_multi_key():
    s = TxnStore()
    h = s.txn_begin()
    s.txn_set(h, "a", 1)
    s.txn_set(h, "b", 2)
    assert s.get("a") is None and s.get("b") is None
    s.txn_commit(h)
    assert (s.get("a"), s.get("b")) == (1, 2)


def test_digest_empty():
    assert snapshot_digest(TxnStore()) == EMPTY_DIGEST
    assert snapshot_digest(DocumentStore()) == EMPTY_DIGEST
    assert EMPTY_DIGEST == "4f53cda18c2baa0c0354bb5f9a3ecbe5ed12ab4d8e11ba873c2f11161202b945"


def test_digest_order_independent():
    rng = random.Random(11)
    items = [(f"k{i}", rng.randint(0, 100)) for i in range(30)]
    digests = set()
    for _ in range(10):
        rng.shuffle(items)
        s = TxnStore()
        for k, v in items:
            s.put(k, v)
        digests.add(snapshot_digest(s))
    assert len(digests) == 1


def test_digest_changes_on_write():
    s = TxnStore()
    s.put("a", 1)
    d = snapshot_digest(s)
    s.put("a", 2)
    assert snapshot_digest(s) != d


def test_delete_and_snapshot_file(tmp_path):
    s = TxnStore()
    s.put("a", {"x": 1})
    s.put("b", 2)
    h = s.txn_begin()
    s.txn_delete(h, "b")
    s.txn_commit(h)
    assert s.get("b") is None
    n = write_snapshot(s, tmp_path / "snap.jsonl")
    assert n == 1
    assert (tmp_path / "snap.jsonl").read_text() == '{"key":"a","value":{"x":1}}\n'
