import itertools
import random
import threading
import time

import pytest

from airmesh.clock import VirtualClock
from airmesh.txn import (
    JournalEvent,
    ParticipantBinding,
    Phase,
    RejectedJournal,
    SagaExecution,
    SagaState,
    SagaStep,
    StepFailed,
    Vote,
    execute_saga,
    journal_from_ndjson,
    journal_to_ndjson,
    resume_saga,
    run_two_phase_commit,
)


class Participant:
    """Scripted 2PC participant that tracks its own effects and lock state."""

    def __init__(self, pid, behaviour, clock=None):
        self.pid = pid
        self.behaviour = behaviour
        self.clock = clock
        self.effects = []
        self.prepared = False

    def prepare(self, txn):
        if self.behaviour == "crash":
            raise ConnectionError("participant unreachable")
        if self.behaviour == "slow":
            self.clock.advance(1.0)
        if self.behaviour == "no":
            return Vote.NO
        self.prepared = True
        return Vote.YES

    def commit(self, txn):
        self.effects.append("commit")
        self.prepared = False

    def rollback(self, txn):
        self.effects.append("rollback")
        self.prepared = False

    def binding(self):
        return ParticipantBinding(self.pid, self.prepare, self.commit, self.rollback)


def test_2pc_unanimous():
    ps = [Participant(f"p{i}", "yes") for i in range(3)]
    rec = run_two_phase_commit("t1", [p.binding() for p in ps], clock=VirtualClock())
    assert rec.phase is Phase.COMMITTED
    assert [p.effects for p in ps] == [["commit"]] * 3


def test_2pc_one_no():
    ps = [Participant("p1", "yes"), Participant("p2", "no"), Participant("p3", "yes")]
    rec = run_two_phase_commit("t1", [p.binding() for p in ps], clock=VirtualClock())
    assert rec.phase is Phase.ABORTED
    assert [p.effects for p in ps] == [["rollback"], [], ["rollback"]]


def test_2pc_virtual_timeout():
    clock = VirtualClock()
    ps = [Participant("p1", "yes"), Participant("p2", "slow", clock)]
    rec = run_two_phase_commit("t1", [p.binding() for p in ps], vote_timeout=0.5, clock=clock)
    assert rec.votes["p2"] is Vote.TIMEOUT
    assert rec.phase is Phase.ABORTED


def test_2pc_requires_participant():
    with pytest.raises(ValueError):
        run_two_phase_commit("t", [])


@pytest.mark.parametrize("vector", list(itertools.product(["yes", "no", "crash"], repeat=3)))
def test_2pc_exhaustive(vector):
    ps = [Participant(f"p{i}", b) for i, b in enumerate(vector)]
    rec = run_two_phase_commit("t", [p.binding() for p in ps], clock=VirtualClock())
    # scripted oracle: commit iff all yes; otherwise rollback exactly the yes-voters
    if all(b == "yes" for b in vector):
        assert rec.phase is Phase.COMMITTED
        expected = [["commit"]] * 3
    else:
        assert rec.phase is Phase.ABORTED
        expected = [["rollback"] if b == "yes" else [] for b in vector]
    assert [p.effects for p in ps] == expected
    assert not any(p.prepared for p in ps)
    kinds = {e for p in ps for e in p.effects}
    assert len(kinds) <= 1


def test_2pc_real_clock_late_yes_is_released():
    class Slow(Participant):
        def prepare(self, txn):
            time.sleep(0.3)
            return super().prepare(txn)

    slow = Slow("slow", "yes")
    fast = Participant("fast", "yes")
    rec = run_two_phase_commit("t", [fast.binding(), slow.binding()], vote_timeout=0.05)
    assert rec.phase is Phase.ABORTED
    assert rec.votes["slow"] is Vote.TIMEOUT
    time.sleep(0.5)
    assert slow.effects == ["rollback"]
    assert not slow.prepared
    assert fast.effects == ["rollback"]


# -- sagas


class Recorder:
    def __init__(self, n, fail_at=None, comp_failures=0):
        self.log = []
        self.fail_at = fail_at
        self.comp_failures = comp_failures

    def steps(self, n):
        return [SagaStep(f"s{i}", self._action(i), self._comp(i)) for i in range(1, n + 1)]

    def _action(self, i):
        def act(ctx):
            if i == self.fail_at:
                raise StepFailed(f"step {i} failed")
            self.log.append(f"A{i}")
            return i

        return act

    def _comp(self, i):
        def comp(ctx):
            if self.comp_failures > 0:
                self.comp_failures -= 1
                raise RuntimeError("transient")
            self.log.append(f"C{i}")

        return comp


def events(journal):
    short = {JournalEvent.ACTION_OK: "ok", JournalEvent.ACTION_FAILED: "fail", JournalEvent.COMPENSATION_OK: "C"}
    out = []
    for e in journal:
        n = e.step_name[1:]
        out.append(f"C{n}ok" if e.event is JournalEvent.COMPENSATION_OK else f"A{n}{short[e.event]}")
    return out


def test_saga_all_ok():
    r = Recorder(3)
    ex = SagaExecution(r.steps(3), clock=VirtualClock())
    out = ex.run()
    assert out.state is SagaState.COMPLETED
    assert ex.cursor == 3
    assert events(ex.journal) == ["A1ok", "A2ok", "A3ok"]


def test_saga_step3_fails():
    r = Recorder(3, fail_at=3)
    ex = SagaExecution(r.steps(3), clock=VirtualClock())
    out = ex.run()
    assert out.state is SagaState.COMPENSATED
    assert out.failed_step == "s3"
    assert events(ex.journal) == ["A1ok", "A2ok", "A3fail", "C2ok", "C1ok"]
    assert r.log == ["A1", "A2", "C2", "C1"]


def test_saga_first_step_fails_no_compensation():
    r = Recorder(3, fail_at=1)
    out = execute_saga(r.steps(3), clock=VirtualClock())
    assert out.state is SagaState.COMPENSATED
    assert r.log == []


def check_journal(journal, n):
    """Independent checker for the saga journal invariants."""
    evs = [(e.step_name, e.event) for e in journal]
    names = [f"s{i}" for i in range(1, n + 1)]
    oks = []
    i = 0
    while i < len(evs) and evs[i][1] is JournalEvent.ACTION_OK:
        oks.append(evs[i][0])
        i += 1
    assert oks == names[: len(oks)]
    if len(oks) == n:
        assert i == len(evs)
        return "completed"
    assert evs[i] == (names[len(oks)], JournalEvent.ACTION_FAILED)
    comps = [name for name, ev in evs[i + 1 :]]
    assert all(ev is JournalEvent.COMPENSATION_OK for _, ev in evs[i + 1 :])
    assert comps == list(reversed(oks))
    return "compensated"


def test_thousand_seeded_random_failures():
    rng = random.Random(2024)
    for _ in range(1000):
        n = rng.randint(1, 6)
        fail_at = rng.randint(1, n)
        r = Recorder(n, fail_at=fail_at)
        ex = SagaExecution(r.steps(n), clock=VirtualClock())
        ex.run()
        assert check_journal(ex.journal, n) == "compensated"
        actions = [x for x in r.log if x.startswith("A")]
        assert len(actions) == len(set(actions)) == fail_at - 1
        assert [x for x in r.log if x.startswith("C")] == [f"C{i}" for i in range(fail_at - 1, 0, -1)]


def test_compensation_retry_then_success():
    clock = VirtualClock()
    r = Recorder(3, fail_at=3, comp_failures=2)
    out = execute_saga(r.steps(3), clock=clock)
    assert out.state is SagaState.COMPENSATED
    # backoff 10 ms * 2^attempt for attempts 0 and 1
    assert clock.now_ns() == 30_000_000


def test_compensation_stuck():
    r = Recorder(3, fail_at=3, comp_failures=100)
    out = execute_saga(r.steps(3), clock=VirtualClock())
    assert out.state is SagaState.STUCK_COMPENSATING


def test_resume_from_prefix():
    r = Recorder(2)
    full = SagaExecution(r.steps(2), clock=VirtualClock(), saga_id="x")
    full.advance()
    prefix = list(full.journal)
    r2 = Recorder(2)
    out = resume_saga(r2.steps(2), prefix, clock=VirtualClock())
    assert out.state is SagaState.COMPLETED
    assert r2.log == ["A2"]


def test_resume_after_failure_runs_c1_only():
    r = Recorder(2, fail_at=2)
    ex = SagaExecution(r.steps(2), clock=VirtualClock(), saga_id="x")
    ex.advance()
    ex.advance()
    assert events(ex.journal) == ["A1ok", "A2fail"]
    r2 = Recorder(2, fail_at=2)
    out = resume_saga(r2.steps(2), ex.journal, clock=VirtualClock())
    assert out.state is SagaState.COMPENSATED
    assert r2.log == ["C1"]


@pytest.mark.parametrize("fail_at", [None, 1, 2, 3, 4])
def test_crash_resume_every_prefix(fail_at):
    """Kill the orchestrator right after each journal append, then resume."""
    n = 4
    base = Recorder(n, fail_at=fail_at)
    ref = SagaExecution(base.steps(n), clock=VirtualClock(), saga_id="ref")
    ref_out = ref.run()
    for cut in range(len(ref.journal) + 1):
        r = Recorder(n, fail_at=fail_at)
        durable = []
        ex = SagaExecution(r.steps(n), clock=VirtualClock(), saga_id="ref", journal_sink=durable.append)
        while len(durable) < cut:
            ex.advance()
        del ex  # crash: only the durable journal survives
        out = resume_saga(r.steps(n), durable, clock=VirtualClock())
        assert out.state is ref_out.state
        assert r.log == base.log


def test_resume_rejects_corrupt():
    steps = Recorder(2).steps(2)
    good = SagaExecution(steps, clock=VirtualClock(), saga_id="x")
    good.run()
    j = [e.as_dict() for e in good.journal]
    with pytest.raises(RejectedJournal):
        resume_saga(steps, [j[1]], clock=VirtualClock())
    with pytest.raises(RejectedJournal):
        resume_saga(steps, [dict(j[0], step_name="s2")], clock=VirtualClock())
    with pytest.raises(RejectedJournal):
        resume_saga(steps, [dict(j[0], event="Bogus")], clock=VirtualClock())


def test_journal_ndjson_roundtrip():
    r = Recorder(3, fail_at=2)
    ex = SagaExecution(r.steps(3), clock=VirtualClock(), saga_id="s-1")
    ex.run()
    text = journal_to_ndjson(ex.journal)
    assert journal_from_ndjson(text) == ex.journal
    first = text.splitlines()[0]
    assert '"saga_id": "s-1"' in first and '"seq": 0' in first


def test_concurrent_sagas():
    results = []

    def run(i):
        r = Recorder(3, fail_at=(i % 4) or None)
        results.append(execute_saga(r.steps(3)).state)

    ts = [threading.Thread(target=run, args=(i,)) for i in range(40)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert results.count(SagaState.COMPLETED) == 10
    assert results.count(SagaState.COMPENSATED) == 30
