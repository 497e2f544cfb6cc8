"""Distributed transaction coordination: two-phase commit and journaled sagas.

A saga is advanced one side effect at a time (``SagaExecution.advance``) so a
discrete-event driver can interleave many sagas in virtual time;
``execute_saga`` simply runs one to completion. Every completed action or
compensation is appended to the journal before the next side effect starts,
which is what ``resume_saga`` relies on after a crash.
"""

from __future__ import annotations

import concurrent.futures as cf
import enum
import itertools
import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .clock import NS_PER_S, Clock, RealClock

log = logging.getLogger(__name__)

COMPENSATION_ATTEMPTS = 5
COMPENSATION_BACKOFF_S = 0.010


class StepFailed(Exception):
    """Raised by a saga action to report a business failure."""


class RejectedJournal(Exception):
    pass


# -- two-phase commit ------------------------------------------------------


class Vote(enum.Enum):
    YES = "yes"
    NO = "no"
    TIMEOUT = "timeout"


class Phase(enum.Enum):
    INIT = "init"
    PREPARING = "preparing"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass
class ParticipantBinding:
    participant_id: str
    prepare: Callable[[str], Vote | bool]
    commit: Callable[[str], Any]
    rollback: Callable[[str], Any]


@dataclass
class TwoPCRecord:
    txn_id: str
    participants: list[str]
    phase: Phase = Phase.INIT
    votes: dict[str, Vote] = field(default_factory=dict)
    committed: list[str] = field(default_factory=list)
    rolled_back: list[str] = field(default_factory=list)

    @property
    def outcome(self) -> Phase:
        return self.phase


def _as_vote(result) -> Vote:
    if isinstance(result, Vote):
        return result
    return Vote.YES if result is True else Vote.NO


def _retry(fn: Callable[[], Any], attempts: int = COMPENSATION_ATTEMPTS) -> bool:
    for i in range(attempts):
        try:
            fn()
            return True
        except Exception:  # noqa: BLE001 - participant failures are data here
            log.warning("2pc phase-two call failed (attempt %d)", i + 1, exc_info=True)
    return False


def run_two_phase_commit(
    txn_id: str,
    participants: Sequence[ParticipantBinding],
    vote_timeout: float = 0.5,
    clock: Clock | None = None,
) -> TwoPCRecord:
    """Prepare every participant, then commit all or roll back the Yes-voters.

    With a virtual clock the prepares run inline and a vote counts as
    Timeout when the participant raises or moves the clock past
    ``vote_timeout``. With a real clock prepares run in parallel threads and
    whatever has not answered by the deadline is a Timeout; a Yes that
    arrives after an abort decision is rolled back on arrival.
    """
    if not participants:
        raise ValueError("two-phase commit needs at least one participant")
    clock = clock or RealClock()
    record = TwoPCRecord(txn_id, [p.participant_id for p in participants])
    record.phase = Phase.PREPARING

    if clock.virtual:
        for p in participants:
            start = clock.now_ns()
            try:
                vote = _as_vote(p.prepare(txn_id))
            except Exception:  # noqa: BLE001
                vote = Vote.TIMEOUT
            if clock.now_ns() - start > vote_timeout * NS_PER_S:
                vote = Vote.TIMEOUT
            record.votes[p.participant_id] = vote
        late: dict[str, cf.Future] = {}
    else:
        pool = cf.ThreadPoolExecutor(max_workers=len(participants), thread_name_prefix=f"2pc-{txn_id}")
        futures = {p.participant_id: pool.submit(p.prepare, txn_id) for p in participants}
        done, _ = cf.wait(futures.values(), timeout=vote_timeout)
        late = {}
        for pid, fut in futures.items():
            if fut in done and fut.exception() is None:
                record.votes[pid] = _as_vote(fut.result())
            else:
                record.votes[pid] = Vote.TIMEOUT
                if fut not in done:
                    late[pid] = fut
        pool.shutdown(wait=False)

    by_id = {p.participant_id: p for p in participants}
    if all(v is Vote.YES for v in record.votes.values()):
        record.phase = Phase.COMMITTED
        for p in participants:
            if _retry(lambda p=p: p.commit(txn_id)):
                record.committed.append(p.participant_id)
        return record

    record.phase = Phase.ABORTED
    for pid, vote in record.votes.items():
        if vote is Vote.YES and _retry(lambda pid=pid: by_id[pid].rollback(txn_id)):
            record.rolled_back.append(pid)
    for pid, fut in late.items():
        # release resources a slow participant locked after the deadline
        def _late(f, pid=pid):
            if f.exception() is None and _as_vote(f.result()) is Vote.YES:
                _retry(lambda: by_id[pid].rollback(txn_id))

        fut.add_done_callback(_late)
    return record


# -- sagas -----------------------------------------------------------------


class SagaState(enum.Enum):
    RUNNING = "running"
    COMPENSATING = "compensating"
    COMPLETED = "completed"
    COMPENSATED = "compensated"
    STUCK_COMPENSATING = "stuck_compensating"


class JournalEvent(str, enum.Enum):
    ACTION_OK = "ActionOk"
    ACTION_FAILED = "ActionFailed"
    COMPENSATION_OK = "CompensationOk"
    COMPENSATION_STUCK = "CompensationStuck"


@dataclass
class SagaStep:
    name: str
    action: Callable[[Any], Any]
    compensation: Callable[[Any], Any]


@dataclass(frozen=True)
class JournalEntry:
    saga_id: str
    seq: int
    step_name: str
    event: JournalEvent
    ts: int

    def as_dict(self) -> dict:
        return {"saga_id": self.saga_id, "seq": self.seq, "step_name": self.step_name, "event": self.event.value, "ts": self.ts}

    @classmethod
    def from_dict(cls, d: dict) -> JournalEntry:
        try:
            return cls(str(d["saga_id"]), int(d["seq"]), str(d["step_name"]), JournalEvent(d["event"]), int(d["ts"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise RejectedJournal(f"bad journal entry {d!r}: {exc}") from None


@dataclass(frozen=True)
class SagaOutcome:
    state: SagaState
    failed_step: str | None = None
    reason: str | None = None
    outputs: dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.state is SagaState.COMPLETED


_saga_ids = itertools.count(1)


class SagaExecution:
    """One saga run. Call ``advance`` until it returns an outcome."""

    def __init__(
        self,
        steps: Sequence[SagaStep],
        context: Any = None,
        saga_id: str | None = None,
        clock: Clock | None = None,
        journal_sink: Callable[[JournalEntry], None] | None = None,
        sleep: Callable[[float], None] | None = None,
        max_attempts: int = COMPENSATION_ATTEMPTS,
        backoff: float = COMPENSATION_BACKOFF_S,
    ):
        if not steps:
            raise ValueError("a saga needs at least one step")
        self.steps = list(steps)
        self.context = context
        self.saga_id = saga_id or f"saga-{next(_saga_ids)}"
        self.clock = clock or RealClock()
        self.journal: list[JournalEntry] = []
        self.journal_sink = journal_sink
        self.sleep = sleep or self.clock.sleep
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.cursor = 0
        self.state = SagaState.RUNNING
        self.failed_step: str | None = None
        self.reason: str | None = None
        self.outputs: dict[str, Any] = {}
        self._comp_cursor = -1  # next step index to compensate

    @property
    def done(self) -> bool:
        return self.state in (SagaState.COMPLETED, SagaState.COMPENSATED, SagaState.STUCK_COMPENSATING)

    def outcome(self) -> SagaOutcome:
        return SagaOutcome(self.state, self.failed_step, self.reason, dict(self.outputs))

    def _append(self, step: SagaStep, event: JournalEvent) -> None:
        entry = JournalEntry(self.saga_id, len(self.journal), step.name, event, self.clock.now_ns())
        if self.journal_sink is not None:
            self.journal_sink(entry)
        self.journal.append(entry)

    def advance(self) -> SagaOutcome | None:
        """Perform the next single side effect; return the outcome once terminal."""
        if self.done:
            return self.outcome()
        if self.state is SagaState.RUNNING:
            step = self.steps[self.cursor]
            try:
                self.outputs[step.name] = step.action(self.context)
            except Exception as exc:  # noqa: BLE001 - any action error fails the step
                self.failed_step = step.name
                self.reason = str(exc) or type(exc).__name__
                self._append(step, JournalEvent.ACTION_FAILED)
                self.state = SagaState.COMPENSATING
                self._comp_cursor = self.cursor - 1
            else:
                self._append(step, JournalEvent.ACTION_OK)
                self.cursor += 1
                if self.cursor == len(self.steps):
                    self.state = SagaState.COMPLETED
            if self.state is SagaState.COMPENSATING and self._comp_cursor < 0:
                self.state = SagaState.COMPENSATED
            return self.outcome() if self.done else None

        step = self.steps[self._comp_cursor]
        for attempt in range(self.max_attempts):
            try:
                step.compensation(self.context)
                break
            except Exception:  # noqa: BLE001
                log.warning("compensation %s/%s failed (attempt %d)", self.saga_id, step.name, attempt + 1)
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff * 2**attempt)
        else:
            self._append(step, JournalEvent.COMPENSATION_STUCK)
            self.state = SagaState.STUCK_COMPENSATING
            return self.outcome()
        self._append(step, JournalEvent.COMPENSATION_OK)
        self._comp_cursor -= 1
        if self._comp_cursor < 0:
            self.state = SagaState.COMPENSATED
            return self.outcome()
        return None

    def run(self) -> SagaOutcome:
        while (outcome := self.advance()) is None:
            pass
        return outcome


def execute_saga(steps: Sequence[SagaStep], context: Any = None, **kwargs) -> SagaOutcome:
    return SagaExecution(steps, context, **kwargs).run()


def _replay(steps: Sequence[SagaStep], entries: Sequence[JournalEntry]) -> tuple[SagaState, int, int, str | None]:
    """Validate a journal against the saga definition.

    Returns (state, next action index, next compensation index, failed step).
    """
    names = [s.name for s in steps]
    saga_ids = {e.saga_id for e in entries}
    if len(saga_ids) > 1:
        raise RejectedJournal("journal mixes saga ids")
    for i, e in enumerate(entries):
        if e.seq != i:
            raise RejectedJournal(f"sequence gap at {i}")
    i = 0
    while i < len(entries) and entries[i].event is JournalEvent.ACTION_OK:
        if i >= len(names) or entries[i].step_name != names[i]:
            raise RejectedJournal(f"unexpected action entry {entries[i]}")
        i += 1
    ok = i
    if i == len(entries):
        if ok == len(names):
            return SagaState.COMPLETED, ok, -1, None
        return SagaState.RUNNING, ok, -1, None
    e = entries[i]
    if e.event is not JournalEvent.ACTION_FAILED or ok >= len(names) or e.step_name != names[ok]:
        raise RejectedJournal(f"unexpected entry {e}")
    failed = e.step_name
    i += 1
    comp = ok - 1
    while i < len(entries):
        e = entries[i]
        if comp < 0 or e.step_name != names[comp]:
            raise RejectedJournal(f"compensation out of order: {e}")
        if e.event is JournalEvent.COMPENSATION_STUCK:
            if i != len(entries) - 1:
                raise RejectedJournal("entries after a stuck compensation")
            # a stuck compensation is retried on resume
            return SagaState.COMPENSATING, ok, comp, failed
        if e.event is not JournalEvent.COMPENSATION_OK:
            raise RejectedJournal(f"unexpected entry {e}")
        comp -= 1
        i += 1
    return (SagaState.COMPENSATED if comp < 0 else SagaState.COMPENSATING), ok, comp, failed


def resume_saga(
    steps: Sequence[SagaStep],
    journal: Iterable[JournalEntry | dict],
    context: Any = None,
    **kwargs,
) -> SagaOutcome:
    """Continue a saga from its journal without repeating journaled effects."""
    return restore_saga(steps, journal, context, **kwargs).run()


def restore_saga(steps: Sequence[SagaStep], journal: Iterable[JournalEntry | dict], context: Any = None, **kwargs) -> SagaExecution:
    entries = [e if isinstance(e, JournalEntry) else JournalEntry.from_dict(e) for e in journal]
    state, ok, comp, failed = _replay(steps, entries)
    saga_id = entries[0].saga_id if entries else kwargs.pop("saga_id", None)
    kwargs.pop("saga_id", None)
    ex = SagaExecution(steps, context, saga_id=saga_id, **kwargs)
    ex.journal = list(entries)
    ex.cursor = ok
    ex.state = state
    ex.failed_step = failed
    ex._comp_cursor = comp
    return ex


def journal_to_ndjson(entries: Iterable[JournalEntry]) -> str:
    return "".join(json.dumps(e.as_dict(), sort_keys=True) + "\n" for e in entries)


def journal_from_ndjson(text: str) -> list[JournalEntry]:
    out = []
    for line in text.splitlines():
        if line.strip():
            try:
                out.append(JournalEntry.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise RejectedJournal(str(exc)) from None
    return out


class SagaCoordinator:
    """Thread-safe registry of saga executions, for concurrent submissions."""

    def __init__(self, clock: Clock | None = None, journal_sink: Callable[[JournalEntry], None] | None = None):
        self.clock = clock or RealClock()
        self.journal_sink = journal_sink
        self._lock = threading.Lock()
        self.executions: dict[str, SagaExecution] = {}

    def start(self, steps: Sequence[SagaStep], context: Any = None, saga_id: str | None = None, **kwargs) -> SagaExecution:
        ex = SagaExecution(steps, context, saga_id=saga_id, clock=self.clock, journal_sink=self.journal_sink, **kwargs)
        with self._lock:
            self.executions[ex.saga_id] = ex
        return ex

    def stuck(self) -> list[str]:
        with self._lock:
            return sorted(s for s, ex in self.executions.items() if ex.state is SagaState.STUCK_COMPENSATING)

