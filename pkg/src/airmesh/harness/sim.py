"""Virtual-time runner: one discrete-event loop drives clients, sagas and consumers.

Latency model (all virtual time):
  - a read request completes ``SERVICE_MS`` after arrival;
  - a booking performs one saga side effect every ``STEP_MS``;
  - an event or queue message reaches its consumer ``DELIVERY_MS`` after
    publication, plus any injected lognormal delay, in per-partition order;
  - a consumer restart drops uncommitted progress and redelivers from the
    committed offset once the consumer is back.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..broker import EventRecord
from ..clock import NS_PER_MS, NS_PER_S, Scheduler, VirtualClock
from ..services import AirSystem
from ..services.consumers import NOTIFY_QUEUES, VISIBILITY_TIMEOUT_S, Crashed
from .consistency import ConsistencyTracker
from .driver import PROBE_PERIOD_S, RequestFactory, Tally, build_report, lognormal_ms, system_config
from .metrics import MetricsReport, Recorder
from .workload import Op, WorkloadSpec, generate_ops

SERVICE_MS = 0.5
STEP_MS = 1.0
DELIVERY_MS = 0.5
COMMIT_INTERVAL_MS = 100.0


class VirtualRunner:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec.validate()
        self.clock = VirtualClock()
        self.sched = Scheduler(self.clock)
        self.system = AirSystem(system_config(spec), self.clock)
        self.factory = RequestFactory(self.system)
        self.rng = np.random.default_rng([spec.seed, 1])
        self.duration_ns = int(spec.duration_s * NS_PER_S)

        self.response_times = Recorder()
        self.propagation = Recorder()
        self.tally = Tally()
        self.tracker = ConsistencyTracker(self.system)
        self.first_applies = 0

        # consumer model state
        self.epoch = 0
        self.down_until = 0
        self.ready: dict[tuple[str, int], int] = {}  # per-partition next free delivery time
        self.uncommitted: dict[tuple[str, int], int] = {}
        self.restarts = 0

        self.system.projector.on_apply = self._applied
        self.system.broker.on_publish(self._published)
        self.system.broker.on_enqueue(self._enqueued)

    # -- consumers

    def _delay_ns(self) -> int:
        ms = DELIVERY_MS + lognormal_ms(self.rng, self.spec.faults.added_latency)
        return int(ms * NS_PER_MS)

    def _schedule_delivery(self, record: EventRecord, earliest: int) -> None:
        tp = (record.topic, record.partition)
        t = max(earliest + self._delay_ns(), self.ready.get(tp, 0), self.down_until)
        self.ready[tp] = t
        epoch = self.epoch
        self.sched.at(t, lambda: self._deliver(record, epoch))

    def _published(self, record: EventRecord) -> None:
        self._schedule_delivery(record, self.clock.now_ns())

    def _deliver(self, record: EventRecord, epoch: int) -> None:
        if epoch != self.epoch:
            return  # the consumer died before reaching this record; replayed on restart
        self.system.projector.apply(record)
        self.uncommitted[(record.topic, record.partition)] = record.offset

    def _applied(self, record: EventRecord, apply_ts: int) -> None:
        self.propagation.add((apply_ts - record.publish_ts) / NS_PER_MS)
        if apply_ts <= self.duration_ns:
            self.first_applies += 1

    def _commit_tick(self) -> None:
        group = self.system.projector.group
        for (topic, part), offset in sorted(self.uncommitted.items()):
            self.system.broker.commit(group, topic, part, offset)
        self.uncommitted.clear()
        if self.clock.now_ns() < self.duration_ns:
            self.sched.after(int(COMMIT_INTERVAL_MS * NS_PER_MS), self._commit_tick)

    def _enqueued(self, queue: str, message_id: str) -> None:
        t = max(self.clock.now_ns() + self._delay_ns(), self.down_until)
        self.sched.at(t, lambda: self._consume(queue))

    def _consume(self, queue: str) -> None:
        if self.clock.now_ns() < self.down_until:
            self.sched.at(self.down_until, lambda: self._consume(queue))
            return
        self.system.notifier.consume_once(queue)

    def _restart(self) -> None:
        """Kill both consumers mid-stream and bring them back after the downtime."""
        now = self.clock.now_ns()
        broker = self.system.broker
        group = self.system.projector.group
        self.restarts += 1
        self.epoch += 1
        self.uncommitted.clear()
        ends = {(t, p): n for t in broker.topics() for p, n in enumerate(broker.topic(t).end_offsets())}
        redeliver = now + int((VISIBILITY_TIMEOUT_S * 1000 + DELIVERY_MS) * NS_PER_MS)
        for q in NOTIFY_QUEUES:
            try:
                self.system.notifier.consume_once(q, crash_before_ack=True)
            except Crashed:
                # the record was written but never acked; the message comes back after the visibility timeout
                self.sched.at(redeliver, lambda q=q: self._consume(q))
        self.down_until = now + int(self.spec.faults.consumer_downtime_s * NS_PER_S)
        self.ready = {tp: min(t, self.down_until) for tp, t in self.ready.items()}

        def back():
            for (topic, part), end in sorted(ends.items()):
                start = broker.committed(group, topic).get(part, -1) + 1
                log = broker.topic(topic).partitions[part]
                for record in log[start:end]:
                    self._schedule_delivery(record, self.clock.now_ns())

        self.sched.at(self.down_until, back)
        period = self.spec.faults.consumer_restart_period_s
        if now + int(period * NS_PER_S) < self.duration_ns:
            self.sched.after(int(period * NS_PER_S), self._restart)

    # -- clients

    def _arrivals(self, ops: Iterator[Op]) -> None:
        op = next(ops, None)
        if op is None:
            return
        self.sched.at(op.t_ns, lambda: self._arrive(op, ops))

    def _arrive(self, op: Op, ops: Iterator[Op]) -> None:
        arrival = self.clock.now_ns()
        response = self.system.gateway.dispatch(self.factory.build(op, defer=True))
        if response.flow is None:
            self.tally.response(response)
            self.response_times.add(SERVICE_MS)
        else:
            flow = response.flow
            cid = response.correlation_id

            def step():
                result = flow.advance()
                if result is None:
                    self.sched.after(int(STEP_MS * NS_PER_MS), step)
                    return
                self.tally.response(self.system.gateway.booking_response(result, cid))
                self.response_times.add((self.clock.now_ns() - arrival) / NS_PER_MS)

            self.sched.after(int(STEP_MS * NS_PER_MS), step)
        self._arrivals(ops)

    def _probe(self) -> None:
        response = self.system.gateway.dispatch(self.factory.probe())
        self.tally.probes += 1
        self.tally.probe_ok += response.status == 200
        nxt = self.clock.now_ns() + int(PROBE_PERIOD_S * NS_PER_S)
        if nxt < self.duration_ns:
            self.sched.at(nxt, self._probe)

    def _sample(self) -> None:
        self.tracker.sample()
        nxt = self.clock.now_ns() + int(self.spec.sampling_period_ms * NS_PER_MS)
        if nxt <= self.duration_ns:
            self.sched.at(nxt, self._sample)

    # -- run

    def run(self) -> MetricsReport:
        spec = self.spec
        ops = generate_ops(spec, len(self.factory.users), len(self.factory.flight_ids), len(self.factory.search_keys))
        if self.duration_ns > 0:
            self._arrivals(iter(ops))
            self.sched.at(0, self._probe)
            self.sched.at(int(spec.sampling_period_ms * NS_PER_MS), self._sample)
            self.sched.at(int(COMMIT_INTERVAL_MS * NS_PER_MS), self._commit_tick)
            period = spec.faults.consumer_restart_period_s
            if period is not None and int(period * NS_PER_S) < self.duration_ns:
                self.sched.at(int(period * NS_PER_S), self._restart)
        # everything past the window is in-flight work finishing: no new arrivals are generated
        self.sched.run()
        self._commit_tick()
        # quiesce: let invisible queue messages time out, then drain
        self.clock.advance(VISIBILITY_TIMEOUT_S + 1)
        self.system.quiesce()
        report = build_report(
            spec,
            self.system,
            spec.duration_s,
            self.first_applies,
            self.response_times,
            self.propagation,
            self.tally,
            self.tracker.inflight_rate,
            len(self.tracker.samples),
            [],
        )
        report.faults["consumer_restarts"] = self.restarts
        return report


def run_virtual(spec: WorkloadSpec) -> MetricsReport:
    return VirtualRunner(spec).run()
