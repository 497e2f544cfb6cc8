"""Real-time runner: Poisson client threads against a live in-process or HTTP gateway."""

from __future__ import annotations

import logging
import os
import queue
import resource
import threading
import time

from ..clock import NS_PER_MS, NS_PER_S, RealClock
from ..gateway import GatewayServer, HttpClient
from ..services import AirSystem
from ..services.consumers import EVENT_TOPICS, NOTIFY_QUEUES, VISIBILITY_TIMEOUT_S, Crashed, EventProjector
from .consistency import ConsistencyTracker
from .driver import PROBE_PERIOD_S, PROBE_TIMEOUT_S, RequestFactory, Tally, build_report, system_config
from .metrics import MetricsReport, Recorder
from .workload import Op, Transport, WorkloadSpec, generate_ops

log = logging.getLogger(__name__)

POLL_TIMEOUT_S = 0.05
IDLE_SLEEP_S = 0.001
DRAIN_TIMEOUT_S = 60.0


def _rss_mb() -> float:
    try:
        with open("/proc/self/statm") as fh:
            pages = int(fh.read().split()[1])
        return pages * os.sysconf("SC_PAGE_SIZE") / 2**20
    except (OSError, ValueError, IndexError):
        return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024


class LiveRunner:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec.validate()
        self.clock = RealClock()
        self.system = AirSystem(system_config(spec), self.clock)
        self.factory = RequestFactory(self.system)
        self.response_times = Recorder()
        self.propagation = Recorder()
        self.tracker = ConsistencyTracker(self.system)
        self.tallies: list[Tally] = []
        self.resource_samples: list[dict] = []
        self.first_applies = 0
        self._apply_lock = threading.Lock()
        self.stop_clients = threading.Event()
        self.stop_consumers = threading.Event()
        self.paused_until = 0.0  # perf_counter time; consumers idle until then
        self.restarts = 0
        self.t0 = 0.0
        self.end_ns = 0
        self.server: GatewayServer | None = None
        self.transport = self.system.gateway
        if spec.transport is Transport.HTTP:
            self.server = GatewayServer(self.system.gateway).start()
            self.transport = HttpClient(*self.server.address)
        self.system.projector.on_apply = self._applied

    def _applied(self, record, apply_ts: int) -> None:
        self.propagation.add((apply_ts - record.publish_ts) / NS_PER_MS)
        if apply_ts <= self.end_ns:
            with self._apply_lock:
                self.first_applies += 1

    # -- background workers

    def _paused(self) -> bool:
        return time.perf_counter() < self.paused_until

    def _project(self, topic: str) -> None:
        while not self.stop_consumers.is_set():
            if self._paused():
                time.sleep(IDLE_SLEEP_S)
                continue
            self.system.projector.poll_once(topic, timeout=POLL_TIMEOUT_S)

    def _notify(self) -> None:
        notifier = self.system.notifier
        while not self.stop_consumers.is_set():
            if self._paused():
                time.sleep(IDLE_SLEEP_S)
                continue
            if not any([notifier.consume_once(q) for q in NOTIFY_QUEUES]):
                time.sleep(IDLE_SLEEP_S)

    def _restarter(self, period: float) -> None:
        while not self.stop_clients.wait(period):
            self.restarts += 1
            for q in NOTIFY_QUEUES:
                try:
                    self.system.notifier.consume_once(q, crash_before_ack=True)
                except Crashed:
                    pass
            self.paused_until = time.perf_counter() + self.spec.faults.consumer_downtime_s
            # a fresh projector resumes from the committed offsets
            fresh = EventProjector(self.system.broker, self.system.event_docs, self.clock, on_apply=self._applied)
            self.system.projector = fresh

    def _sampler(self) -> None:
        period = self.spec.sampling_period_ms / 1000
        while not self.stop_clients.wait(period):
            self.tracker.sample()

    def _prober(self, tally: Tally) -> None:
        while not self.stop_clients.is_set():
            t = time.perf_counter()
            try:
                response = self.transport.dispatch(self.factory.probe())
                ok = response.status == 200 and time.perf_counter() - t <= PROBE_TIMEOUT_S
            except Exception:  # noqa: BLE001 - a failed probe is data
                ok = False
            tally.probes += 1
            tally.probe_ok += ok
            self.stop_clients.wait(max(0.0, PROBE_PERIOD_S - (time.perf_counter() - t)))

    def _resources(self) -> None:
        last_wall, last_cpu = time.perf_counter(), time.process_time()
        while not self.stop_clients.wait(1.0):
            wall, cpu = time.perf_counter(), time.process_time()
            self.resource_samples.append(
                {
                    "t_s": round(wall - self.t0, 3),
                    "cpu_percent": round(100 * (cpu - last_cpu) / (wall - last_wall), 1),
                    "rss_mb": round(_rss_mb(), 1),
                }
            )
            last_wall, last_cpu = wall, cpu

    def _worker(self, work: queue.Queue, tally: Tally) -> None:
        while True:
            item = work.get()
            if item is None:
                return
            op, due = item
            try:
                response = self.transport.dispatch(self.factory.build(op))
                tally.response(response)
            except Exception as exc:  # noqa: BLE001 - transport failure counts as a 5xx
                log.warning("request failed: %r", exc)
                tally.statuses[599] = tally.statuses.get(599, 0) + 1
                tally.errors += 1
            self.response_times.add((time.perf_counter() - due) * 1000)

    # -- run

    def run(self) -> MetricsReport:
        spec = self.spec
        ops: list[Op] = generate_ops(spec, len(self.factory.users), len(self.factory.flight_ids), len(self.factory.search_keys))
        work: queue.Queue = queue.Queue()
        threads = []

        def start(target, *args, consumer=False):
            th = threading.Thread(target=target, args=args, daemon=True)
            th.start()
            threads.append((th, consumer))

        for t in EVENT_TOPICS:
            start(self._project, t, consumer=True)
        start(self._notify, consumer=True)

        self.t0 = time.perf_counter()
        self.end_ns = self.clock.now_ns() + int(spec.duration_s * NS_PER_S)
        probe_tally = Tally()
        self.tallies.append(probe_tally)
        start(self._prober, probe_tally)
        start(self._sampler)
        start(self._resources)
        if spec.faults.consumer_restart_period_s:
            start(self._restarter, spec.faults.consumer_restart_period_s)
        workers = []
        for _ in range(spec.workers):
            tally = Tally()
            self.tallies.append(tally)
            th = threading.Thread(target=self._worker, args=(work, tally), daemon=True)
            th.start()
            workers.append(th)

        for op in ops:
            due = self.t0 + op.t_ns / NS_PER_S
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            work.put((op, due))
        remaining = self.t0 + spec.duration_s - time.perf_counter()
        if remaining > 0:
            time.sleep(remaining)
        wall = max(time.perf_counter() - self.t0, spec.duration_s)
        self.stop_clients.set()
        for _ in workers:
            work.put(None)
        for th in workers:
            th.join()
        for th, consumer in threads:
            if not consumer:
                th.join()

        # quiesce: consumers keep running until topics and queues are drained
        self.paused_until = 0.0
        deadline = time.perf_counter() + DRAIN_TIMEOUT_S + VISIBILITY_TIMEOUT_S
        while time.perf_counter() < deadline:
            if self.system.projector.lag() == 0 and self.system.notifier.pending() == 0:
                break
            time.sleep(0.01)
        self.stop_consumers.set()
        for th, consumer in threads:
            if consumer:
                th.join()
        self.system.quiesce()
        if self.server is not None:
            self.transport.close()
            self.server.stop()

        total = Tally()
        for t in self.tallies:
            total.merge(t)
        # throughput is over the scheduled window, as measured on the wall clock
        report = build_report(
            spec,
            self.system,
            wall,
            self.first_applies,
            self.response_times,
            self.propagation,
            total,
            self.tracker.inflight_rate,
            len(self.tracker.samples),
            self.resource_samples,
        )
        report.faults["consumer_restarts"] = self.restarts
        return report


def run_live(spec: WorkloadSpec) -> MetricsReport:
    return LiveRunner(spec).run()
