"""Report emission (json, csv, text) and threshold verification."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .metrics import MetricsReport

FORMATS = ("json", "csv", "text")


def canonical_report_json(report: MetricsReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def render(report: MetricsReport, fmt: str = "json") -> str:
    if fmt == "json":
        return canonical_report_json(report)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in report.scalars().items():
            writer.writerow([name, "" if value is None else repr(value)])
        return buf.getvalue()
    if fmt == "text":
        return summary(report)
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def emit_report(report: MetricsReport, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``report``; the format defaults to the file suffix, else json. Raises OSError if unwritable."""
    path = Path(path)
    fmt = fmt or {".csv": "csv", ".txt": "text"}.get(path.suffix, "json")
    path.write_text(render(report, fmt), encoding="utf-8")
    return path


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def summary(r: MetricsReport) -> str:
    rt, pl = r.response_time_ms, r.propagation_latency_ms
    hit = r.cache.get("hit_ratio")
    lines = [
        f"scenario {r.scenario} (seed {r.seed}, {r.clock} clock, {r.transport})",
        f"  duration        {r.duration_s:.1f} s, {r.requests} requests",
        f"  throughput      {r.throughput_eps:.1f} events/s ({r.events_consumed} consumed)",
        f"  response ms     p50 {rt.p50:.3f}  p95 {rt.p95:.3f}  p99 {rt.p99:.3f}  max {rt.max:.3f}",
        f"  propagation ms  p50 {pl.p50:.3f}  p95 {pl.p95:.3f}  p99 {pl.p99:.3f}  max {pl.max:.3f}",
        f"  cache hit ratio {'n/a' if hit is None else f'{hit:.4f}'}",
        f"  error rate      {r.error_rate:.5f} ({r.errors} errors)",
        f"  consistency     in-flight {r.consistency_rate_inflight:.5f}, final {r.consistency_rate_final:.5f}",
        f"  availability    {r.availability:.5f} over {r.probes} probes",
        f"  bookings        {', '.join(f'{k} {v}' for k, v in r.bookings.items()) or 'none'}",
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Verdict:
    metric: str
    value: float | None
    min: float | None
    max: float | None
    passed: bool
    reason: str = ""

    def line(self) -> str:
        bounds = " ".join(b for b in (f"min={self.min}" if self.min is not None else "", f"max={self.max}" if self.max is not None else "") if b)
        mark = "PASS" if self.passed else "FAIL"
        detail = f" ({self.reason})" if self.reason else ""
        return f"{mark} {self.metric} = {self.value} [{bounds}]{detail}"


def verify(report: MetricsReport | dict, thresholds: dict) -> list[Verdict]:
    """Compare each thresholded metric (dotted path) against its min/max bounds."""
    data = report.to_dict() if isinstance(report, MetricsReport) else report
    verdicts = []
    for metric, bounds in sorted(thresholds.get("metrics", {}).items()):
        lo, hi = bounds.get("min"), bounds.get("max")
        value = data
        for part in metric.split("."):
            if isinstance(value, dict) and part in value:
                value = value[part]
            else:
                value = None
                break
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            verdicts.append(Verdict(metric, None, lo, hi, False, "metric missing from report"))
            continue
        ok = (lo is None or value >= lo) and (hi is None or value <= hi)
        reason = "" if ok else ("below min" if lo is not None and value < lo else "above max")
        verdicts.append(Verdict(metric, value, lo, hi, ok, reason))
    return verdicts


def verify_files(report_path: str | Path, thresholds_path: str | Path) -> list[Verdict]:
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    thresholds = json.loads(Path(thresholds_path).read_text(encoding="utf-8"))
    return verify(report, thresholds)
