"""Per-operation records, windowed aggregates, and CSV output."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

OK, REFUSED, TIMEOUT, ERROR = "ok", "refused", "timeout", "error"

CSV_COLUMNS = ["op_index", "op_type", "client", "submit_ns", "endorsed_ns", "ordered_ns",
               "committed_ns", "valid", "status", "seq",
               "peer_received_ns", "peer_verified_ns", "peer_committed_ns"]


@dataclass
class OpRecord:
    op_index: int
    op_type: str
    client: int
    submit_ns: int
    endorsed_ns: int = 0
    ordered_ns: int = 0
    committed_ns: int = 0
    valid: bool = False
    status: str = OK
    seq: int = 0
    peer_received_ns: int = 0
    peer_verified_ns: int = 0
    peer_committed_ns: int = 0

    @property
    def completed(self) -> bool:
        return self.status == OK


def middle_window(records: list[OpRecord], trim: float = 0.1) -> list[OpRecord]:
    """Drop the first and last ``trim`` share of operations by submission time."""
    ordered = sorted(records, key=lambda r: (r.submit_ns, r.op_index))
    n = len(ordered)
    cut = int(n * trim)
    return ordered[cut:n - cut]


def _stats(xs) -> dict[str, float]:
    if len(xs) == 0:
        return {"mean": float("nan"), "p50": float("nan"), "p99": float("nan")}
    a = np.asarray(xs, dtype=float)
    return {"mean": float(a.mean()), "p50": float(np.median(a)), "p99": float(np.percentile(a, 99))}


def aggregate(records: list[OpRecord]) -> dict:
    """Aggregates over the middle 80% of ``records``; latencies in milliseconds."""
    win = middle_window(records)
    done = [r for r in win if r.completed]
    valid = sum(1 for r in done if r.valid)
    invalid = len(done) - valid
    if done:
        span_s = (max(r.committed_ns for r in done) - min(r.submit_ns for r in done)) / 1e9
    else:
        span_s = 0.0
    ms = 1e-6
    e2e = [(r.committed_ns - r.submit_ns) * ms for r in done]
    return {
        "ops": len(records),
        "window_ops": len(win),
        "completed": len(done),
        "valid": valid,
        "invalid": invalid,
        "refused": sum(1 for r in win if r.status == REFUSED),
        "timeouts": sum(1 for r in win if r.status == TIMEOUT),
        "errors": sum(1 for r in win if r.status == ERROR),
        "duration_s": span_s,
        "throughput": len(done) / span_s if span_s > 0 else 0.0,
        "goodput": valid / span_s if span_s > 0 else 0.0,
        "failing_pct": 100.0 * invalid / len(done) if done else 0.0,
        "latency_ms": _stats(e2e),
        "endorse_ms": _stats([(r.endorsed_ns - r.submit_ns) * ms for r in done]),
        "order_ms": _stats([(r.ordered_ns - r.endorsed_ns) * ms for r in done]),
        "validate_ms": _stats([(r.committed_ns - r.ordered_ns) * ms for r in done]),
        "peer_commit_ms": _stats([(r.peer_committed_ns - r.peer_verified_ns) * ms for r in done]),
    }


@dataclass
class RunReport:
    records: list[OpRecord]
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.records.sort(key=lambda r: r.op_index)
        self._agg: dict | None = None

    @property
    def aggregates(self) -> dict:
        if self._agg is None:
            self._agg = aggregate(self.records)
        return self._agg

    def __getattr__(self, name: str):
        # convenient access: report.throughput, report.goodput, ...
        if name.startswith("_"):
            raise AttributeError(name)
        agg = self.aggregates
        if name in agg:
            return agg[name]
        raise AttributeError(name)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                row = asdict(r)
                row["valid"] = int(r.valid)
                w.writerow([row[c] for c in CSV_COLUMNS])

    def summary(self) -> str:
        a = self.aggregates
        lines = [f"run {self.label}".rstrip()]
        for k, v in self.meta.items():
            lines.append(f"  {k:<20} {v}")
        lines += [
            f"  ops                  {a['ops']} (window {a['window_ops']}, completed {a['completed']})",
            f"  valid / invalid      {a['valid']} / {a['invalid']}  (failing {a['failing_pct']:.2f}%)",
            f"  refused / timeouts   {a['refused']} / {a['timeouts']}",
            f"  throughput           {a['throughput']:.1f} tx/s",
            f"  goodput              {a['goodput']:.1f} tx/s",
        ]
        for key, label in (("latency_ms", "end-to-end"), ("endorse_ms", "endorse (E)"),
                           ("order_ms", "order (O)"), ("validate_ms", "validate (V)"),
                           ("peer_commit_ms", "peer commit")):
            s = a[key]
            lines.append(f"  {label:<20} mean {s['mean']:.3f}  p50 {s['p50']:.3f}  p99 {s['p99']:.3f} ms")
        return "\n".join(lines)


def read_csv(path: str | Path) -> list[OpRecord]:
    types = {f.name: f.type for f in fields(OpRecord)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = bool(int(v)) if t == "bool" else int(v) if t == "int" else v
            out.append(OpRecord(**kw))
    return out


def recompute_from_csv(path: str | Path) -> dict[str, float]:
    """Independent recomputation of the headline aggregates straight from CSV rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: (int(r["submit_ns"]), int(r["op_index"])))
    cut = int(len(rows) * 0.1)
    rows = rows[cut:len(rows) - cut]
    done = [r for r in rows if r["status"] == OK]
    valid = sum(int(r["valid"]) for r in done)
    start = min(int(r["submit_ns"]) for r in done)
    end = max(int(r["committed_ns"]) for r in done)
    span = (end - start) / 1e9
    lat = sorted((int(r["committed_ns"]) - int(r["submit_ns"])) / 1e6 for r in done)
    mid = len(lat) // 2
    p50 = lat[mid] if len(lat) % 2 else (lat[mid - 1] + lat[mid]) / 2
    return {
        "throughput": len(done) / span,
        "goodput": valid / span,
        "failing_pct": 100.0 * (len(done) - valid) / len(done),
        "latency_mean_ms": sum(lat) / len(lat),
        "latency_p50_ms": p50,
    }
