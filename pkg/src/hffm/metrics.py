"""Transfer ledger, per-round reports and their CSV / markdown renderings."""
from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AccountingError, ReportingError

COMPUTE = "compute"
REPORT_COLUMNS = ("strategy", "round", "cum_latency_s", "cum_energy_j", "accuracy")
LEDGER_COLUMNS = ("round", "strategy", "src", "dst", "kind", "bytes", "latency_s", "energy_j", "critical")

STRATEGY_TITLES = {"star": "FFM (star)", "hier": "HF-FM", "hier-d2d": "HF-FM + D2D"}


@dataclass(frozen=True)
class TransferEvent:
    """One simulated transmission, or a compute interval when kind == "compute".

    ``critical`` marks events on the round's critical path; only those
    contribute to round latency.
    """

    round: int
    strategy: str
    src: int
    dst: int
    kind: str
    bytes: int
    latency_s: float
    energy_j: float
    critical: bool = False


@dataclass
class TransferLedger:
    events: list[TransferEvent] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.events)

    @property
    def total_energy_j(self) -> float:
        return math.fsum(e.energy_j for e in self.events)

    @property
    def total_latency_s(self) -> float:
        return math.fsum(e.latency_s for e in self.events)

    @property
    def critical_latency_s(self) -> float:
        return math.fsum(e.latency_s for e in self.events if e.critical)


def record_transfer(ledger: TransferLedger, event: TransferEvent) -> TransferLedger:
    for name in ("round", "src", "dst", "bytes", "latency_s", "energy_j"):
        value = getattr(event, name)
        if not value >= 0:
            raise AccountingError(f"event field {name} must be non-negative, got {value!r}")
    ledger.events.append(event)
    return ledger


def record_compute(ledger: TransferLedger, round: int, strategy: str, device: int,
                   seconds: float, joules: float, critical: bool = False) -> TransferLedger:
    return record_transfer(
        ledger, TransferEvent(round, strategy, device, device, COMPUTE, 0, seconds, joules, critical)
    )


@dataclass(frozen=True)
class RoundReport:
    strategy: str
    round: int
    cumulative_latency_s: float
    cumulative_energy_j: float
    accuracy: float
    e_agg: str = "-"


def summarize(ledger: TransferLedger, accuracies: dict, e_agg: dict | None = None) -> list[RoundReport]:
    """Fold the ledger into cumulative per-round reports.

    ``accuracies`` maps ``(strategy, round)`` to test accuracy and must cover
    every round that appears in the ledger. ``e_agg`` optionally maps a
    strategy to the label shown in the table's E_Agg column.
    """
    per_round: dict = OrderedDict()
    for key in accuracies:
        per_round.setdefault(key, [0.0, 0.0])
    for ev in ledger.events:
        key = (ev.strategy, ev.round)
        if key not in accuracies:
            raise ReportingError(f"no accuracy recorded for strategy {ev.strategy!r} round {ev.round}")
        slot = per_round.setdefault(key, [0.0, 0.0])
        if ev.critical:
            slot[0] += ev.latency_s
        slot[1] += ev.energy_j
    strategies = list(OrderedDict.fromkeys(s for s, _ in per_round))
    reports = []
    for strategy in strategies:
        lat = energy = 0.0
        for rnd in sorted(r for s, r in per_round if s == strategy):
            d_lat, d_energy = per_round[(strategy, rnd)]
            lat += d_lat
            energy += d_energy
            acc = float(accuracies[(strategy, rnd)])
            if not 0.0 <= acc <= 1.0:
                raise ReportingError(f"accuracy {acc} outside [0, 1]")
            label = (e_agg or {}).get(strategy, "-")
            reports.append(RoundReport(strategy, rnd, lat, energy, acc, label))
    return reports


def _fmt(x: float) -> str:
    return repr(float(x))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow([r.strategy, r.round, _fmt(r.cumulative_latency_s),
                         _fmt(r.cumulative_energy_j), _fmt(r.accuracy)])
    return buf.getvalue()


def _write(path, text: str):
    path = Path(path)
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportingError(f"cannot write {path}: {exc}") from exc
    return path


def emit_csv(reports, path) -> Path:
    return _write(path, reports_to_csv(reports))


def read_csv(path) -> list[RoundReport]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportingError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != REPORT_COLUMNS:
        raise ReportingError(f"{path}: unexpected header {rows[0] if rows else None}")
    return [
        RoundReport(s, int(r), float(lat), float(en), float(acc))
        for s, r, lat, en, acc in rows[1:]
    ]


def render_table(reports) -> str:
    """Markdown table of final-round rows, one per (strategy, e_agg)."""
    final: dict = OrderedDict()
    for r in reports:
        key = (r.strategy, r.e_agg)
        if key not in final or r.round >= final[key].round:
            final[key] = r
    lines = [
        "| Method | E_Agg | Rounds | Training latency (s) | Energy (J) | Test accuracy |",
        "|---|---|---|---|---|---|",
    ]
    for (strategy, e_agg), r in final.items():
        base = strategy.split("[")[0]
        title = STRATEGY_TITLES.get(base, strategy)
        agg = "edge only" if e_agg == "inf" else e_agg
        lines.append(
            f"| {title} | {agg} | {r.round} | {r.cumulative_latency_s:.2f} | "
            f"{r.cumulative_energy_j:.2f} | {r.accuracy:.4f} |"
        )
    return "\n".join(lines) + "\n"


def emit_table(reports, path) -> Path:
    return _write(path, render_table(reports))


def ledger_to_csv(ledger: TransferLedger, seed=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((("seed",) if seed is not None else ()) + LEDGER_COLUMNS)
    for e in ledger.events:
        row = [e.round, e.strategy, e.src, e.dst, e.kind, e.bytes,
               _fmt(e.latency_s), _fmt(e.energy_j), int(e.critical)]
        writer.writerow(([seed] if seed is not None else []) + row)
    return buf.getvalue()


def emit_ledger_csv(ledger: TransferLedger, path, seed=None) -> Path:
    return _write(path, ledger_to_csv(ledger, seed))


def mean_reports(runs: list[list[RoundReport]]) -> list[RoundReport]:
    """Element-wise mean over runs that share (strategy, round) rows."""
    if not runs:
        return []
    keys = [(r.strategy, r.round) for r in runs[0]]
    for other in runs[1:]:
        if [(r.strategy, r.round) for r in other] != keys:
            raise ReportingError("runs disagree on their (strategy, round) rows")
    out = []
    n = len(runs)
    for i, first in enumerate(runs[0]):
        out.append(RoundReport(
            first.strategy, first.round,
            math.fsum(run[i].cumulative_latency_s for run in runs) / n,
            math.fsum(run[i].cumulative_energy_j for run in runs) / n,
            math.fsum(run[i].accuracy for run in runs) / n,
            first.e_agg,
        ))
    return out
