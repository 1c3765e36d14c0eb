"""Append-only audit trace.

One structured record per line.  A run starts with a header record
carrying the full config, seed, and calibration constants, so any
artifact is self-describing; every subsequent line is an event with a
per-trace gapless sequence number.

Ground-truth annotations (was the proposal authorized? what was
injected?) ride in a segregated ``ground_truth`` field.  They are
written only in harness mode and are never consulted by governance
code; their only reader is the metrics layer.

On storage failure governance fails closed: the append raises and the
caller drives the session to FAILED rather than continuing unlogged.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional


class AuditError(Exception):
    pass


class StorageFailure(AuditError):
    pass


class ClosedTrace(AuditError):
    """The trace already recorded its final outcome; it is immutable."""


class CorruptLog(AuditError):
    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"{message} (line {line_number})")


class EventKind(enum.Enum):
    PROPOSAL = "proposal"
    ADMISSION_DECISION = "admission_decision"
    POLICY_DECISION = "policy_decision"
    LAUNCH = "launch"
    TELEMETRY = "telemetry"
    WATCH_SIGNAL = "watch_signal"
    INTERVENTION = "intervention"
    RECOVERY_STEP = "recovery_step"
    HUMAN_EVENT = "human_event"
    FINAL_OUTCOME = "final_outcome"


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    trace_id: str  # session id, or request id pre-launch
    tick: int
    wall: float
    kind: EventKind
    payload: dict[str, Any]
    ground_truth: Optional[dict[str, Any]] = None

    def to_line(self) -> str:
        rec: dict[str, Any] = {
            "type": "event",
            "seq": self.seq,
            "trace": self.trace_id,
            "tick": self.tick,
            "wall": self.wall,
            "kind": self.kind.value,
            "payload": self.payload,
        }
        if self.ground_truth is not None:
            rec["ground_truth"] = self.ground_truth
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))


class AuditLog:
    """Single appender with per-trace ordering and closed-trace rejection."""

    def __init__(self, path: Optional[Path] = None, header: Optional[dict[str, Any]] = None):
        self._path = Path(path) if path is not None else None
        self._fh = None
        self.events: list[AuditEvent] = []
        self._seq: dict[str, int] = {}
        self._closed: set[str] = set()
        self.header = header or {}
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            try:
                self._fh = self._path.open("w", encoding="utf-8")
                self._fh.write(json.dumps({"type": "header", **self.header}, sort_keys=True) + "\n")
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc

    def append(
        self,
        trace_id: str,
        kind: EventKind,
        payload: dict[str, Any],
        *,
        tick: int = 0,
        ground_truth: Optional[dict[str, Any]] = None,
    ) -> int:
        """Append one event; returns its per-trace sequence position."""
        if trace_id in self._closed:
            raise ClosedTrace(f"trace {trace_id} already recorded final_outcome")
        seq = self._seq.get(trace_id, 0)
        event = AuditEvent(
            seq=seq,
            trace_id=trace_id,
            tick=tick,
            wall=time.time(),
            kind=kind,
            payload=payload,
            ground_truth=ground_truth,
        )
        self._write(event)
        self.events.append(event)
        self._seq[trace_id] = seq + 1
        if kind is EventKind.FINAL_OUTCOME:
            self._closed.add(trace_id)
        return seq

    def _write(self, event: AuditEvent) -> None:
        if self._fh is None:
            return
        try:
            self._fh.write(event.to_line() + "\n")
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    def flush(self) -> None:
        if self._fh is not None:
            try:
                self._fh.flush()
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "AuditLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class FailingLog(AuditLog):
    """Test double: storage that fails after a set number of appends."""

    def __init__(self, fail_after: int = 0):
        super().__init__(path=None)
        self._remaining = fail_after

    def append(self, *args, **kwargs) -> int:
        if self._remaining <= 0:
            raise StorageFailure("injected storage failure")
        self._remaining -= 1
        return super().append(*args, **kwargs)


def read_audit_lines(lines: Iterable[str]) -> tuple[dict[str, Any], list[AuditEvent]]:
    """Parse a line-delimited audit stream into (header, events).

    Raises CorruptLog with the first offending line number.
    """
    header: Optional[dict[str, Any]] = None
    events: list[AuditEvent] = []
    expected_seq: dict[str, int] = {}
    for n, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CorruptLog(f"unparseable record: {exc.msg}", n) from exc
        rtype = rec.get("type")
        if rtype == "header":
            if header is not None:
                raise CorruptLog("duplicate header record", n)
            header = {k: v for k, v in rec.items() if k != "type"}
            continue
        if rtype != "event":
            raise CorruptLog(f"unknown record type {rtype!r}", n)
        try:
            event = AuditEvent(
                seq=rec["seq"],
                trace_id=rec["trace"],
                tick=rec["tick"],
                wall=rec["wall"],
                kind=EventKind(rec["kind"]),
                payload=rec["payload"],
                ground_truth=rec.get("ground_truth"),
            )
        except (KeyError, ValueError) as exc:
            raise CorruptLog(f"malformed event record: {exc}", n) from exc
        want = expected_seq.get(event.trace_id, 0)
        if event.seq != want:
            raise CorruptLog(f"trace {event.trace_id}: expected seq {want}, got {event.seq}", n)
        expected_seq[event.trace_id] = want + 1
        events.append(event)
    if header is None:
        raise CorruptLog("missing header record", 1)
    return header, events


def read_audit_file(path) -> tuple[dict[str, Any], list[AuditEvent]]:
    with open(path, "r", encoding="utf-8") as fh:
        return read_audit_lines(fh)


def state_sequences(events: Iterable[AuditEvent]) -> dict[str, list[tuple[str, str, str]]]:
    """Per-session (from, to, cause) chains recorded in the log."""
    out: dict[str, list[tuple[str, str, str]]] = {}
    for ev in events:
        if ev.kind is EventKind.LAUNCH:
            out.setdefault(ev.trace_id, [])
        payload = ev.payload
        if ev.kind in (EventKind.INTERVENTION, EventKind.RECOVERY_STEP, EventKind.HUMAN_EVENT, EventKind.FINAL_OUTCOME):
            for change in payload.get("state_changes", []):
                out.setdefault(ev.trace_id, []).append(
                    (change["from"], change["to"], change.get("cause", ""))
                )
        if ev.kind is EventKind.WATCH_SIGNAL and "state_changes" in payload:
            for change in payload["state_changes"]:
                out.setdefault(ev.trace_id, []).append(
                    (change["from"], change["to"], change.get("cause", ""))
                )
    return out
