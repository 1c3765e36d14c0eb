"""Governed execution sessions: launch, state machine, and the watcher.

A session is the monitored execution instance of one launched request.
Its lifecycle is a six-state machine; illegal transitions raise, never
silently no-op, and every state change is audit-logged by the caller
before further processing.

The Execution Watcher converts telemetry into watch signals.  Detection
of an injected violation is probabilistic: one draw per violation event
at the active profile's watcher sensitivity.  Human-proximity events are
reportable only when sensitivity exceeds 0.7 (elsewhere the signal is
suppressed by design), and zone entries are violations only where the
profile forbids the zone.  Hard signals (timeout, completion) are
deterministic.  Absent violations never produce violation signals.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .governance import DecisionKind, GovernanceContext, GovernanceDecision
from .rng import Stream


class SessionError(Exception):
    pass


class IllegalTransition(SessionError):
    def __init__(self, state: "SessionState", event: "SessionEvent"):
        self.state = state
        self.event = event
        super().__init__(f"event {event.value!r} illegal in state {state.value!r}")


class SubstrateUnavailable(SessionError):
    pass


class SessionState(enum.Enum):
    RUNNING = "RUNNING"
    PAUSED = "PAUSED"
    ESCALATED = "ESCALATED"
    RECOVERING = "RECOVERING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


TERMINAL_STATES = frozenset({SessionState.COMPLETED, SessionState.FAILED})


class SessionEvent(enum.Enum):
    ANOMALY = "anomaly"
    PAUSE = "pause"
    RESUME = "resume"
    STOP = "stop"
    RECOVER_BEGIN = "recover_begin"
    RECOVER_DONE = "recover_done"
    RECOVER_FAILED = "recover_failed"
    ESCALATE = "escalate"
    CLEARANCE = "clearance"
    COMPLETE = "complete"


# The minimal transition relation consistent with the intervention set
# and the pause -> clearance -> resume narrative.  Terminal states absorb
# nothing.
TRANSITIONS: dict[tuple[SessionState, SessionEvent], SessionState] = {
    (SessionState.RUNNING, SessionEvent.PAUSE): SessionState.PAUSED,
    (SessionState.RUNNING, SessionEvent.ANOMALY): SessionState.PAUSED,
    (SessionState.RUNNING, SessionEvent.ESCALATE): SessionState.ESCALATED,
    (SessionState.RUNNING, SessionEvent.RECOVER_BEGIN): SessionState.RECOVERING,
    (SessionState.RUNNING, SessionEvent.COMPLETE): SessionState.COMPLETED,
    (SessionState.RUNNING, SessionEvent.STOP): SessionState.FAILED,
    (SessionState.PAUSED, SessionEvent.RESUME): SessionState.RUNNING,
    (SessionState.PAUSED, SessionEvent.ESCALATE): SessionState.ESCALATED,
    (SessionState.PAUSED, SessionEvent.STOP): SessionState.FAILED,
    (SessionState.ESCALATED, SessionEvent.CLEARANCE): SessionState.RUNNING,
    (SessionState.ESCALATED, SessionEvent.RECOVER_BEGIN): SessionState.RECOVERING,
    (SessionState.ESCALATED, SessionEvent.STOP): SessionState.FAILED,
    (SessionState.RECOVERING, SessionEvent.RECOVER_DONE): SessionState.RUNNING,
    (SessionState.RECOVERING, SessionEvent.COMPLETE): SessionState.COMPLETED,
    (SessionState.RECOVERING, SessionEvent.RECOVER_FAILED): SessionState.FAILED,
}


class TelemetrySignal(enum.Enum):
    PROGRESS = "progress"
    CONTROLLER_STATUS = "controller_status"
    FORCE_READING = "force_reading"
    SPEED_READING = "speed_reading"
    RETRY_TICK = "retry_tick"
    POSTCONDITION_STATUS = "postcondition_status"
    ZONE_ENTERED = "zone_entered"
    HUMAN_PROXIMITY = "human_proximity"
    TIMEOUT_TICK = "timeout_tick"


@dataclass(frozen=True)
class TelemetryEvent:
    session_id: str
    step: int
    signal: TelemetrySignal
    value: Any = None

    def __post_init__(self):
        if self.signal in (TelemetrySignal.FORCE_READING, TelemetrySignal.SPEED_READING) and self.value < 0:
            raise SessionError(f"{self.signal.value} must be non-negative")


@dataclass
class ObservationStream:
    """Ordered telemetry for one session; step indices strictly increase."""

    session_id: str
    events: list[TelemetryEvent] = field(default_factory=list)

    def extend(self, batch: Iterable[TelemetryEvent]) -> None:
        for ev in batch:
            if self.events and ev.step < self.events[-1].step:
                raise SessionError("telemetry steps must be non-decreasing")
            self.events.append(ev)


class SignalKind(enum.Enum):
    NORMAL = "normal"
    WARNING = "warning"
    VIOLATION = "violation"
    TIMEOUT = "timeout"
    INSTABILITY = "instability"
    ESCALATION = "escalation"
    COMPLETION = "completion"


class ViolationType(enum.Enum):
    FORCE_EXCEEDED = "force_exceeded"
    SPEED_EXCEEDED = "speed_exceeded"
    RETRY_EXCEEDED = "retry_exceeded"
    POSTCONDITION_FAILED = "postcondition_failed"
    ZONE_VIOLATION = "zone_violation"
    HUMAN_PROXIMITY = "human_proximity"


@dataclass(frozen=True)
class WatchSignal:
    kind: SignalKind
    violation_type: Optional[ViolationType] = None
    step: int = 0

    def __post_init__(self):
        carries = self.kind in (SignalKind.VIOLATION, SignalKind.ESCALATION)
        if carries != (self.violation_type is not None):
            raise SessionError("violation_type present iff kind is violation/escalation")


@dataclass
class GovernedSession:
    """Launched, monitored execution instance bound to a governance context."""

    session_id: str
    capability: str
    final_params: dict[str, Any]
    ctx: GovernanceContext
    state: SessionState = SessionState.RUNNING
    retry_count: int = 0
    started_at: int = 0
    ended_at: Optional[int] = None
    outcome: Optional[str] = None

    def transition(self, event: SessionEvent) -> SessionState:
        """Apply one lifecycle event; illegal transitions raise."""
        key = (self.state, event)
        if key not in TRANSITIONS:
            raise IllegalTransition(self.state, event)
        self.state = TRANSITIONS[key]
        return self.state

    def finish(self, outcome: str, tick: int) -> None:
        if self.state not in TERMINAL_STATES:
            raise SessionError("outcome is set only in terminal states")
        self.outcome = outcome
        self.ended_at = tick

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


_session_counter = itertools.count(1)


def launch(decision: GovernanceDecision, ctx: GovernanceContext, *, substrate_available: bool = True,
           tick: int = 0, session_id: Optional[str] = None) -> GovernedSession:
    """Bind a launch decision to the substrate as a RUNNING session.

    Only launch decisions construct sessions (no-bypass guarantee).  An
    unavailable substrate yields a session created directly in FAILED
    with outcome ``substrate_error``.
    """
    if decision.kind is not DecisionKind.LAUNCH:
        raise SessionError(f"cannot construct a session from a {decision.kind.value} decision")
    sid = session_id or f"s-{next(_session_counter)}"
    session = GovernedSession(
        session_id=sid,
        capability=decision.request.capability,
        final_params=dict(decision.final_params or {}),
        ctx=ctx,
        started_at=tick,
    )
    if not substrate_available:
        session.state = SessionState.FAILED
        session.finish("substrate_error", tick)
    return session


# ---------------------------------------------------------------------------
# Watcher
# ---------------------------------------------------------------------------

_EVENT_TO_VIOLATION = {
    TelemetrySignal.FORCE_READING: ViolationType.FORCE_EXCEEDED,
    TelemetrySignal.SPEED_READING: ViolationType.SPEED_EXCEEDED,
    TelemetrySignal.RETRY_TICK: ViolationType.RETRY_EXCEEDED,
    TelemetrySignal.POSTCONDITION_STATUS: ViolationType.POSTCONDITION_FAILED,
    TelemetrySignal.ZONE_ENTERED: ViolationType.ZONE_VIOLATION,
    TelemetrySignal.HUMAN_PROXIMITY: ViolationType.HUMAN_PROXIMITY,
}

# Proximity incursions are reportable only above this sensitivity; in
# lower-sensitivity profiles the signal is suppressed by design.
PROXIMITY_SENSITIVITY_FLOOR = 0.7

# Force readings in (WARNING_FRACTION * limit, limit] raise a warning,
# not a violation.
WARNING_FRACTION = 0.8


def violation_event_type(event: TelemetryEvent, ctx: GovernanceContext) -> Optional[ViolationType]:
    """Classify a telemetry event as a ground violation under the profile.

    Returns None when the event is not a policy violation in this
    context (e.g. a zone entry where no zone is forbidden, or proximity
    in a profile that does not monitor it).
    """
    profile = ctx.profile
    sig = event.signal
    if sig is TelemetrySignal.FORCE_READING and event.value > profile.force_limit:
        return ViolationType.FORCE_EXCEEDED
    if sig is TelemetrySignal.SPEED_READING and event.value > profile.speed_limit:
        return ViolationType.SPEED_EXCEEDED
    if sig is TelemetrySignal.RETRY_TICK and event.value > profile.retry_budget:
        return ViolationType.RETRY_EXCEEDED
    if sig is TelemetrySignal.POSTCONDITION_STATUS and event.value is False:
        return ViolationType.POSTCONDITION_FAILED
    if sig is TelemetrySignal.ZONE_ENTERED and event.value in profile.forbidden_zones:
        return ViolationType.ZONE_VIOLATION
    if (
        sig is TelemetrySignal.HUMAN_PROXIMITY
        and event.value is True
        and profile.watcher_sensitivity > PROXIMITY_SENSITIVITY_FLOOR
    ):
        return ViolationType.HUMAN_PROXIMITY
    return None


def watch_event(event: TelemetryEvent, ctx: GovernanceContext, rng: Stream) -> WatchSignal:
    """Convert one telemetry event into a watch signal.

    One detection draw per violation event: the ground violation is
    reported with probability equal to the profile's watcher
    sensitivity, otherwise it passes as normal.
    """
    if event.signal is TelemetrySignal.TIMEOUT_TICK:
        return WatchSignal(SignalKind.TIMEOUT, step=event.step)
    if event.signal is TelemetrySignal.CONTROLLER_STATUS and event.value == "completed":
        return WatchSignal(SignalKind.COMPLETION, step=event.step)
    if event.signal is TelemetrySignal.CONTROLLER_STATUS and event.value == "unstable":
        return WatchSignal(SignalKind.INSTABILITY, step=event.step)

    vtype = violation_event_type(event, ctx)
    if vtype is not None:
        if rng.bernoulli(ctx.profile.watcher_sensitivity):
            kind = SignalKind.ESCALATION if vtype is ViolationType.RETRY_EXCEEDED else SignalKind.VIOLATION
            return WatchSignal(kind, violation_type=vtype, step=event.step)
        return WatchSignal(SignalKind.NORMAL, step=event.step)

    if (
        event.signal is TelemetrySignal.FORCE_READING
        and event.value > WARNING_FRACTION * ctx.profile.force_limit
    ):
        return WatchSignal(SignalKind.WARNING, step=event.step)
    return WatchSignal(SignalKind.NORMAL, step=event.step)


def watch(stream: ObservationStream, ctx: GovernanceContext, rng: Stream) -> list[WatchSignal]:
    """Watch an observation stream, producing one signal per step event."""
    return [watch_event(ev, ctx, rng) for ev in stream.events]


# ---------------------------------------------------------------------------
# Scripted substrate (simulated Stratum 4)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubstrateScript:
    """Per-trial execution script: when to inject what, and whether the
    capability can complete on its own (hard failures stall the run)."""

    total_ticks: int
    injection_step: Optional[int] = None
    injection: Optional[ViolationType] = None
    stalls: bool = False  # true for hard failures: no completion event


class ScriptedSubstrate:
    """Emits scripted telemetry; stands in for the physical executor."""

    def __init__(self, halted: bool = False):
        self.halted = halted

    def step(self, session: GovernedSession, script: SubstrateScript, step: int) -> list[TelemetryEvent]:
        """Telemetry batch for one tick of the given session."""
        if self.halted:
            raise SubstrateUnavailable("substrate halted")
        if session.state is not SessionState.RUNNING:
            raise SessionError("substrate steps only RUNNING sessions")
        sid = session.session_id
        batch = [TelemetryEvent(sid, step, TelemetrySignal.PROGRESS, value=step / max(script.total_ticks, 1))]
        if script.injection_step == step and script.injection is not None:
            batch.append(_injection_event(sid, step, script.injection, session))
        if step >= script.total_ticks:
            if script.stalls:
                batch.append(TelemetryEvent(sid, step, TelemetrySignal.TIMEOUT_TICK, value=step))
            else:
                batch.append(TelemetryEvent(sid, step, TelemetrySignal.CONTROLLER_STATUS, value="completed"))
        return batch


def _injection_event(sid: str, step: int, vtype: ViolationType, session: GovernedSession) -> TelemetryEvent:
    profile = session.ctx.profile
    if vtype is ViolationType.FORCE_EXCEEDED:
        return TelemetryEvent(sid, step, TelemetrySignal.FORCE_READING, value=profile.force_limit * 1.5)
    if vtype is ViolationType.SPEED_EXCEEDED:
        return TelemetryEvent(sid, step, TelemetrySignal.SPEED_READING, value=profile.speed_limit * 1.5)
    if vtype is ViolationType.RETRY_EXCEEDED:
        return TelemetryEvent(sid, step, TelemetrySignal.RETRY_TICK, value=profile.retry_budget + 1)
    if vtype is ViolationType.POSTCONDITION_FAILED:
        return TelemetryEvent(sid, step, TelemetrySignal.POSTCONDITION_STATUS, value=False)
    if vtype is ViolationType.ZONE_VIOLATION:
        zones = sorted(profile.forbidden_zones)
        zone = zones[0] if zones else "unmapped_zone"
        return TelemetryEvent(sid, step, TelemetrySignal.ZONE_ENTERED, value=zone)
    return TelemetryEvent(sid, step, TelemetrySignal.HUMAN_PROXIMITY, value=True)
