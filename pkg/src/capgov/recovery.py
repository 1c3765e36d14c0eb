"""Governance-level intervention and recovery/rollback selection.

Interventions map watch signals to the action set {continue, pause,
stop, rollback, escalate} deterministically given (signal, profile,
authority).  Recovery plans follow a fixed ladder: prefer the declared
rollback/recovery routine, else bounded retry while budget remains, else
terminate for replanning; proximity and retry-exhaustion escalations go
to the human gate instead of the recovery path.

Rollback attempts succeed with a fixed per-attempt probability (0.90,
midpoint of the calibrated 0.88-0.92 band).  A failed rollback leaves
the physical state indeterminate, so the session fails closed rather
than retrying blind.  Every plan respects the profile retry budget, so
recovery always terminates within budget + 1 attempts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

from .governance import GovernanceContext
from .override import AuthorityMode, AuthorityState
from .registry import CapabilityManifest
from .session import SignalKind, ViolationType, WatchSignal


class RecoveryError(Exception):
    pass


class RecoveryExhausted(RecoveryError):
    """Budget spent without reaching a safe state; session fails closed."""


class FailureKind(enum.Enum):
    FAILED_GRASP = "failed_grasp"
    BLOCKED_PATH = "blocked_path"
    PERCEPTION_MISMATCH = "perception_mismatch"
    TIMEOUT = "timeout"
    PRECONDITION_FAILURE = "precondition_failure"
    UNSAFE_STATE = "unsafe_state"
    POLICY_VIOLATION = "policy_violation"
    TOOL_UNAVAILABLE = "tool_unavailable"


@dataclass(frozen=True)
class FailureEvent:
    session_id: str
    failure_kind: FailureKind
    detected: bool  # whether the watcher flagged the underlying violation


class RecoveryStrategy(enum.Enum):
    BOUNDED_RETRY = "bounded_retry"
    INVOKE_RECOVERY_CAPABILITY = "invoke_recovery_capability"
    ROLLBACK = "rollback"
    MODE_SWITCH_LOWER_RISK = "mode_switch_lower_risk"
    TERMINATE_REPLAN = "terminate_replan"
    HUMAN_TAKEOVER = "human_takeover"


@dataclass(frozen=True)
class RecoveryPlan:
    strategy: RecoveryStrategy
    budget: int
    rollback_routine: Optional[str] = None

    def __post_init__(self):
        if self.strategy in (RecoveryStrategy.ROLLBACK, RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY):
            if self.rollback_routine is None:
                raise RecoveryError("rollback strategies require a declared routine")
        if self.strategy is RecoveryStrategy.BOUNDED_RETRY and self.budget <= 0:
            raise RecoveryError("bounded_retry requires remaining budget")


class InterventionAction(enum.Enum):
    CONTINUE = "continue"
    PAUSE = "pause"
    STOP = "stop"
    ROLLBACK = "rollback"
    ESCALATE = "escalate"


@dataclass(frozen=True)
class InterventionDecision:
    action: InterventionAction
    cause: WatchSignal


# Actions the active policy permits per violation type.  'continue' is
# never a permitted response to a violation; interventions chosen from
# these sets keep enforcement fidelity at 1.
PERMITTED_INTERVENTIONS: dict[ViolationType, frozenset[InterventionAction]] = {
    ViolationType.FORCE_EXCEEDED: frozenset(
        {InterventionAction.PAUSE, InterventionAction.STOP, InterventionAction.ROLLBACK, InterventionAction.ESCALATE}
    ),
    ViolationType.SPEED_EXCEEDED: frozenset(
        {InterventionAction.PAUSE, InterventionAction.STOP, InterventionAction.ROLLBACK, InterventionAction.ESCALATE}
    ),
    ViolationType.RETRY_EXCEEDED: frozenset({InterventionAction.STOP, InterventionAction.ESCALATE}),
    ViolationType.POSTCONDITION_FAILED: frozenset(
        {InterventionAction.PAUSE, InterventionAction.STOP, InterventionAction.ROLLBACK, InterventionAction.ESCALATE}
    ),
    ViolationType.ZONE_VIOLATION: frozenset(
        {InterventionAction.PAUSE, InterventionAction.STOP, InterventionAction.ROLLBACK, InterventionAction.ESCALATE}
    ),
    ViolationType.HUMAN_PROXIMITY: frozenset(
        {InterventionAction.PAUSE, InterventionAction.STOP, InterventionAction.ESCALATE}
    ),
}

_ROLLBACK_KINDS = frozenset(
    {
        FailureKind.FAILED_GRASP,
        FailureKind.PERCEPTION_MISMATCH,
        FailureKind.UNSAFE_STATE,
        FailureKind.POLICY_VIOLATION,
    }
)


def permitted_strategies(kind: FailureKind, has_routine: bool) -> frozenset[RecoveryStrategy]:
    """Recovery strategies the policy permits for a (failure, capability) pair.

    After a stall/timeout the state is intact, so a bounded retry is
    sane and rolling back is pointless.  A blocked path calls for a
    degraded-mode reroute or termination, never a blind re-run of the
    exhausted attempt.  For state-corrupting failures the declared
    routine is mandatory when one exists; raw retries are permitted only
    for capabilities without a reversible state.
    """
    if kind is FailureKind.TIMEOUT:
        return frozenset({RecoveryStrategy.BOUNDED_RETRY, RecoveryStrategy.TERMINATE_REPLAN})
    if kind is FailureKind.PRECONDITION_FAILURE:
        return frozenset({RecoveryStrategy.BOUNDED_RETRY, RecoveryStrategy.TERMINATE_REPLAN})
    if kind is FailureKind.TOOL_UNAVAILABLE:
        return frozenset({RecoveryStrategy.TERMINATE_REPLAN, RecoveryStrategy.HUMAN_TAKEOVER})
    if kind is FailureKind.BLOCKED_PATH:
        base = {
            RecoveryStrategy.MODE_SWITCH_LOWER_RISK,
            RecoveryStrategy.TERMINATE_REPLAN,
            RecoveryStrategy.HUMAN_TAKEOVER,
        }
        if not has_routine:
            base.add(RecoveryStrategy.BOUNDED_RETRY)
        return frozenset(base)
    if kind in _ROLLBACK_KINDS:
        if has_routine:
            return frozenset(
                {
                    RecoveryStrategy.ROLLBACK,
                    RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY,
                    RecoveryStrategy.TERMINATE_REPLAN,
                    RecoveryStrategy.HUMAN_TAKEOVER,
                }
            )
        return frozenset(
            {RecoveryStrategy.BOUNDED_RETRY, RecoveryStrategy.TERMINATE_REPLAN, RecoveryStrategy.HUMAN_TAKEOVER}
        )
    return frozenset({RecoveryStrategy.TERMINATE_REPLAN})


def intervene(
    signal: WatchSignal,
    ctx: GovernanceContext,
    authority: Optional[AuthorityState],
    manifest: Optional[CapabilityManifest] = None,
) -> InterventionDecision:
    """Map a non-normal watch signal to an intervention.

    Deterministic given (signal, profile, authority): proximity pauses
    pending human clearance, retry exhaustion escalates, and other
    violations roll back when the capability declares a routine, else
    stop.  Under takeover authority in human-shared contexts, violations
    escalate to the operator instead.
    """
    if signal.kind is SignalKind.NORMAL:
        raise RecoveryError("intervene() requires a non-normal signal")
    if signal.kind is SignalKind.WARNING:
        return InterventionDecision(InterventionAction.CONTINUE, signal)
    if signal.kind is SignalKind.COMPLETION:
        return InterventionDecision(InterventionAction.CONTINUE, signal)
    if signal.kind is SignalKind.TIMEOUT:
        return InterventionDecision(InterventionAction.STOP, signal)
    if signal.kind is SignalKind.INSTABILITY:
        if manifest is not None and manifest.reversible:
            return InterventionDecision(InterventionAction.ROLLBACK, signal)
        return InterventionDecision(InterventionAction.STOP, signal)

    vtype = signal.violation_type
    if vtype is ViolationType.HUMAN_PROXIMITY:
        return InterventionDecision(InterventionAction.PAUSE, signal)
    if vtype is ViolationType.RETRY_EXCEEDED:
        return InterventionDecision(InterventionAction.ESCALATE, signal)
    if (
        ctx.profile.name == "human_shared"
        and authority is not None
        and authority.mode is AuthorityMode.TAKEOVER_ENABLED
    ):
        return InterventionDecision(InterventionAction.ESCALATE, signal)
    if manifest is not None and manifest.reversible:
        return InterventionDecision(InterventionAction.ROLLBACK, signal)
    return InterventionDecision(InterventionAction.STOP, signal)


# ---------------------------------------------------------------------------
# Plan selection and execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RecoveryStep:
    strategy: RecoveryStrategy
    ticks: int
    success: bool


@dataclass
class RecoveryExecution:
    """Executed recovery record: the plan, its steps, and how it ended.

    ``outcome`` is one of recovered / rolled_back / terminated /
    handed_over, or exhausted when the budget ran out without reaching a
    safe state.  ``permitted`` records whether the selected plan was in
    the policy-permitted set for this (failure, capability) pair.
    """

    plan: RecoveryPlan
    failure: FailureEvent
    steps: list[RecoveryStep] = field(default_factory=list)
    outcome: str = "exhausted"
    permitted: bool = True
    permit_ref: Optional[str] = None

    @property
    def rollback_attempted(self) -> bool:
        return any(
            s.strategy in (RecoveryStrategy.ROLLBACK, RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY)
            for s in self.steps
        )

    @property
    def rollback_succeeded(self) -> bool:
        return any(
            s.success
            and s.strategy in (RecoveryStrategy.ROLLBACK, RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY)
            for s in self.steps
        )

    @property
    def total_ticks(self) -> int:
        return sum(s.ticks for s in self.steps)


# Tick costs per strategy step, calibrated against the recovery-time
# targets and recorded in the run config header.
DEFAULT_STRATEGY_TICKS = {
    RecoveryStrategy.ROLLBACK: 4,
    RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY: 4,
    RecoveryStrategy.BOUNDED_RETRY: 2,
    RecoveryStrategy.MODE_SWITCH_LOWER_RISK: 2,
    RecoveryStrategy.TERMINATE_REPLAN: 1,
    RecoveryStrategy.HUMAN_TAKEOVER: 6,
}

ROLLBACK_SUCCESS_P = 0.90
RETRY_SUCCESS_P = 0.95


def select_plan(
    failure: FailureEvent,
    manifest: CapabilityManifest,
    ctx: GovernanceContext,
    *,
    params: Optional[dict[str, Any]] = None,
) -> RecoveryPlan:
    """Choose the recovery strategy for a failure under the active profile."""
    budget = ctx.profile.retry_budget
    has_routine = manifest.reversible

    # Fragile-object manipulation failures in shared spaces go straight
    # to the operator: pause and hand over rather than act autonomously.
    object_id = str((params or {}).get("object_id", ""))
    if (
        failure.failure_kind is FailureKind.FAILED_GRASP
        and ctx.profile.name == "human_shared"
        and object_id.startswith("fragile")
    ):
        return RecoveryPlan(RecoveryStrategy.HUMAN_TAKEOVER, budget=budget)

    if failure.failure_kind is FailureKind.TIMEOUT:
        if has_routine and budget > 0:
            return RecoveryPlan(RecoveryStrategy.BOUNDED_RETRY, budget=min(budget, 1))
        return RecoveryPlan(RecoveryStrategy.TERMINATE_REPLAN, budget=budget)

    if failure.failure_kind is FailureKind.BLOCKED_PATH:
        # Re-running the blocked motion is pointless; reroute in a
        # degraded (lower-speed, wider-margin) mode instead.
        return RecoveryPlan(RecoveryStrategy.MODE_SWITCH_LOWER_RISK, budget=budget)

    if failure.failure_kind in _ROLLBACK_KINDS:
        if has_routine:
            strategy = (
                RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY
                if failure.failure_kind is FailureKind.FAILED_GRASP
                else RecoveryStrategy.ROLLBACK
            )
            return RecoveryPlan(strategy, budget=budget, rollback_routine=manifest.rollback)
        if budget > 0:
            return RecoveryPlan(RecoveryStrategy.BOUNDED_RETRY, budget=min(budget, 1))
        return RecoveryPlan(RecoveryStrategy.TERMINATE_REPLAN, budget=budget)

    return RecoveryPlan(RecoveryStrategy.TERMINATE_REPLAN, budget=budget)


def execute_plan(
    plan: RecoveryPlan,
    failure: FailureEvent,
    manifest: CapabilityManifest,
    ctx: GovernanceContext,
    rng,
    *,
    strategy_ticks: Optional[dict[RecoveryStrategy, int]] = None,
    rollback_p: float = ROLLBACK_SUCCESS_P,
    retry_p: float = RETRY_SUCCESS_P,
) -> RecoveryExecution:
    """Run the plan to a terminal recovery outcome.

    Terminates within budget + 1 attempts by construction.  The permit
    reference names the policy table entry legitimizing the plan.
    """
    ticks = strategy_ticks or DEFAULT_STRATEGY_TICKS
    allowed = permitted_strategies(failure.failure_kind, manifest.reversible)
    execution = RecoveryExecution(
        plan=plan,
        failure=failure,
        permitted=plan.strategy in allowed,
        permit_ref=f"recovery_policy.{failure.failure_kind.value}.{plan.strategy.value}"
        if plan.strategy in allowed
        else None,
    )

    if plan.strategy is RecoveryStrategy.TERMINATE_REPLAN:
        execution.steps.append(RecoveryStep(plan.strategy, ticks[plan.strategy], True))
        execution.outcome = "terminated"
        return execution

    if plan.strategy is RecoveryStrategy.HUMAN_TAKEOVER:
        execution.steps.append(RecoveryStep(plan.strategy, ticks[plan.strategy], True))
        execution.outcome = "handed_over"
        return execution

    if plan.strategy in (RecoveryStrategy.ROLLBACK, RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY):
        ok = rng.bernoulli(rollback_p)
        execution.steps.append(RecoveryStep(plan.strategy, ticks[plan.strategy], ok))
        if not ok:
            # Indeterminate physical state after a failed rollback: fail
            # closed instead of retrying blind.
            execution.outcome = "exhausted"
            return execution
        if plan.strategy is RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY:
            # Routine restored preconditions; re-attempt the capability.
            retry_ok = rng.bernoulli(retry_p)
            execution.steps.append(RecoveryStep(RecoveryStrategy.BOUNDED_RETRY, ticks[RecoveryStrategy.BOUNDED_RETRY], retry_ok))
            execution.outcome = "recovered" if retry_ok else "exhausted"
            return execution
        execution.outcome = "rolled_back"
        return execution

    if plan.strategy is RecoveryStrategy.BOUNDED_RETRY:
        attempts = max(1, min(plan.budget, ctx.profile.retry_budget + 1))
        for _ in range(attempts):
            ok = rng.bernoulli(retry_p)
            execution.steps.append(RecoveryStep(plan.strategy, ticks[plan.strategy], ok))
            if ok:
                execution.outcome = "recovered"
                return execution
        execution.outcome = "exhausted"
        return execution

    if plan.strategy is RecoveryStrategy.MODE_SWITCH_LOWER_RISK:
        execution.steps.append(RecoveryStep(plan.strategy, ticks[plan.strategy], True))
        execution.outcome = "recovered"
        return execution

    raise RecoveryError(f"unhandled strategy {plan.strategy}")


def recover(
    failure: FailureEvent,
    manifest: CapabilityManifest,
    ctx: GovernanceContext,
    rng,
    *,
    params: Optional[dict[str, Any]] = None,
    strategy_ticks: Optional[dict[RecoveryStrategy, int]] = None,
    rollback_p: float = ROLLBACK_SUCCESS_P,
    retry_p: float = RETRY_SUCCESS_P,
) -> RecoveryExecution:
    """Select and execute recovery; raises RecoveryExhausted on failure."""
    plan = select_plan(failure, manifest, ctx, params=params)
    execution = execute_plan(
        plan, failure, manifest, ctx, rng,
        strategy_ticks=strategy_ticks, rollback_p=rollback_p, retry_p=retry_p,
    )
    if execution.outcome == "exhausted":
        raise RecoveryExhausted(f"{failure.failure_kind.value} on {manifest.name}: budget spent")
    return execution


def recovery_time(execution: RecoveryExecution, tick_seconds: float = 0.05) -> float:
    """Wall model of a concluded recovery: sum of per-step tick costs."""
    return execution.total_ticks * tick_seconds
