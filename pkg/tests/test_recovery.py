"""Intervention mapping and recovery execution."""

import pytest

from capgov.governance import GovernanceContext
from capgov.recovery import (
    FailureEvent,
    FailureKind,
    InterventionAction,
    RecoveryExhausted,
    RecoveryStrategy,
    execute_plan,
    intervene,
    permitted_strategies,
    recover,
    recovery_time,
    select_plan,
)
from capgov.registry import PolicySet, load_default_registry
from capgov.rng import stream
from capgov.session import SignalKind, ViolationType, WatchSignal

REG = load_default_registry()


def ctx_for(profile_name):
    return GovernanceContext(
        profile=REG.profile(profile_name),
        policy_set=REG.policy_set(profile_name),
        registry=REG,
    )


GRASP = REG.capabilities["grasp_object"]
INSPECT = REG.capabilities["inspect_area"]
NAVIGATE = REG.capabilities["navigate_to"]


class TestIntervene:
    def test_force_violation_with_rollback_rolls_back(self):
        sig = WatchSignal(SignalKind.VIOLATION, violation_type=ViolationType.FORCE_EXCEEDED, step=3)
        out = intervene(sig, ctx_for("sim_relaxed"), None, GRASP)
        assert out.action is InterventionAction.ROLLBACK

    def test_retry_exhaustion_escalates(self):
        sig = WatchSignal(SignalKind.ESCALATION, violation_type=ViolationType.RETRY_EXCEEDED, step=3)
        out = intervene(sig, ctx_for("sim_relaxed"), None, GRASP)
        assert out.action is InterventionAction.ESCALATE

    def test_warning_continues(self):
        sig = WatchSignal(SignalKind.WARNING, step=3)
        out = intervene(sig, ctx_for("sim_relaxed"), None, GRASP)
        assert out.action is InterventionAction.CONTINUE

    def test_proximity_pauses(self):
        sig = WatchSignal(SignalKind.VIOLATION, violation_type=ViolationType.HUMAN_PROXIMITY, step=3)
        out = intervene(sig, ctx_for("human_shared"), None, GRASP)
        assert out.action is InterventionAction.PAUSE

    def test_no_rollback_available_stops(self):
        sig = WatchSignal(SignalKind.VIOLATION, violation_type=ViolationType.POSTCONDITION_FAILED, step=3)
        out = intervene(sig, ctx_for("sim_relaxed"), None, INSPECT)
        assert out.action is InterventionAction.STOP

    def test_takeover_authority_escalates_in_human_shared(self):
        from capgov.override import AuthorityMode, AuthorityState

        sig = WatchSignal(SignalKind.VIOLATION, violation_type=ViolationType.FORCE_EXCEEDED, step=3)
        authority = AuthorityState(AuthorityMode.TAKEOVER_ENABLED)
        out = intervene(sig, ctx_for("human_shared"), authority, GRASP)
        assert out.action is InterventionAction.ESCALATE


class TestPlans:
    def test_failed_grasp_invokes_routine_then_retry(self):
        failure = FailureEvent("s1", FailureKind.FAILED_GRASP, detected=True)
        plan = select_plan(failure, GRASP, ctx_for("sim_relaxed"))
        assert plan.strategy is RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY
        assert plan.rollback_routine == "release_and_retract"
        execution = execute_plan(plan, failure, GRASP, ctx_for("sim_relaxed"), stream(5, 1, "rollback"))
        strategies = [s.strategy for s in execution.steps]
        assert strategies[0] is RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY
        if execution.steps[0].success:
            assert RecoveryStrategy.BOUNDED_RETRY in strategies[1:]

    def test_timeout_without_rollback_terminates_for_replan(self):
        failure = FailureEvent("s1", FailureKind.TIMEOUT, detected=False)
        plan = select_plan(failure, INSPECT, ctx_for("sim_relaxed"))
        assert plan.strategy is RecoveryStrategy.TERMINATE_REPLAN
        execution = execute_plan(plan, failure, INSPECT, ctx_for("sim_relaxed"), stream(5, 2, "rollback"))
        assert execution.outcome == "terminated"
        assert execution.permitted

    def test_fragile_object_in_human_shared_hands_over(self):
        failure = FailureEvent("s1", FailureKind.FAILED_GRASP, detected=True)
        plan = select_plan(failure, GRASP, ctx_for("human_shared"), params={"object_id": "fragile_vase"})
        assert plan.strategy is RecoveryStrategy.HUMAN_TAKEOVER
        execution = execute_plan(plan, failure, GRASP, ctx_for("human_shared"), stream(5, 3, "rollback"))
        assert execution.outcome == "handed_over"

    def test_blocked_path_reroutes_in_degraded_mode(self):
        failure = FailureEvent("s1", FailureKind.BLOCKED_PATH, detected=False)
        plan = select_plan(failure, NAVIGATE, ctx_for("sim_relaxed"))
        assert plan.strategy is RecoveryStrategy.MODE_SWITCH_LOWER_RISK

    def test_capabilities_without_rollback_never_roll_back(self):
        for kind in FailureKind:
            failure = FailureEvent("s1", kind, detected=True)
            plan = select_plan(failure, INSPECT, ctx_for("sim_relaxed"))
            assert plan.strategy not in (
                RecoveryStrategy.ROLLBACK,
                RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY,
            )

    def test_recover_raises_on_exhaustion(self):
        failure = FailureEvent("s1", FailureKind.UNSAFE_STATE, detected=True)
        # Force rollback failure deterministically.
        with pytest.raises(RecoveryExhausted):
            recover(failure, GRASP, ctx_for("sim_relaxed"), stream(5, 4, "rollback"), rollback_p=0.0)

    def test_termination_within_budget_plus_one(self):
        # Recovery always reaches a terminal outcome within budget + 1
        # attempts, for every failure kind and capability.
        for kind in FailureKind:
            for manifest in REG.capabilities.values():
                ctx = ctx_for("real_restricted")
                failure = FailureEvent("s1", kind, detected=True)
                plan = select_plan(failure, manifest, ctx)
                execution = execute_plan(plan, failure, manifest, ctx, stream(6, hash(kind.value) % 97, "rollback"))
                assert len(execution.steps) <= ctx.profile.retry_budget + 1
                assert execution.outcome in ("recovered", "rolled_back", "terminated", "handed_over", "exhausted")


class TestCalibration:
    def test_rollback_success_rate(self):
        # Per-attempt rollback success stays within [0.87, 0.93] over 1e4
        # attempts at the declared 0.90 constant.
        n = 10_000
        ok = 0
        failure = FailureEvent("s1", FailureKind.UNSAFE_STATE, detected=True)
        for i in range(n):
            plan = select_plan(failure, GRASP, ctx_for("sim_relaxed"))
            execution = execute_plan(plan, failure, GRASP, ctx_for("sim_relaxed"), stream(11, i, "rollback"))
            if execution.rollback_succeeded:
                ok += 1
        assert 0.87 <= ok / n <= 0.93


class TestRecoveryTime:
    def test_single_tick_step_costs_one_tick(self):
        failure = FailureEvent("s1", FailureKind.TIMEOUT, detected=False)
        plan = select_plan(failure, INSPECT, ctx_for("sim_relaxed"))
        execution = execute_plan(plan, failure, INSPECT, ctx_for("sim_relaxed"), stream(5, 9, "rollback"))
        assert execution.total_ticks == 1
        assert recovery_time(execution) == pytest.approx(0.05)

    def test_time_is_sum_of_step_ticks(self):
        failure = FailureEvent("s1", FailureKind.FAILED_GRASP, detected=True)
        plan = select_plan(failure, GRASP, ctx_for("sim_relaxed"))
        execution = execute_plan(plan, failure, GRASP, ctx_for("sim_relaxed"), stream(5, 10, "rollback"))
        assert recovery_time(execution) == pytest.approx(execution.total_ticks * 0.05)


def test_permitted_strategies_exclude_blind_reruns():
    # With a declared routine, a bare retry is not a permitted response
    # to a state-corrupting failure.
    allowed = permitted_strategies(FailureKind.FAILED_GRASP, has_routine=True)
    assert RecoveryStrategy.BOUNDED_RETRY not in allowed
    assert RecoveryStrategy.INVOKE_RECOVERY_CAPABILITY in allowed
    # Without one, retry is the sane fallback.
    allowed = permitted_strategies(FailureKind.FAILED_GRASP, has_routine=False)
    assert RecoveryStrategy.BOUNDED_RETRY in allowed
