"""Session machine, watcher behavior, scripted substrate."""

import itertools

import pytest

from capgov.governance import (
    AdmissionOutcome,
    AdmissionVerdict,
    DecisionKind,
    GovernanceContext,
    GovernanceDecision,
    InvocationRequest,
    RequestMeta,
)
from capgov.registry import PolicySet, load_default_registry
from capgov.rng import stream
from capgov.session import (
    TRANSITIONS,
    GovernedSession,
    IllegalTransition,
    ObservationStream,
    ScriptedSubstrate,
    SessionEvent,
    SessionState,
    SignalKind,
    SubstrateScript,
    TelemetryEvent,
    TelemetrySignal,
    ViolationType,
    WatchSignal,
    launch,
    watch,
    watch_event,
)

REG = load_default_registry()


def ctx_for(profile_name):
    return GovernanceContext(
        profile=REG.profile(profile_name),
        policy_set=REG.policy_set(profile_name),
        registry=REG,
    )


def launch_decision(profile="sim_relaxed"):
    req = InvocationRequest(
        capability="navigate_to",
        params={"target_zone": "assembly_line", "speed": 0.4},
        meta=RequestMeta(),
        profile=profile,
        agent_permissions=frozenset({"mobility"}),
    )
    return GovernanceDecision(
        kind=DecisionKind.LAUNCH,
        request=req,
        admission=AdmissionOutcome(AdmissionVerdict.ACCEPT),
        final_params=dict(req.params),
    )


class TestStateMachine:
    def test_declared_edges(self):
        s = GovernedSession("s1", "navigate_to", {}, ctx_for("sim_relaxed"))
        assert s.transition(SessionEvent.PAUSE) is SessionState.PAUSED
        assert s.transition(SessionEvent.RESUME) is SessionState.RUNNING
        assert s.transition(SessionEvent.RECOVER_BEGIN) is SessionState.RECOVERING
        assert s.transition(SessionEvent.RECOVER_DONE) is SessionState.RUNNING
        assert s.transition(SessionEvent.COMPLETE) is SessionState.COMPLETED

    def test_terminal_states_absorb_nothing(self):
        s = GovernedSession("s1", "navigate_to", {}, ctx_for("sim_relaxed"))
        s.transition(SessionEvent.COMPLETE)
        for event in SessionEvent:
            with pytest.raises(IllegalTransition):
                s.transition(event)

    def test_exhaustive_pairs(self):
        # Every (state, event) pair either reaches its declared target or
        # raises IllegalTransition; outgoing targets match the declared
        # edge sets exactly.
        declared_targets = {
            SessionState.RUNNING: {SessionState.PAUSED, SessionState.ESCALATED, SessionState.RECOVERING,
                                   SessionState.COMPLETED, SessionState.FAILED},
            SessionState.PAUSED: {SessionState.RUNNING, SessionState.ESCALATED, SessionState.FAILED},
            SessionState.ESCALATED: {SessionState.RUNNING, SessionState.RECOVERING, SessionState.FAILED},
            SessionState.RECOVERING: {SessionState.RUNNING, SessionState.COMPLETED, SessionState.FAILED},
            SessionState.COMPLETED: set(),
            SessionState.FAILED: set(),
        }
        for state, event in itertools.product(SessionState, SessionEvent):
            s = GovernedSession("s1", "navigate_to", {}, ctx_for("sim_relaxed"), state=state)
            key = (state, event)
            if key in TRANSITIONS:
                assert s.transition(event) is TRANSITIONS[key]
            else:
                with pytest.raises(IllegalTransition):
                    s.transition(event)
        for state, targets in declared_targets.items():
            reachable = {TRANSITIONS[k] for k in TRANSITIONS if k[0] is state}
            assert reachable == targets, f"{state}: {reachable} != {targets}"

    def test_illegal_transition_is_error_not_noop(self):
        s = GovernedSession("s1", "navigate_to", {}, ctx_for("sim_relaxed"))
        with pytest.raises(IllegalTransition):
            s.transition(SessionEvent.RESUME)
        assert s.state is SessionState.RUNNING


class TestLaunch:
    def test_launch_running(self):
        s = launch(launch_decision(), ctx_for("sim_relaxed"))
        assert s.state is SessionState.RUNNING
        assert s.outcome is None

    def test_distinct_session_ids(self):
        a = launch(launch_decision(), ctx_for("sim_relaxed"))
        b = launch(launch_decision(), ctx_for("sim_relaxed"))
        assert a.session_id != b.session_id

    def test_halted_substrate_fails_closed(self):
        s = launch(launch_decision(), ctx_for("sim_relaxed"), substrate_available=False)
        assert s.state is SessionState.FAILED
        assert s.outcome == "substrate_error"


class TestWatcher:
    def test_certain_detection_at_full_sensitivity(self):
        import dataclasses

        profile = dataclasses.replace(REG.profile("sim_relaxed"), watcher_sensitivity=1.0)
        ctx = GovernanceContext(profile=profile, policy_set=PolicySet(profile="sim_relaxed", rules=()), registry=REG)
        ev = TelemetryEvent("s1", 3, TelemetrySignal.FORCE_READING, value=profile.force_limit * 2)
        sig = watch_event(ev, ctx, stream(1, 1, "watch"))
        assert sig.kind is SignalKind.VIOLATION
        assert sig.violation_type is ViolationType.FORCE_EXCEEDED

    def test_proximity_suppressed_below_sensitivity_floor(self):
        # sim_relaxed sensitivity 0.3: the signal is suppressed by design,
        # for every draw.
        ctx = ctx_for("sim_relaxed")
        rng = stream(1, 2, "watch")
        for _ in range(200):
            ev = TelemetryEvent("s1", 3, TelemetrySignal.HUMAN_PROXIMITY, value=True)
            assert watch_event(ev, ctx, rng).kind is SignalKind.NORMAL

    def test_no_false_alarms(self):
        ctx = ctx_for("human_shared")
        rng = stream(1, 3, "watch")
        clean = [
            TelemetryEvent("s1", 1, TelemetrySignal.PROGRESS, value=0.1),
            TelemetryEvent("s1", 2, TelemetrySignal.FORCE_READING, value=1.0),
            TelemetryEvent("s1", 3, TelemetrySignal.SPEED_READING, value=0.1),
            TelemetryEvent("s1", 4, TelemetrySignal.ZONE_ENTERED, value="charging_bay"),
            TelemetryEvent("s1", 5, TelemetrySignal.POSTCONDITION_STATUS, value=True),
        ]
        for ev in clean:
            sig = watch_event(ev, ctx, rng)
            assert sig.kind in (SignalKind.NORMAL, SignalKind.WARNING)

    def test_warning_band(self):
        ctx = ctx_for("human_shared")  # force limit 25
        ev = TelemetryEvent("s1", 2, TelemetrySignal.FORCE_READING, value=22.0)
        sig = watch_event(ev, ctx, stream(1, 4, "watch"))
        assert sig.kind is SignalKind.WARNING

    def test_retry_exceeded_maps_to_escalation_signal(self):
        import dataclasses

        profile = dataclasses.replace(REG.profile("human_shared"), watcher_sensitivity=1.0)
        ctx = GovernanceContext(profile=profile, policy_set=PolicySet(profile="human_shared", rules=()), registry=REG)
        ev = TelemetryEvent("s1", 4, TelemetrySignal.RETRY_TICK, value=profile.retry_budget + 1)
        sig = watch_event(ev, ctx, stream(1, 5, "watch"))
        assert sig.kind is SignalKind.ESCALATION
        assert sig.violation_type is ViolationType.RETRY_EXCEEDED

    @pytest.mark.parametrize("sensitivity", [0.3, 0.5, 1.0])
    def test_detection_rate_calibrated(self, sensitivity):
        # Law-of-large-numbers check on the watch model: empirical
        # detection within +/-0.02 of the configured sensitivity over
        # 1e4 injected violations.
        import dataclasses

        profile = dataclasses.replace(REG.profile("sim_relaxed"), watcher_sensitivity=sensitivity)
        ctx = GovernanceContext(profile=profile, policy_set=PolicySet(profile="sim_relaxed", rules=()), registry=REG)
        n = 10_000
        detected = 0
        for i in range(n):
            rng = stream(9, i, "watch")
            ev = TelemetryEvent("s1", 3, TelemetrySignal.FORCE_READING, value=profile.force_limit * 2)
            if watch_event(ev, ctx, rng).kind is SignalKind.VIOLATION:
                detected += 1
        assert abs(detected / n - sensitivity) <= 0.02

    def test_watch_stream_wrapper(self):
        ctx = ctx_for("human_shared")
        obs = ObservationStream("s1")
        obs.extend(
            [
                TelemetryEvent("s1", 0, TelemetrySignal.PROGRESS, value=0.0),
                TelemetryEvent("s1", 1, TelemetrySignal.PROGRESS, value=0.5),
            ]
        )
        signals = watch(obs, ctx, stream(1, 6, "watch"))
        assert [s.kind for s in signals] == [SignalKind.NORMAL, SignalKind.NORMAL]

    def test_observation_stream_rejects_decreasing_steps(self):
        obs = ObservationStream("s1")
        obs.extend([TelemetryEvent("s1", 5, TelemetrySignal.PROGRESS)])
        with pytest.raises(Exception):
            obs.extend([TelemetryEvent("s1", 3, TelemetrySignal.PROGRESS)])


class TestScriptedSubstrate:
    def test_clean_trial_progress_then_completion(self):
        sub = ScriptedSubstrate()
        session = launch(launch_decision(), ctx_for("sim_relaxed"))
        script = SubstrateScript(total_ticks=3)
        kinds = []
        for t in range(4):
            kinds.extend(ev.signal for ev in sub.step(session, script, t))
        assert TelemetrySignal.CONTROLLER_STATUS in kinds
        assert kinds.count(TelemetrySignal.PROGRESS) == 4

    def test_injection_schedule_readback(self):
        # The injected force reading appears exactly at the scheduled step
        # and exceeds the active profile's limit.
        sub = ScriptedSubstrate()
        session = launch(launch_decision("human_shared"), ctx_for("human_shared"))
        script = SubstrateScript(
            total_ticks=6, injection_step=4, injection=ViolationType.FORCE_EXCEEDED
        )
        limit = REG.profile("human_shared").force_limit
        for t in range(6):
            batch = sub.step(session, script, t)
            force = [ev for ev in batch if ev.signal is TelemetrySignal.FORCE_READING]
            if t == 4:
                assert len(force) == 1 and force[0].value > limit
            else:
                assert not force

    def test_human_incursion_event(self):
        sub = ScriptedSubstrate()
        session = launch(launch_decision("human_shared"), ctx_for("human_shared"))
        script = SubstrateScript(total_ticks=6, injection_step=2, injection=ViolationType.HUMAN_PROXIMITY)
        batch = sub.step(session, script, 2)
        prox = [ev for ev in batch if ev.signal is TelemetrySignal.HUMAN_PROXIMITY]
        assert len(prox) == 1 and prox[0].value is True

    def test_stalling_script_times_out(self):
        sub = ScriptedSubstrate()
        session = launch(launch_decision(), ctx_for("sim_relaxed"))
        script = SubstrateScript(
            total_ticks=3, injection_step=1, injection=ViolationType.POSTCONDITION_FAILED, stalls=True
        )
        batch = sub.step(session, script, 3)
        assert any(ev.signal is TelemetrySignal.TIMEOUT_TICK for ev in batch)

    def test_halted_substrate_raises(self):
        from capgov.session import SubstrateUnavailable

        sub = ScriptedSubstrate(halted=True)
        session = launch(launch_decision(), ctx_for("sim_relaxed"))
        with pytest.raises(SubstrateUnavailable):
            sub.step(session, SubstrateScript(total_ticks=3), 0)


def test_watch_signal_invariant():
    with pytest.raises(Exception):
        WatchSignal(SignalKind.VIOLATION)  # violation requires a type
    with pytest.raises(Exception):
        WatchSignal(SignalKind.NORMAL, violation_type=ViolationType.FORCE_EXCEEDED)


def test_negative_force_reading_rejected():
    with pytest.raises(Exception):
        TelemetryEvent("s1", 0, TelemetrySignal.FORCE_READING, value=-1.0)
