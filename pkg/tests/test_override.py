"""Escalation tickets, human decisions, simulated approver."""

import pytest

from capgov.override import (
    AuthorityMode,
    AuthorityState,
    EscalationTicket,
    HumanDecision,
    OverrideGateway,
    StaleTicket,
    TicketStatus,
    UnauthorizedOperator,
    Verdict,
    simulated_approver,
)
from capgov.registry import Risk
from capgov.rng import stream


def gateway(mode=AuthorityMode.APPROVAL_ON_ESCALATION):
    return OverrideGateway(AuthorityState(mode))


def escalate(gw, reason="supervisory_review"):
    return gw.escalate(session_id=None, capability="transport_object", risk=Risk.HIGH, reason=reason)


def test_escalation_queued_fifo_pending():
    gw = gateway()
    t1, t2 = escalate(gw), escalate(gw)
    assert [t.ticket_id for t in gw.pending()] == [t1.ticket_id, t2.ticket_id]
    assert t1.status is TicketStatus.PENDING


def test_proximity_ticket_reason():
    gw = gateway()
    t = gw.escalate(session_id="s9", capability="grasp_object", risk=Risk.MEDIUM, reason="proximity_incursion")
    assert t.reason == "proximity_incursion"
    assert t.session_id == "s9"


def test_resolve_approve_then_stale():
    gw = gateway()
    t = escalate(gw)
    gw.resolve(t, HumanDecision(t.ticket_id, Verdict.APPROVE, "op1", 0))
    assert t.status is TicketStatus.APPROVED
    assert t.resolved_by == "op1"
    with pytest.raises(StaleTicket):
        gw.resolve(t, HumanDecision(t.ticket_id, Verdict.DENY, "op1", 0))


def test_resolve_deny():
    gw = gateway()
    t = escalate(gw)
    gw.resolve(t, HumanDecision(t.ticket_id, Verdict.DENY, "op1", 0))
    assert t.status is TicketStatus.DENIED


def test_review_only_mode_cannot_resolve():
    gw = gateway(AuthorityMode.REVIEW_ONLY)
    t = escalate(gw)
    with pytest.raises(UnauthorizedOperator):
        gw.resolve(t, HumanDecision(t.ticket_id, Verdict.APPROVE, "op1", 0))
    # Fail-closed path: the ticket expires instead.
    gw.expire(t)
    assert t.status is TicketStatus.EXPIRED


def test_wait_for_terminal_times_out_to_expired():
    gw = gateway()
    t = escalate(gw)
    status = gw.wait_for_terminal(t, timeout=0.01)
    assert status is TicketStatus.EXPIRED


def test_simulated_approver_deterministic():
    gw = gateway()
    t = escalate(gw)
    a = simulated_approver(t, stream(42, 3, "approval"))
    b = simulated_approver(t, stream(42, 3, "approval"))
    assert a.verdict == b.verdict


def test_simulated_approver_rate():
    # Uniform approve/deny: rate 0.50 +/- 0.02 over 1e4 tickets.
    gw = gateway()
    n = 10_000
    approvals = 0
    for i in range(n):
        t = escalate(gw)
        if simulated_approver(t, stream(17, i, "approval")).verdict is Verdict.APPROVE:
            approvals += 1
    assert abs(approvals / n - 0.5) <= 0.02


def test_observer_sees_ticket_lifecycle():
    gw = gateway()
    seen = []
    gw.add_observer(lambda kind, payload: seen.append((kind, payload["status"])))
    t = escalate(gw)
    gw.resolve(t, HumanDecision(t.ticket_id, Verdict.APPROVE, "op1", 0))
    assert seen == [("ticket", "pending"), ("ticket", "approved")]


def test_harness_review_only_escalation_fails_closed():
    # An escalation raised while only post-hoc review authority exists
    # auto-expires and the request is refused with handover_unavailable.
    from capgov.audit import AuditLog, EventKind
    from capgov.harness import VARIANTS, RunConfig, TrialRunner, generate_trial, load_registry_for

    config = RunConfig(seeds=[42], trials_per_seed=1)
    registry = load_registry_for(config)
    log = AuditLog()
    runner = TrialRunner(VARIANTS["proposed"], 42, config, registry, log)
    runner.gateway = OverrideGateway(AuthorityState(AuthorityMode.REVIEW_ONLY))
    # Find a trial that escalates: unauthorized missing_approval.
    index = 0
    while True:
        spec = generate_trial(42, index, registry, config.calibration)
        if spec.unauthorized_kind == "missing_approval":
            break
        index += 1
    runner._reset_trial_flags()
    runner.run_trial(spec)
    finals = [e for e in log.events if e.kind is EventKind.FINAL_OUTCOME]
    assert finals[-1].payload["reason"] == "handover_unavailable"
    assert runner.gateway.tickets[f"tk-1"].status is TicketStatus.EXPIRED
