"""Human authority: approval modes, escalation tickets, and approvers.

The gateway is the one shared mutable service in the runtime.  Tickets
are queued FIFO and every status change is audit-logged by the caller.
A terminal ticket is immutable; resolving it again raises StaleTicket.

In harness runs the approver is simulated: approve/deny drawn uniformly
at random from the trial's dedicated stream, so ticket resolution is
reproducible under a fixed seed.  The live operator path speaks the
console protocol served by console_server.py.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .registry import Risk
from .rng import Stream


class OverrideError(Exception):
    pass


class StaleTicket(OverrideError):
    """Ticket already reached a terminal status."""


class UnauthorizedOperator(OverrideError):
    """Command verb not legal under the active authority mode."""


class MalformedCommand(OverrideError):
    pass


class AuthorityMode(enum.Enum):
    APPROVAL_REQUIRED = "approval_required"
    APPROVAL_ON_ESCALATION = "approval_on_escalation"
    INTERRUPT_ENABLED = "interrupt_enabled"
    TAKEOVER_ENABLED = "takeover_enabled"
    REVIEW_ONLY = "review_only"


class TicketStatus(enum.Enum):
    PENDING = "pending"
    APPROVED = "approved"
    DENIED = "denied"
    EXPIRED = "expired"


class Verdict(enum.Enum):
    APPROVE = "approve"
    DENY = "deny"
    PAUSE = "pause"
    STOP = "stop"
    TAKEOVER = "takeover"
    RESUME = "resume"


# Verbs an operator may issue under each mode.  review_only permits
# nothing: the interface is observation-only.
LEGAL_VERBS: dict[AuthorityMode, frozenset[Verdict]] = {
    AuthorityMode.APPROVAL_REQUIRED: frozenset({Verdict.APPROVE, Verdict.DENY}),
    AuthorityMode.APPROVAL_ON_ESCALATION: frozenset({Verdict.APPROVE, Verdict.DENY}),
    AuthorityMode.INTERRUPT_ENABLED: frozenset(
        {Verdict.APPROVE, Verdict.DENY, Verdict.PAUSE, Verdict.STOP, Verdict.RESUME}
    ),
    AuthorityMode.TAKEOVER_ENABLED: frozenset(
        {Verdict.APPROVE, Verdict.DENY, Verdict.PAUSE, Verdict.STOP, Verdict.RESUME, Verdict.TAKEOVER}
    ),
    AuthorityMode.REVIEW_ONLY: frozenset(),
}


@dataclass
class AuthorityState:
    """Active human-authority configuration for one governance context."""

    mode: AuthorityMode
    active_operator: Optional[str] = None

    def verb_legal(self, verdict: Verdict) -> bool:
        return verdict in LEGAL_VERBS[self.mode]


@dataclass
class EscalationTicket:
    ticket_id: str
    session_id: Optional[str]  # None while the request is held pre-launch
    capability: str
    risk: Risk
    reason: str
    status: TicketStatus = TicketStatus.PENDING
    resolved_by: Optional[str] = None


@dataclass(frozen=True)
class HumanDecision:
    ticket_id: str
    verdict: Verdict
    operator: str
    timestamp: int  # logical tick


class OverrideGateway:
    """FIFO escalation queue plus decision application.

    Mutations are serialized through a lock so live console commands and
    the session loop can share one gateway instance.  Observers receive
    (kind, payload) tuples for ticket and decision events; the console
    server registers itself as an observer for fan-out.
    """

    def __init__(self, authority: AuthorityState):
        self.authority = authority
        self.tickets: dict[str, EscalationTicket] = {}
        self._order: list[str] = []
        self._counter = 0
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._observers: list[Callable[[str, dict[str, Any]], None]] = []

    def add_observer(self, fn: Callable[[str, dict[str, Any]], None]) -> None:
        with self._lock:
            self._observers.append(fn)

    def _notify(self, kind: str, payload: dict[str, Any]) -> None:
        for fn in list(self._observers):
            fn(kind, payload)

    def escalate(
        self,
        *,
        session_id: Optional[str],
        capability: str,
        risk: Risk,
        reason: str,
    ) -> EscalationTicket:
        with self._lock:
            self._counter += 1
            ticket = EscalationTicket(
                ticket_id=f"tk-{self._counter}",
                session_id=session_id,
                capability=capability,
                risk=risk,
                reason=reason,
            )
            self.tickets[ticket.ticket_id] = ticket
            self._order.append(ticket.ticket_id)
        self._notify("ticket", ticket_record(ticket))
        return ticket

    def pending(self) -> list[EscalationTicket]:
        with self._lock:
            return [self.tickets[t] for t in self._order if self.tickets[t].status is TicketStatus.PENDING]

    def resolve(self, ticket: EscalationTicket, decision: HumanDecision) -> EscalationTicket:
        """Apply a human decision to a pending ticket."""
        if decision.verdict not in (Verdict.APPROVE, Verdict.DENY):
            raise MalformedCommand(f"ticket resolution requires approve/deny, got {decision.verdict.value}")
        if not self.authority.verb_legal(decision.verdict):
            raise UnauthorizedOperator(
                f"verb {decision.verdict.value!r} not legal under mode {self.authority.mode.value!r}"
            )
        with self._lock:
            if ticket.status is not TicketStatus.PENDING:
                raise StaleTicket(f"ticket {ticket.ticket_id} already {ticket.status.value}")
            ticket.status = (
                TicketStatus.APPROVED if decision.verdict is Verdict.APPROVE else TicketStatus.DENIED
            )
            ticket.resolved_by = decision.operator
            self._cond.notify_all()
        self._notify("ticket", ticket_record(ticket))
        return ticket

    def expire(self, ticket: EscalationTicket) -> EscalationTicket:
        """Fail-closed path: no live authority can resolve the ticket."""
        with self._lock:
            if ticket.status is not TicketStatus.PENDING:
                raise StaleTicket(f"ticket {ticket.ticket_id} already {ticket.status.value}")
            ticket.status = TicketStatus.EXPIRED
            self._cond.notify_all()
        self._notify("ticket", ticket_record(ticket))
        return ticket

    def wait_for_terminal(self, ticket: EscalationTicket, timeout: Optional[float] = None) -> TicketStatus:
        """Block until the ticket leaves PENDING or the timeout elapses.

        On timeout the ticket is expired (fail-closed) and EXPIRED is
        returned.
        """
        with self._lock:
            ok = self._cond.wait_for(lambda: ticket.status is not TicketStatus.PENDING, timeout=timeout)
            if not ok and ticket.status is TicketStatus.PENDING:
                ticket.status = TicketStatus.EXPIRED
                self._cond.notify_all()
        if ticket.status is TicketStatus.EXPIRED:
            self._notify("ticket", ticket_record(ticket))
        return ticket.status


def simulated_approver(ticket: EscalationTicket, rng: Stream, *, clock: int = 0) -> HumanDecision:
    """Uniform approve/deny draw standing in for a live operator."""
    verdict = Verdict.APPROVE if rng.bernoulli(0.5) else Verdict.DENY
    return HumanDecision(ticket_id=ticket.ticket_id, verdict=verdict, operator="sim_approver", timestamp=clock)


def ticket_record(ticket: EscalationTicket) -> dict[str, Any]:
    """Wire/audit form of a ticket (console protocol Ticket message body)."""
    return {
        "ticket_id": ticket.ticket_id,
        "session_id": ticket.session_id,
        "capability": ticket.capability,
        "risk": ticket.risk.value,
        "reason": ticket.reason,
        "status": ticket.status.value,
    }
