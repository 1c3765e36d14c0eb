"""Long-running governance endpoint backing the live operator console.

Drives a simple continuous scenario: requests for medium/high-risk
capabilities arrive in the human-shared profile, escalate for approval,
and (once approved) run as monitored sessions the operator can pause,
resume, or stop.  Tickets not resolved within the configured timeout are
expired and the request is refused: the gateway fails closed.

Shutdown drives every live session to a terminal state before the
process exits.
"""

from __future__ import annotations

import threading
import time
from typing import Optional

from .console_server import ConsoleServer, SessionDirectory, SessionView
from .governance import GovernanceContext
from .harness import RunConfig, load_registry_for
from .override import (
    AuthorityMode,
    AuthorityState,
    MalformedCommand,
    OverrideGateway,
    TicketStatus,
)
from .session import GovernedSession, IllegalTransition, SessionEvent, SessionState


class LiveRuntime:
    def __init__(self, config: RunConfig, *, ticket_timeout: float = 300.0, scenario_period: float = 2.0):
        self.config = config
        self.registry = load_registry_for(config)
        self.ticket_timeout = ticket_timeout
        self.scenario_period = scenario_period
        self.gateway = OverrideGateway(AuthorityState(AuthorityMode.INTERRUPT_ENABLED))
        self.sessions = SessionDirectory(controller=self._apply_command)
        self.server = ConsoleServer(self.gateway, self.sessions)
        self._live: dict[str, GovernedSession] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._counter = 0

    # -- operator command path ----------------------------------------------

    def _apply_command(self, verb: str, session_id: str) -> str:
        with self._lock:
            session = self._live.get(session_id)
        if session is None:
            raise MalformedCommand(f"unknown session {session_id!r}")
        event = {
            "pause": SessionEvent.PAUSE,
            "resume": SessionEvent.RESUME,
            "stop": SessionEvent.STOP,
            "approve": SessionEvent.CLEARANCE,
            "deny": SessionEvent.STOP,
            "takeover": SessionEvent.STOP,
        }.get(verb)
        if event is None:
            raise MalformedCommand(f"verb {verb!r} has no session effect")
        try:
            session.transition(event)
        except IllegalTransition as exc:
            raise MalformedCommand(str(exc)) from exc
        if session.state is SessionState.FAILED:
            session.finish("stopped_by_human", 0)
        self.sessions.set_state(session.session_id, session.state.value, f"operator_{verb}")
        return session.state.value

    # -- scenario loop ---------------------------------------------------------

    def _scenario_loop(self) -> None:
        profile = self.registry.profile("human_shared")
        ctx = GovernanceContext(
            profile=profile,
            policy_set=self.registry.policy_set("human_shared"),
            registry=self.registry,
            authority_state=self.gateway.authority,
        )
        capabilities = ["grasp_object", "transport_object"]
        while not self._stop.is_set():
            self._counter += 1
            capability = capabilities[self._counter % 2]
            manifest = self.registry.capabilities[capability]
            ticket = self.gateway.escalate(
                session_id=None, capability=capability, risk=manifest.risk, reason="supervisory_review"
            )
            status = self.gateway.wait_for_terminal(ticket, timeout=self.ticket_timeout)
            if self._stop.is_set():
                break
            if status is TicketStatus.APPROVED:
                session = GovernedSession(
                    session_id=f"live-{self._counter}",
                    capability=capability,
                    final_params={},
                    ctx=ctx,
                )
                with self._lock:
                    self._live[session.session_id] = session
                self.sessions.upsert(
                    SessionView(
                        session_id=session.session_id,
                        capability=capability,
                        risk=manifest.risk.value,
                        state=session.state.value,
                        cause="launched",
                    )
                )
                deadline = time.monotonic() + 10.0
                while not self._stop.is_set() and time.monotonic() < deadline:
                    if session.terminal:
                        break
                    time.sleep(0.1)
                if not session.terminal and session.state is SessionState.RUNNING:
                    session.transition(SessionEvent.COMPLETE)
                    session.finish("completed", 0)
                    self.sessions.set_state(session.session_id, session.state.value, "completed")
            self._stop.wait(self.scenario_period)

    # -- lifecycle ----------------------------------------------------------------

    def start(self, host: str, port: int) -> tuple[str, int]:
        addr = self.server.serve(host, port)
        self._thread = threading.Thread(target=self._scenario_loop, daemon=True)
        self._thread.start()
        return addr

    def shutdown(self) -> None:
        """Fail closed: expire pending tickets, stop live sessions."""
        self._stop.set()
        for ticket in self.gateway.pending():
            try:
                self.gateway.expire(ticket)
            except Exception:
                pass
        with self._lock:
            sessions = list(self._live.values())
        for session in sessions:
            if not session.terminal:
                if session.state is not SessionState.FAILED:
                    try:
                        session.transition(SessionEvent.STOP)
                    except IllegalTransition:
                        pass
                if session.state is SessionState.FAILED and session.outcome is None:
                    session.finish("stopped_by_shutdown", 0)
                self.sessions.set_state(session.session_id, session.state.value, "stopped_by_shutdown")
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self.server.shutdown()
