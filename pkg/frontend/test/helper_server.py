"""Test fixture: real governance gateway + console server on a free port.

Starts a review-only gateway holding one pending ticket and one RUNNING
session, prints "PORT <n>" and the session state on demand, then exits
when stdin closes.  Used by the authority-bypass test to confirm that
illegal verbs are rejected by the real gateway with no state change.
"""

import sys

from capgov.console_server import ConsoleServer, SessionDirectory, SessionView
from capgov.governance import GovernanceContext
from capgov.override import AuthorityMode, AuthorityState, MalformedCommand, OverrideGateway
from capgov.registry import Risk, load_default_registry
from capgov.session import GovernedSession, IllegalTransition, SessionEvent, SessionState


def main() -> None:
    mode = AuthorityMode(sys.argv[1]) if len(sys.argv) > 1 else AuthorityMode.REVIEW_ONLY
    reg = load_default_registry()
    ctx = GovernanceContext(
        profile=reg.profile("human_shared"),
        policy_set=reg.policy_set("human_shared"),
        registry=reg,
    )
    session = GovernedSession("s-live-1", "grasp_object", {}, ctx)
    sessions = {"s-live-1": session}

    def controller(verb: str, session_id: str) -> str:
        target = sessions[session_id]
        event = {
            "pause": SessionEvent.PAUSE,
            "resume": SessionEvent.RESUME,
            "stop": SessionEvent.STOP,
        }.get(verb)
        if event is None:
            raise MalformedCommand(f"verb {verb!r} unsupported")
        try:
            target.transition(event)
        except IllegalTransition as exc:
            raise MalformedCommand(str(exc)) from exc
        if target.state is SessionState.FAILED:
            target.finish("stopped_by_human", 0)
        directory.set_state(session_id, target.state.value, f"operator_{verb}")
        return target.state.value

    gateway = OverrideGateway(AuthorityState(mode))
    directory = SessionDirectory(controller=controller)
    directory.upsert(
        SessionView(session_id="s-live-1", capability="grasp_object", risk="medium", state="RUNNING")
    )
    gateway.escalate(
        session_id=None, capability="transport_object", risk=Risk.HIGH, reason="supervisory_review"
    )
    server = ConsoleServer(gateway, directory)
    host, port = server.serve(port=0)
    print(f"PORT {port}", flush=True)

    for line in sys.stdin:
        if line.strip() == "state":
            print(f"STATE {session.state.value}", flush=True)
    server.shutdown()
    print(f"FINAL {session.state.value}", flush=True)


if __name__ == "__main__":
    main()
