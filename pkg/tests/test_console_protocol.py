"""Console wire protocol: snapshot-then-stream, commands, authority gating."""

import json
import socket
import time

import pytest

from capgov.console_server import BindFailure, ConsoleServer, SessionDirectory, SessionView
from capgov.override import (
    AuthorityMode,
    AuthorityState,
    MalformedCommand,
    OverrideGateway,
)
from capgov.registry import Risk
from capgov.session import GovernedSession, IllegalTransition, SessionEvent, SessionState


class Client:
    def __init__(self, host, port):
        self.sock = socket.create_connection((host, port), timeout=5)
        self.file = self.sock.makefile("rwb")

    def send(self, record):
        self.file.write((json.dumps(record) + "\n").encode())
        self.file.flush()

    def send_raw(self, raw: bytes):
        self.file.write(raw)
        self.file.flush()

    def recv(self, timeout=5.0):
        self.sock.settimeout(timeout)
        line = self.file.readline()
        if not line:
            raise EOFError("server closed")
        return json.loads(line)

    def recv_until(self, mtype, limit=20):
        for _ in range(limit):
            msg = self.recv()
            if msg["type"] == mtype:
                return msg
        raise AssertionError(f"no {mtype} message")

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def make_server(mode=AuthorityMode.INTERRUPT_ENABLED):
    gateway = OverrideGateway(AuthorityState(mode))
    sessions = {}

    def controller(verb, session_id):
        session = sessions[session_id]
        event = {
            "pause": SessionEvent.PAUSE,
            "resume": SessionEvent.RESUME,
            "stop": SessionEvent.STOP,
        }.get(verb)
        if event is None:
            raise MalformedCommand(f"verb {verb!r} unsupported")
        try:
            session.transition(event)
        except IllegalTransition as exc:
            raise MalformedCommand(str(exc)) from exc
        if session.state is SessionState.FAILED:
            session.finish("stopped_by_human", 0)
        directory.set_state(session_id, session.state.value, f"operator_{verb}")
        return session.state.value

    directory = SessionDirectory(controller=controller)
    server = ConsoleServer(gateway, directory)
    host, port = server.serve(port=0)
    return server, gateway, directory, sessions, host, port


def add_session(directory, sessions, sid="s-live-1"):
    from capgov.governance import GovernanceContext
    from capgov.registry import PolicySet, load_default_registry

    reg = load_default_registry()
    ctx = GovernanceContext(
        profile=reg.profile("human_shared"),
        policy_set=reg.policy_set("human_shared"),
        registry=reg,
    )
    session = GovernedSession(sid, "grasp_object", {}, ctx)
    sessions[sid] = session
    directory.upsert(SessionView(session_id=sid, capability="grasp_object", risk="medium", state="RUNNING"))
    return session


def test_snapshot_then_stream():
    server, gateway, directory, sessions, host, port = make_server()
    try:
        ticket = gateway.escalate(session_id=None, capability="transport_object", risk=Risk.HIGH,
                                  reason="supervisory_review")
        client = Client(host, port)
        assert client.recv()["type"] == "hello"
        client.send({"type": "subscribe", "operator": "op1"})
        snap = client.recv_until("snapshot")
        assert [t["ticket_id"] for t in snap["tickets"]] == [ticket.ticket_id]
        # New escalations stream in after the snapshot.
        t2 = gateway.escalate(session_id=None, capability="grasp_object", risk=Risk.MEDIUM,
                              reason="proximity_incursion")
        msg = client.recv_until("ticket")
        assert msg["ticket_id"] == t2.ticket_id and msg["status"] == "pending"
        client.close()
    finally:
        server.shutdown()


def test_approve_flow_acks_and_broadcasts():
    server, gateway, directory, sessions, host, port = make_server()
    try:
        ticket = gateway.escalate(session_id=None, capability="transport_object", risk=Risk.HIGH,
                                  reason="supervisory_review")
        client = Client(host, port)
        client.recv()  # hello
        client.send({"type": "subscribe", "operator": "op1"})
        client.recv_until("snapshot")
        client.send({"type": "decision", "ticket_id": ticket.ticket_id, "verdict": "approve", "operator": "op1"})
        statuses = set()
        for _ in range(3):
            msg = client.recv()
            if msg["type"] == "ticket":
                statuses.add(msg["status"])
            if msg["type"] == "ack":
                break
        assert ticket.status.value == "approved"
        assert ticket.resolved_by == "op1"
        client.close()
    finally:
        server.shutdown()


def test_stop_running_session_under_interrupt_enabled():
    server, gateway, directory, sessions, host, port = make_server(AuthorityMode.INTERRUPT_ENABLED)
    try:
        session = add_session(directory, sessions)
        client = Client(host, port)
        client.recv()
        client.send({"type": "subscribe", "operator": "op1"})
        client.recv_until("snapshot")
        client.send({"type": "command", "verb": "stop", "session_id": session.session_id, "operator": "op1"})
        ack = client.recv_until("ack")
        assert ack["state"] == "FAILED"
        assert session.state is SessionState.FAILED
        assert session.outcome == "stopped_by_human"
        client.close()
    finally:
        server.shutdown()


def test_stop_under_review_only_rejected_no_state_change():
    server, gateway, directory, sessions, host, port = make_server(AuthorityMode.REVIEW_ONLY)
    try:
        session = add_session(directory, sessions)
        client = Client(host, port)
        client.recv()
        client.send({"type": "subscribe", "operator": "op1"})
        client.recv_until("snapshot")
        client.send({"type": "command", "verb": "stop", "session_id": session.session_id, "operator": "op1"})
        err = client.recv_until("error")
        assert err["code"] == "UnauthorizedOperator"
        assert session.state is SessionState.RUNNING  # no state change
        client.close()
    finally:
        server.shutdown()


def test_every_illegal_verb_rejected_at_protocol_level():
    # Authority-bypass check: under approval_on_escalation only
    # approve/deny are legal; every other verb is rejected and no session
    # state changes.
    server, gateway, directory, sessions, host, port = make_server(AuthorityMode.APPROVAL_ON_ESCALATION)
    try:
        session = add_session(directory, sessions)
        client = Client(host, port)
        client.recv()
        client.send({"type": "subscribe", "operator": "op1"})
        client.recv_until("snapshot")
        for verb in ("pause", "stop", "resume", "takeover"):
            client.send({"type": "command", "verb": verb, "session_id": session.session_id, "operator": "op1"})
            err = client.recv_until("error")
            assert err["code"] == "UnauthorizedOperator", verb
            assert session.state is SessionState.RUNNING
        client.close()
    finally:
        server.shutdown()


def test_malformed_message_and_unknown_verdict():
    server, gateway, directory, sessions, host, port = make_server()
    try:
        client = Client(host, port)
        client.recv()
        client.send_raw(b"this is not json\n")
        assert client.recv_until("error")["code"] == "MalformedCommand"
        client.send({"type": "decision", "ticket_id": "tk-404", "verdict": "approve", "operator": "op"})
        assert client.recv_until("error")["code"] == "MalformedCommand"
        client.send({"type": "frobnicate"})
        assert client.recv_until("error")["code"] == "MalformedCommand"
        client.close()
    finally:
        server.shutdown()


def test_stale_ticket_resolution_rejected():
    server, gateway, directory, sessions, host, port = make_server()
    try:
        ticket = gateway.escalate(session_id=None, capability="grasp_object", risk=Risk.MEDIUM, reason="x")
        from capgov.override import HumanDecision, Verdict

        gateway.resolve(ticket, HumanDecision(ticket.ticket_id, Verdict.DENY, "op0", 0))
        client = Client(host, port)
        client.recv()
        client.send({"type": "decision", "ticket_id": ticket.ticket_id, "verdict": "approve", "operator": "op1"})
        assert client.recv_until("error")["code"] == "StaleTicket"
        client.close()
    finally:
        server.shutdown()


def test_bind_failure_on_occupied_port():
    server, gateway, directory, sessions, host, port = make_server()
    try:
        other = ConsoleServer(OverrideGateway(AuthorityState(AuthorityMode.INTERRUPT_ENABLED)))
        with pytest.raises(BindFailure):
            other.serve(host=host, port=port)
    finally:
        server.shutdown()


def test_live_runtime_shutdown_drives_sessions_terminal():
    from capgov.harness import RunConfig
    from capgov.live import LiveRuntime

    runtime = LiveRuntime(RunConfig(), ticket_timeout=5.0, scenario_period=0.05)
    host, port = runtime.start("127.0.0.1", 0)
    client = Client(host, port)
    client.recv()
    client.send({"type": "subscribe", "operator": "op1"})
    snap = client.recv_until("snapshot")
    # Approve pending tickets until the launched session streams in.
    for t in snap["tickets"]:
        client.send({"type": "decision", "ticket_id": t["ticket_id"], "verdict": "approve", "operator": "op1"})
    saw_running = False
    deadline = time.monotonic() + 5.0
    while not saw_running and time.monotonic() < deadline:
        msg = client.recv()
        if msg["type"] == "ticket" and msg["status"] == "pending":
            client.send({"type": "decision", "ticket_id": msg["ticket_id"], "verdict": "approve", "operator": "op1"})
        if msg["type"] == "session_state" and msg["state"] == "RUNNING":
            saw_running = True
    assert saw_running
    runtime.shutdown()
    assert runtime._live
    for session in runtime._live.values():
        assert session.terminal
    client.close()
