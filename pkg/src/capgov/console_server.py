"""Live operator endpoint: the console wire protocol.

Newline-delimited JSON records over TCP, one message per line, each
carrying a ``type`` field; the handshake message advertises
``protocol_version``.  Server-to-client messages:

  hello         {protocol_version}
  snapshot      {tickets: [Ticket...], sessions: [SessionState...]}
  ticket        Ticket{ticket_id, session_id, capability, risk, reason, status}
  session_state SessionState{session_id, state, cause}
  ack           {ticket_id | session_id}
  error         {code, detail}

Client-to-server:

  subscribe     {operator}
  decision      Decision{ticket_id, verdict, operator}
  command       {verb, session_id, operator}

Every command is validated against the gateway's authority state before
any effect; rejected commands produce an error record and no state
change.  The console is an authority *surface*: it can cause state
changes only through these validated messages.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .override import (
    MalformedCommand,
    OverrideGateway,
    StaleTicket,
    UnauthorizedOperator,
    Verdict,
    HumanDecision,
    ticket_record,
)

PROTOCOL_VERSION = 1


class BindFailure(Exception):
    pass


@dataclass
class SessionView:
    """Server-side record of one session shown to operators."""

    session_id: str
    capability: str
    risk: str
    state: str
    cause: str = ""

    def record(self) -> dict[str, Any]:
        return {
            "session_id": self.session_id,
            "state": self.state,
            "cause": self.cause,
            "capability": self.capability,
            "risk": self.risk,
        }


class SessionDirectory:
    """Mutable registry of live sessions the server publishes.

    ``controller`` is invoked for validated operator commands
    (verb, session_id) and returns the new state string, raising
    MalformedCommand for unknown sessions.
    """

    def __init__(self, controller: Optional[Callable[[str, str], str]] = None):
        self._sessions: dict[str, SessionView] = {}
        self._lock = threading.Lock()
        self._controller = controller
        self._observers: list[Callable[[dict[str, Any]], None]] = []

    def add_observer(self, fn: Callable[[dict[str, Any]], None]) -> None:
        self._observers.append(fn)

    def upsert(self, view: SessionView) -> None:
        with self._lock:
            self._sessions[view.session_id] = view
        for fn in list(self._observers):
            fn(view.record())

    def set_state(self, session_id: str, state: str, cause: str) -> None:
        with self._lock:
            view = self._sessions.get(session_id)
            if view is None:
                return
            view.state = state
            view.cause = cause
            rec = view.record()
        for fn in list(self._observers):
            fn(rec)

    def snapshot(self) -> list[dict[str, Any]]:
        with self._lock:
            return [v.record() for v in self._sessions.values()]

    def apply_command(self, verb: str, session_id: str) -> str:
        if self._controller is None:
            raise MalformedCommand("no session controller attached")
        with self._lock:
            if session_id not in self._sessions:
                raise MalformedCommand(f"unknown session {session_id!r}")
        return self._controller(verb, session_id)


class _ClientHandler(socketserver.StreamRequestHandler):
    def _lines(self):
        # Abrupt client disconnects are ordinary; treat them as EOF.
        try:
            yield from self.rfile
        except (ConnectionResetError, OSError):
            return

    def handle(self) -> None:
        server: ConsoleServer = self.server.console  # type: ignore[attr-defined]
        send_lock = threading.Lock()

        def send(record: dict[str, Any]) -> None:
            line = json.dumps(record, sort_keys=True) + "\n"
            with send_lock:
                try:
                    self.wfile.write(line.encode("utf-8"))
                    self.wfile.flush()
                except OSError:
                    pass

        server._register_sink(send)
        try:
            send(
                {
                    "type": "hello",
                    "protocol_version": PROTOCOL_VERSION,
                    "authority_mode": server.gateway.authority.mode.value,
                }
            )
            for raw in self._lines():
                raw = raw.strip()
                if not raw:
                    continue
                try:
                    msg = json.loads(raw.decode("utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError):
                    send({"type": "error", "code": "MalformedCommand", "detail": "unparseable message"})
                    continue
                mtype = msg.get("type")
                if mtype == "subscribe":
                    send(
                        {
                            "type": "snapshot",
                            "tickets": [ticket_record(t) for t in server.gateway.pending()],
                            "sessions": server.sessions.snapshot(),
                        }
                    )
                elif mtype == "decision":
                    server._handle_decision(msg, send)
                elif mtype == "command":
                    server._handle_command(msg, send)
                else:
                    send({"type": "error", "code": "MalformedCommand", "detail": f"unknown type {mtype!r}"})
        finally:
            server._unregister_sink(send)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ConsoleServer:
    """Serves the console protocol for one gateway + session directory."""

    def __init__(self, gateway: OverrideGateway, sessions: Optional[SessionDirectory] = None):
        self.gateway = gateway
        self.sessions = sessions or SessionDirectory()
        self._sinks: list[Callable[[dict[str, Any]], None]] = []
        self._sink_lock = threading.Lock()
        self._tcp: Optional[_ThreadingServer] = None
        self._thread: Optional[threading.Thread] = None
        gateway.add_observer(self._on_gateway_event)
        self.sessions.add_observer(self._on_session_event)

    # -- fan-out -----------------------------------------------------------

    def _register_sink(self, sink) -> None:
        with self._sink_lock:
            self._sinks.append(sink)

    def _unregister_sink(self, sink) -> None:
        with self._sink_lock:
            if sink in self._sinks:
                self._sinks.remove(sink)

    def _broadcast(self, record: dict[str, Any]) -> None:
        with self._sink_lock:
            sinks = list(self._sinks)
        for sink in sinks:
            sink(record)

    def _on_gateway_event(self, kind: str, payload: dict[str, Any]) -> None:
        if kind == "ticket":
            self._broadcast({"type": "ticket", **payload})

    def _on_session_event(self, payload: dict[str, Any]) -> None:
        self._broadcast({"type": "session_state", **payload})

    # -- command handling ----------------------------------------------------

    def _handle_decision(self, msg: dict[str, Any], send) -> None:
        ticket_id = msg.get("ticket_id")
        verdict_raw = msg.get("verdict")
        operator = msg.get("operator", "")
        ticket = self.gateway.tickets.get(ticket_id or "")
        if ticket is None or verdict_raw is None:
            send({"type": "error", "code": "MalformedCommand", "detail": f"unknown ticket {ticket_id!r}"})
            return
        try:
            verdict = Verdict(verdict_raw)
        except ValueError:
            send({"type": "error", "code": "MalformedCommand", "detail": f"unknown verdict {verdict_raw!r}"})
            return
        try:
            self.gateway.resolve(
                ticket, HumanDecision(ticket_id=ticket.ticket_id, verdict=verdict, operator=operator, timestamp=0)
            )
        except UnauthorizedOperator as exc:
            send({"type": "error", "code": "UnauthorizedOperator", "detail": str(exc)})
            return
        except StaleTicket as exc:
            send({"type": "error", "code": "StaleTicket", "detail": str(exc)})
            return
        except MalformedCommand as exc:
            send({"type": "error", "code": "MalformedCommand", "detail": str(exc)})
            return
        send({"type": "ack", "ticket_id": ticket.ticket_id})

    def _handle_command(self, msg: dict[str, Any], send) -> None:
        verb_raw = msg.get("verb")
        session_id = msg.get("session_id")
        try:
            verdict = Verdict(verb_raw)
        except ValueError:
            send({"type": "error", "code": "MalformedCommand", "detail": f"unknown verb {verb_raw!r}"})
            return
        if not self.gateway.authority.verb_legal(verdict):
            send(
                {
                    "type": "error",
                    "code": "UnauthorizedOperator",
                    "detail": f"verb {verdict.value!r} not legal under mode "
                    f"{self.gateway.authority.mode.value!r}",
                }
            )
            return
        try:
            new_state = self.sessions.apply_command(verdict.value, session_id or "")
        except MalformedCommand as exc:
            send({"type": "error", "code": "MalformedCommand", "detail": str(exc)})
            return
        send({"type": "ack", "session_id": session_id, "state": new_state})

    # -- lifecycle -------------------------------------------------------------

    def serve(self, host: str = "127.0.0.1", port: int = 8787) -> tuple[str, int]:
        """Bind and serve in a background thread; returns the bound address."""
        try:
            self._tcp = _ThreadingServer((host, port), _ClientHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._tcp.console = self  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._thread.start()
        return self._tcp.server_address[0], self._tcp.server_address[1]

    def shutdown(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None
