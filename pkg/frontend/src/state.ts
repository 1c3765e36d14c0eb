// Console read model: a pure fold over server messages.
//
// The console holds no policy logic and performs no optimistic
// updates: displayed state is exactly the fold of the messages received
// so far, which makes rendering fidelity testable headlessly.

import { ServerMessage, SessionStateMsg, TicketMsg } from './protocol.js';

export interface TicketView {
  ticket_id: string;
  session_id: string | null;
  capability: string;
  risk: string;
  reason: string;
  status: string;
  receivedAt: number; // ms epoch when first seen pending
}

export interface SessionView {
  session_id: string;
  capability: string;
  risk: string;
  state: string;
  cause: string;
  lastSignal: string;
}

export interface ConsoleState {
  connected: boolean;
  protocolVersion: number | null;
  authorityMode: string | null;
  pending: TicketView[]; // FIFO, pending only
  history: TicketView[]; // terminal tickets, never editable
  sessions: Map<string, SessionView>;
  protocolErrors: number;
  lastError: string | null;
  lastAck: string | null;
}

export function initialState(): ConsoleState {
  return {
    connected: false,
    protocolVersion: null,
    authorityMode: null,
    pending: [],
    history: [],
    sessions: new Map(),
    protocolErrors: 0,
    lastError: null,
    lastAck: null,
  };
}

function ticketView(t: Omit<TicketMsg, 'type'>, now: number): TicketView {
  return {
    ticket_id: t.ticket_id,
    session_id: t.session_id ?? null,
    capability: t.capability,
    risk: t.risk,
    reason: t.reason,
    status: t.status,
    receivedAt: now,
  };
}

function sessionView(s: Omit<SessionStateMsg, 'type'>): SessionView {
  return {
    session_id: s.session_id,
    capability: s.capability ?? '',
    risk: s.risk ?? '',
    state: s.state,
    cause: s.cause ?? '',
    lastSignal: s.cause ?? '',
  };
}

function applyTicket(state: ConsoleState, t: Omit<TicketMsg, 'type'>, now: number): void {
  const existing = state.pending.findIndex((p) => p.ticket_id === t.ticket_id);
  if (t.status === 'pending') {
    if (existing === -1) state.pending.push(ticketView(t, now));
    else state.pending[existing] = { ...state.pending[existing], ...ticketView(t, state.pending[existing].receivedAt) };
    return;
  }
  // Terminal: move out of the live pane into history.
  const view = existing === -1 ? ticketView(t, now) : { ...state.pending[existing], status: t.status };
  if (existing !== -1) state.pending.splice(existing, 1);
  state.history.push(view);
}

/** Fold one server message into the state (mutates and returns it). */
export function reduce(state: ConsoleState, msg: ServerMessage, now = 0): ConsoleState {
  switch (msg.type) {
    case 'hello':
      state.connected = true;
      state.protocolVersion = msg.protocol_version;
      state.authorityMode = msg.authority_mode;
      return state;
    case 'snapshot':
      // Fresh authoritative snapshot: replaces live panes, keeps history.
      state.pending = [];
      state.sessions = new Map();
      for (const t of msg.tickets) applyTicket(state, t, now);
      for (const s of msg.sessions) state.sessions.set(s.session_id, sessionView(s));
      return state;
    case 'ticket':
      applyTicket(state, msg, now);
      return state;
    case 'session_state': {
      const prior = state.sessions.get(msg.session_id);
      const next = sessionView(msg);
      if (prior) {
        next.capability = msg.capability ?? prior.capability;
        next.risk = msg.risk ?? prior.risk;
      }
      state.sessions.set(msg.session_id, next);
      return state;
    }
    case 'ack':
      state.lastAck = msg.ticket_id ?? msg.session_id ?? 'ok';
      return state;
    case 'error':
      state.lastError = `${msg.code}: ${msg.detail}`;
      return state;
  }
}

export function markDisconnected(state: ConsoleState): ConsoleState {
  state.connected = false;
  return state;
}

export function countProtocolError(state: ConsoleState): ConsoleState {
  state.protocolErrors += 1;
  return state;
}

/** Fold a whole message sequence from scratch (the test oracle). */
export function foldMessages(messages: ServerMessage[], now = 0): ConsoleState {
  const state = initialState();
  for (const msg of messages) reduce(state, msg, now);
  return state;
}
