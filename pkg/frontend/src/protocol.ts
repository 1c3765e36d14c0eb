// Console wire protocol: newline-delimited JSON records over TCP.
// Mirrors the server's message schemas exactly; anything that does not
// validate is discarded by the caller (and counted as a protocol error).

export const PROTOCOL_VERSION = 1;

export interface TicketMsg {
  type: 'ticket';
  ticket_id: string;
  session_id: string | null;
  capability: string;
  risk: string;
  reason: string;
  status: 'pending' | 'approved' | 'denied' | 'expired';
}

export interface SessionStateMsg {
  type: 'session_state';
  session_id: string;
  state: string;
  cause: string;
  capability?: string;
  risk?: string;
}

export interface HelloMsg {
  type: 'hello';
  protocol_version: number;
  authority_mode: string;
}

export interface SnapshotMsg {
  type: 'snapshot';
  tickets: Omit<TicketMsg, 'type'>[];
  sessions: Omit<SessionStateMsg, 'type'>[];
}

export interface AckMsg {
  type: 'ack';
  ticket_id?: string;
  session_id?: string;
  state?: string;
}

export interface ErrorMsg {
  type: 'error';
  code: string;
  detail: string;
}

export type ServerMessage = HelloMsg | SnapshotMsg | TicketMsg | SessionStateMsg | AckMsg | ErrorMsg;

export type Verb = 'approve' | 'deny' | 'pause' | 'stop' | 'resume' | 'takeover';

export interface DecisionMsg {
  type: 'decision';
  ticket_id: string;
  verdict: Verb;
  operator: string;
}

export interface CommandMsg {
  type: 'command';
  verb: Verb;
  session_id: string;
  operator: string;
}

const TICKET_STATUSES = new Set(['pending', 'approved', 'denied', 'expired']);

function isRecord(v: unknown): v is Record<string, unknown> {
  return typeof v === 'object' && v !== null && !Array.isArray(v);
}

function validTicketBody(v: unknown): boolean {
  return (
    isRecord(v) &&
    typeof v.ticket_id === 'string' &&
    typeof v.capability === 'string' &&
    typeof v.risk === 'string' &&
    typeof v.reason === 'string' &&
    typeof v.status === 'string' &&
    TICKET_STATUSES.has(v.status)
  );
}

function validSessionBody(v: unknown): boolean {
  return isRecord(v) && typeof v.session_id === 'string' && typeof v.state === 'string';
}

/** Parse one wire line into a validated server message, or null. */
export function parseServerMessage(line: string): ServerMessage | null {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return null;
  }
  if (!isRecord(raw) || typeof raw.type !== 'string') return null;
  switch (raw.type) {
    case 'hello':
      return typeof raw.protocol_version === 'number' && typeof raw.authority_mode === 'string'
        ? (raw as unknown as HelloMsg)
        : null;
    case 'snapshot':
      return Array.isArray(raw.tickets) &&
        Array.isArray(raw.sessions) &&
        raw.tickets.every(validTicketBody) &&
        raw.sessions.every(validSessionBody)
        ? (raw as unknown as SnapshotMsg)
        : null;
    case 'ticket':
      return validTicketBody(raw) ? (raw as unknown as TicketMsg) : null;
    case 'session_state':
      return validSessionBody(raw) ? (raw as unknown as SessionStateMsg) : null;
    case 'ack':
      return raw as unknown as AckMsg;
    case 'error':
      return typeof raw.code === 'string' ? (raw as unknown as ErrorMsg) : null;
    default:
      return null;
  }
}

// Verbs an operator may issue under each authority mode; mirrors the
// gateway's legality table so illegal controls are disabled client-side
// (the server still validates every command).
export const LEGAL_VERBS: Record<string, Verb[]> = {
  approval_required: ['approve', 'deny'],
  approval_on_escalation: ['approve', 'deny'],
  interrupt_enabled: ['approve', 'deny', 'pause', 'stop', 'resume'],
  takeover_enabled: ['approve', 'deny', 'pause', 'stop', 'resume', 'takeover'],
  review_only: [],
};

export function verbLegal(mode: string, verb: Verb): boolean {
  return (LEGAL_VERBS[mode] ?? []).includes(verb);
}
