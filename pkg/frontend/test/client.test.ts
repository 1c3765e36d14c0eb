// Protocol conformance: a scripted server drives the console through
// snapshot, escalation, approve, deny, stop, reconnect; displayed state
// must equal the message-fold oracle at every step.

import { afterEach, describe, expect, it } from 'vitest';

import { ConsoleClient } from '../src/client.js';
import { ServerMessage } from '../src/protocol.js';
import { foldMessages } from '../src/state.js';
import { render } from '../src/ui.js';
import { Scripted, startScriptedServer, waitFor } from './scripted_server.js';

const NOW = 1_700_000_000_000;

function snapshotMsg(): ServerMessage {
  return {
    type: 'snapshot',
    tickets: [
      {
        ticket_id: 'tk-1',
        session_id: null,
        capability: 'transport_object',
        risk: 'high',
        reason: 'supervisory_review',
        status: 'pending',
      },
    ],
    sessions: [{ session_id: 's1', state: 'RUNNING', cause: 'launched', capability: 'grasp_object', risk: 'medium' }],
  };
}

function viewOf(client: ConsoleClient) {
  const { connected, authorityMode, pending, history, sessions, protocolErrors, lastError } = client.state;
  return JSON.stringify({ connected, authorityMode, pending, history, sessions: [...sessions], protocolErrors, lastError });
}

function oracleOf(messages: ServerMessage[], overrides: Partial<{ connected: boolean; protocolErrors: number }> = {}) {
  const folded = foldMessages(messages, NOW);
  Object.assign(folded, overrides);
  const { connected, authorityMode, pending, history, sessions, protocolErrors, lastError } = folded;
  return JSON.stringify({ connected, authorityMode, pending, history, sessions: [...sessions], protocolErrors, lastError });
}

const HELLO: ServerMessage = { type: 'hello', protocol_version: 1, authority_mode: 'interrupt_enabled' };

describe('console client against a scripted server', () => {
  let scripted: Scripted | null = null;
  let client: ConsoleClient | null = null;

  afterEach(async () => {
    client?.close();
    client = null;
    await scripted?.close();
    scripted = null;
  });

  it('walks snapshot, escalation, approve, deny, stop; state equals the fold at every step', async () => {
    scripted = await startScriptedServer((send) => send(snapshotMsg()));
    client = new ConsoleClient({ host: '127.0.0.1', port: scripted.port, operator: 'op1', now: () => NOW });
    client.connect();

    const transcript: ServerMessage[] = [HELLO, snapshotMsg()];
    await waitFor(() => client!.state.pending.length === 1);
    expect(viewOf(client)).toEqual(oracleOf(transcript));

    // Escalation streams in.
    const tk2: ServerMessage = {
      type: 'ticket', ticket_id: 'tk-2', session_id: 's1', capability: 'grasp_object',
      risk: 'medium', reason: 'proximity_incursion', status: 'pending',
    };
    scripted.send(tk2);
    transcript.push(tk2);
    await waitFor(() => client!.state.pending.length === 2);
    expect(viewOf(client)).toEqual(oracleOf(transcript));

    // Approve tk-1: server confirms; the console shows server state only.
    client.decide('tk-1', 'approve');
    await scripted.waitForMessage((m) => m.type === 'decision' && m.ticket_id === 'tk-1' && m.verdict === 'approve');
    const tk1Approved: ServerMessage = { ...(snapshotMsg() as any).tickets[0], type: 'ticket', status: 'approved' };
    scripted.send(tk1Approved);
    transcript.push(tk1Approved);
    await waitFor(() => client!.state.history.length === 1);
    expect(viewOf(client)).toEqual(oracleOf(transcript));

    // Deny tk-2.
    client.decide('tk-2', 'deny');
    await scripted.waitForMessage((m) => m.type === 'decision' && m.ticket_id === 'tk-2' && m.verdict === 'deny');
    const tk2Denied: ServerMessage = { ...(tk2 as any), status: 'denied' };
    scripted.send(tk2Denied);
    transcript.push(tk2Denied);
    await waitFor(() => client!.state.history.length === 2);
    expect(viewOf(client)).toEqual(oracleOf(transcript));

    // Stop s1: server-confirmed state transition.
    client.command('s1', 'stop');
    await scripted.waitForMessage((m) => m.type === 'command' && m.verb === 'stop' && m.session_id === 's1');
    const s1Failed: ServerMessage = { type: 'session_state', session_id: 's1', state: 'FAILED', cause: 'stopped_by_human' };
    scripted.send(s1Failed);
    transcript.push(s1Failed);
    await waitFor(() => client!.state.sessions.get('s1')?.state === 'FAILED');
    expect(viewOf(client)).toEqual(oracleOf(transcript));
    expect(render(client.state, NOW)).toContain('stopped_by_human');
  });

  it('no optimistic updates: nothing changes until the server confirms', async () => {
    scripted = await startScriptedServer((send) => send(snapshotMsg()));
    client = new ConsoleClient({ host: '127.0.0.1', port: scripted.port, operator: 'op1', now: () => NOW });
    client.connect();
    await waitFor(() => client!.state.pending.length === 1);
    client.decide('tk-1', 'approve');
    await scripted.waitForMessage((m) => m.type === 'decision');
    // Server stays silent: the ticket must still be displayed as pending.
    expect(client.state.pending.map((t) => t.ticket_id)).toEqual(['tk-1']);
    expect(client.state.pending[0].status).toBe('pending');
  });

  it('reconnects after a drop and resynchronizes from a fresh snapshot', async () => {
    let snapshotTickets = 1;
    scripted = await startScriptedServer((send) => {
      const snap = snapshotMsg() as any;
      if (snapshotTickets === 2) {
        snap.tickets.push({
          ticket_id: 'tk-99', session_id: null, capability: 'navigate_to',
          risk: 'low', reason: 'supervisory_review', status: 'pending',
        });
      }
      send(snap);
    });
    client = new ConsoleClient({ host: '127.0.0.1', port: scripted.port, operator: 'op1', reconnectDelayMs: 50, now: () => NOW });
    client.connect();
    await waitFor(() => client!.state.pending.length === 1);

    snapshotTickets = 2;
    scripted.dropClients();
    await waitFor(() => client!.state.connected === false);
    expect(render(client.state, NOW)).toContain('DISCONNECTED');

    await waitFor(() => client!.state.connected && client!.state.pending.length === 2);
    expect(client!.state.pending.map((t) => t.ticket_id)).toEqual(['tk-1', 'tk-99']);
  });

  it('discards malformed server messages and counts them', async () => {
    scripted = await startScriptedServer((send) => send(snapshotMsg()));
    client = new ConsoleClient({ host: '127.0.0.1', port: scripted.port, operator: 'op1', now: () => NOW });
    client.connect();
    await waitFor(() => client!.state.pending.length === 1);
    scripted.sendRaw('this is not json');
    scripted.sendRaw('{"type":"ticket","ticket_id":12}');
    await waitFor(() => client!.state.protocolErrors === 2);
    // Display unaffected except the counter.
    expect(viewOf(client)).toEqual(oracleOf([HELLO, snapshotMsg()], { protocolErrors: 2 }));
    expect(render(client.state, NOW)).toContain('protocol errors: 2');
  });

  it('surfaces server rejections with their reason', async () => {
    scripted = await startScriptedServer((send) => send(snapshotMsg()));
    client = new ConsoleClient({ host: '127.0.0.1', port: scripted.port, operator: 'op1', now: () => NOW });
    client.connect();
    await waitFor(() => client!.state.connected);
    scripted.send({ type: 'error', code: 'UnauthorizedOperator', detail: "verb 'stop' not legal" });
    await waitFor(() => client!.state.lastError !== null);
    expect(client.state.lastError).toContain('UnauthorizedOperator');
    expect(render(client.state, NOW)).toContain('UnauthorizedOperator');
  });
});
