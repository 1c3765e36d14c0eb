// Terminal rendering: a pure function of the read model.

import { verbLegal, Verb } from './protocol.js';
import { ConsoleState } from './state.js';

const ALL_VERBS: Verb[] = ['approve', 'deny', 'pause', 'stop', 'resume', 'takeover'];

export function render(state: ConsoleState, now = Date.now()): string {
  const lines: string[] = [];
  if (!state.connected) {
    lines.push('=== DISCONNECTED - reconnecting... (state may be stale) ===');
  }
  const mode = state.authorityMode ?? 'unknown';
  const legal = ALL_VERBS.filter((v) => verbLegal(mode, v));
  lines.push(`authority mode: ${mode}   controls: ${legal.length ? legal.join(' ') : '(review only)'}`);
  lines.push(`protocol errors: ${state.protocolErrors}`);
  if (state.lastError) lines.push(`last server rejection: ${state.lastError}`);

  lines.push('');
  lines.push(`PENDING TICKETS (${state.pending.length})`);
  if (!state.pending.length) lines.push('  (none)');
  for (const t of state.pending) {
    const waited = Math.max(0, Math.round((now - t.receivedAt) / 1000));
    lines.push(
      `  ${t.ticket_id}  ${t.capability} [${t.risk}]  reason=${t.reason}  pending ${waited}s` +
        (t.session_id ? `  session=${t.session_id}` : ''),
    );
  }

  lines.push('');
  lines.push(`SESSIONS (${state.sessions.size})`);
  if (!state.sessions.size) lines.push('  (none)');
  for (const s of state.sessions.values()) {
    lines.push(`  ${s.session_id}  ${s.capability} [${s.risk}]  ${s.state}` + (s.cause ? `  (${s.cause})` : ''));
  }

  if (state.history.length) {
    lines.push('');
    lines.push(`HISTORY (${state.history.length})`);
    for (const t of state.history.slice(-8)) {
      lines.push(`  ${t.ticket_id}  ${t.capability}  ${t.status}`);
    }
  }
  return lines.join('\n') + '\n';
}
