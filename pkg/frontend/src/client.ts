// Duplex console connection: line framing, reconnect, state resync.
//
// On every (re)connect the client subscribes and rebuilds its read model
// from the fresh snapshot; there is no client-side inference across
// connections.  Connection loss flips a visible disconnected flag rather
// than going silently stale.

import * as net from 'node:net';

import { CommandMsg, DecisionMsg, ServerMessage, Verb, parseServerMessage } from './protocol.js';
import { ConsoleState, countProtocolError, initialState, markDisconnected, reduce } from './state.js';

export interface ClientOptions {
  host: string;
  port: number;
  operator: string;
  reconnectDelayMs?: number;
  now?: () => number;
}

type Listener = (state: ConsoleState) => void;

export class ConsoleClient {
  readonly state: ConsoleState = initialState();
  private socket: net.Socket | null = null;
  private buffer = '';
  private listeners: Listener[] = [];
  private closed = false;
  private reconnectTimer: NodeJS.Timeout | null = null;

  constructor(private readonly options: ClientOptions) {}

  onChange(fn: Listener): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn(this.state);
  }

  connect(): void {
    if (this.closed) return;
    const socket = net.createConnection({ host: this.options.host, port: this.options.port });
    this.socket = socket;
    socket.setNoDelay(true);
    socket.on('connect', () => {
      this.buffer = '';
      this.send({ type: 'subscribe', operator: this.options.operator });
    });
    socket.on('data', (chunk) => this.onData(chunk));
    const drop = () => this.onDrop();
    socket.on('error', drop);
    socket.on('close', drop);
  }

  private onDrop(): void {
    if (this.socket) {
      this.socket.removeAllListeners();
      this.socket.destroy();
      this.socket = null;
      markDisconnected(this.state);
      this.emit();
    }
    if (!this.closed && !this.reconnectTimer) {
      const delay = this.options.reconnectDelayMs ?? 500;
      this.reconnectTimer = setTimeout(() => {
        this.reconnectTimer = null;
        this.connect();
      }, delay);
    }
  }

  private onData(chunk: Buffer): void {
    this.buffer += chunk.toString('utf-8');
    let index;
    while ((index = this.buffer.indexOf('\n')) >= 0) {
      const line = this.buffer.slice(0, index).trim();
      this.buffer = this.buffer.slice(index + 1);
      if (!line) continue;
      const msg: ServerMessage | null = parseServerMessage(line);
      if (msg === null) {
        // Malformed server message: discard, count, stay consistent.
        countProtocolError(this.state);
        this.emit();
        continue;
      }
      reduce(this.state, msg, (this.options.now ?? Date.now)());
      this.emit();
    }
  }

  send(record: object): void {
    if (this.socket && !this.socket.destroyed) {
      this.socket.write(JSON.stringify(record) + '\n');
    }
  }

  decide(ticketId: string, verdict: Verb): void {
    const msg: DecisionMsg = {
      type: 'decision',
      ticket_id: ticketId,
      verdict,
      operator: this.options.operator,
    };
    this.send(msg);
  }

  command(sessionId: string, verb: Verb): void {
    const msg: CommandMsg = {
      type: 'command',
      verb,
      session_id: sessionId,
      operator: this.options.operator,
    };
    this.send(msg);
  }

  close(): void {
    this.closed = true;
    if (this.reconnectTimer) clearTimeout(this.reconnectTimer);
    if (this.socket) {
      this.socket.removeAllListeners();
      this.socket.destroy();
      this.socket = null;
    }
  }
}
