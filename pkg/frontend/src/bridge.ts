/** Bridge client: one WebSocket to the gateway, auto-reconnect with
 * exponential backoff, query sending. All gateway interaction goes through
 * here; the UI never touches the media ports. */

import { BridgeEvent, isBridgeEvent } from "./types.js";

export interface WebSocketLike {
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  send(data: string): void;
  close(): void;
}

export type WsFactory = (url: string) => WebSocketLike;

export interface ConnectionStatus {
  state: "connecting" | "open" | "reconnecting" | "closed";
  attempt: number;
  nextDelayMs: number | null;
}

export interface BridgeOptions {
  url: string;
  onEvent: (event: BridgeEvent) => void;
  onStatus?: (status: ConnectionStatus) => void;
  wsFactory?: WsFactory;
  baseDelayMs?: number;
  maxDelayMs?: number;
}

export function backoffDelayMs(attempt: number, baseMs = 500, maxMs = 10_000): number {
  return Math.min(maxMs, baseMs * 2 ** attempt);
}

export class BridgeClient {
  private ws: WebSocketLike | null = null;
  private attempt = 0;
  private closedByUser = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;
  private queryCounter = 0;
  status: ConnectionStatus = { state: "closed", attempt: 0, nextDelayMs: null };

  constructor(private readonly options: BridgeOptions) {}

  connect(): void {
    this.closedByUser = false;
    this.open();
  }

  private factory(): WsFactory {
    if (this.options.wsFactory) return this.options.wsFactory;
    return (url) => new WebSocket(url) as unknown as WebSocketLike;
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status;
    this.options.onStatus?.(status);
  }

  private open(): void {
    this.setStatus({
      state: this.attempt === 0 ? "connecting" : "reconnecting",
      attempt: this.attempt,
      nextDelayMs: null,
    });
    let ws: WebSocketLike;
    try {
      ws = this.factory()(this.options.url);
    } catch {
      this.scheduleReconnect();
      return;
    }
    this.ws = ws;
    ws.onopen = () => {
      this.attempt = 0;
      this.setStatus({ state: "open", attempt: 0, nextDelayMs: null });
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      let parsed: unknown;
      try {
        parsed = JSON.parse(ev.data);
      } catch {
        return;
      }
      if (isBridgeEvent(parsed)) this.options.onEvent(parsed);
    };
    ws.onerror = () => {
      /* the close handler drives reconnection */
    };
    ws.onclose = () => {
      this.ws = null;
      if (!this.closedByUser) this.scheduleReconnect();
    };
  }

  private scheduleReconnect(): void {
    const delay = backoffDelayMs(
      this.attempt,
      this.options.baseDelayMs ?? 500,
      this.options.maxDelayMs ?? 10_000,
    );
    this.attempt += 1;
    this.setStatus({ state: "reconnecting", attempt: this.attempt, nextDelayMs: delay });
    this.reconnectTimer = setTimeout(() => this.open(), delay);
  }

  get connected(): boolean {
    return this.status.state === "open";
  }

  /** Send an operator query; returns its query_id. Throws when offline. */
  sendQuery(text: string, qtype = "free_form", choices: string[] | null = null): string {
    if (!this.ws || this.status.state !== "open") {
      throw new Error("bridge is not connected");
    }
    const queryId = `op-ui-${++this.queryCounter}`;
    this.ws.send(
      JSON.stringify({ type: "query", query_id: queryId, text, qtype, choices }),
    );
    return queryId;
  }

  close(): void {
    this.closedByUser = true;
    if (this.reconnectTimer !== null) clearTimeout(this.reconnectTimer);
    this.ws?.close();
    this.ws = null;
    this.setStatus({ state: "closed", attempt: this.attempt, nextDelayMs: null });
  }
}
