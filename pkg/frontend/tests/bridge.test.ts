import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { BridgeClient, backoffDelayMs, type WebSocketLike } from "../src/bridge.js";
import type { BridgeEvent } from "../src/types.js";

class FakeSocket implements WebSocketLike {
  onopen: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: ((ev?: unknown) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  sent: string[] = [];
  closed = false;

  send(data: string): void {
    this.sent.push(data);
  }
  close(): void {
    this.closed = true;
    this.onclose?.();
  }
  // test controls
  serverOpen(): void {
    this.onopen?.();
  }
  serverSend(obj: unknown): void {
    this.onmessage?.({ data: JSON.stringify(obj) });
  }
  serverDrop(): void {
    this.onclose?.();
  }
}

function harness(opts: { baseDelayMs?: number } = {}) {
  const sockets: FakeSocket[] = [];
  const events: BridgeEvent[] = [];
  const statuses: string[] = [];
  const client = new BridgeClient({
    url: "ws://test/v1/bridge",
    wsFactory: () => {
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    },
    onEvent: (e) => events.push(e),
    onStatus: (s) => statuses.push(s.state),
    baseDelayMs: opts.baseDelayMs ?? 500,
  });
  return { client, sockets, events, statuses };
}

describe("backoffDelayMs", () => {
  it("doubles per attempt and caps", () => {
    expect([0, 1, 2, 3, 4, 5, 10].map((a) => backoffDelayMs(a))).toEqual([
      500, 1000, 2000, 4000, 8000, 10000, 10000,
    ]);
  });
});

describe("BridgeClient", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("dispatches parsed bridge events", () => {
    const { client, sockets, events } = harness();
    client.connect();
    sockets[0].serverOpen();
    sockets[0].serverSend({ kind: "answer", payload: { query_id: "q" }, server_ts_us: 1 });
    sockets[0].serverSend({ not: "a bridge event" });
    sockets[0].serverSend({ kind: "bogus", payload: {}, server_ts_us: 2 });
    expect(events).toHaveLength(1);
    expect(events[0].kind).toBe("answer");
    client.close();
  });

  it("sendQuery writes the query message with an id", () => {
    const { client, sockets } = harness();
    client.connect();
    sockets[0].serverOpen();
    const id = client.sendQuery("is anyone there?");
    const sent = JSON.parse(sockets[0].sent[0]);
    expect(sent).toMatchObject({ type: "query", text: "is anyone there?", query_id: id });
    client.close();
  });

  it("sendQuery throws while disconnected", () => {
    const { client } = harness();
    client.connect(); // socket created but never opened
    expect(() => client.sendQuery("hello")).toThrow();
    client.close();
  });

  it("reconnects with exponential backoff after a drop", () => {
    const { client, sockets, statuses } = harness();
    client.connect();
    sockets[0].serverOpen();
    expect(client.status.state).toBe("open");

    sockets[0].serverDrop();
    expect(client.status.state).toBe("reconnecting");
    expect(client.status.nextDelayMs).toBe(500);
    expect(sockets).toHaveLength(1);

    vi.advanceTimersByTime(499);
    expect(sockets).toHaveLength(1);
    vi.advanceTimersByTime(1);
    expect(sockets).toHaveLength(2); // second dial after 500 ms

    sockets[1].serverDrop(); // fails again -> 1000 ms
    expect(client.status.nextDelayMs).toBe(1000);
    vi.advanceTimersByTime(1000);
    expect(sockets).toHaveLength(3);

    sockets[2].serverOpen(); // recovery resets the backoff
    expect(client.status.state).toBe("open");
    expect(client.status.attempt).toBe(0);
    sockets[2].serverDrop();
    expect(client.status.nextDelayMs).toBe(500);
    expect(statuses).toContain("reconnecting");
    client.close();
  });

  it("close() stops reconnecting", () => {
    const { client, sockets } = harness();
    client.connect();
    sockets[0].serverOpen();
    client.close();
    expect(client.status.state).toBe("closed");
    vi.advanceTimersByTime(60_000);
    expect(sockets).toHaveLength(1);
  });
});
