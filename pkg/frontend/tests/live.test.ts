/** Live acceptance against the real gateway: operator query round-trips to
 * an answer bubble showing the server's e2e_ms verbatim, the frame panel
 * updates, and killing the bridge flips the client into its reconnect
 * state. Spawns the Python components from the parent package. */

import { spawn, type ChildProcessWithoutNullStreams } from "node:child_process";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, describe, expect, it } from "vitest";
import WsWebSocket from "ws";

import { BridgeClient, type WebSocketLike } from "../src/bridge.js";
import { UiState } from "../src/state.js";

const repoRoot = dirname(dirname(dirname(fileURLToPath(import.meta.url))));
const fixture = join(repoRoot, "src", "edgevqa", "data", "robot_collected_20.jsonl");
const children: ChildProcessWithoutNullStreams[] = [];

function nodeWsFactory(url: string): WebSocketLike {
  const raw = new WsWebSocket(url);
  const like: WebSocketLike = {
    onopen: null,
    onmessage: null,
    onclose: null,
    onerror: null,
    send: (d) => raw.send(d),
    close: () => raw.close(),
  };
  raw.on("open", () => like.onopen?.());
  raw.on("message", (data) => like.onmessage?.({ data: data.toString() }));
  raw.on("close", () => like.onclose?.());
  raw.on("error", () => like.onerror?.());
  return like;
}

function launch(args: string[], readyPattern: RegExp, timeoutMs = 20_000) {
  return new Promise<{ proc: ChildProcessWithoutNullStreams; line: string }>(
    (resolve, reject) => {
      const proc = spawn("python3", ["-m", "edgevqa.cli", ...args], { cwd: repoRoot });
      children.push(proc);
      let buffer = "";
      const timer = setTimeout(() => {
        reject(new Error(`${args[0]} not ready; output so far:\n${buffer}`));
      }, timeoutMs);
      const onData = (chunk: Buffer) => {
        buffer += chunk.toString();
        const match = buffer.match(readyPattern);
        if (match) {
          clearTimeout(timer);
          resolve({ proc, line: match[0] });
        }
      };
      proc.stdout.on("data", onData);
      proc.stderr.on("data", onData);
      proc.on("exit", (code) => {
        if (!readyPattern.test(buffer)) {
          clearTimeout(timer);
          reject(new Error(`${args[0]} exited early (${code}):\n${buffer}`));
        }
      });
    },
  );
}

async function poll(check: () => boolean, what: string, timeoutMs = 25_000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (check()) return;
    await new Promise((r) => setTimeout(r, 50));
  }
  throw new Error(`timed out waiting for ${what}`);
}

afterAll(() => {
  for (const child of children) {
    if (child.exitCode === null) child.kill("SIGKILL");
  }
});

describe("live gateway", () => {
  it(
    "query round-trips, frames flow, reconnect banner on kill",
    async () => {
      const signal = await launch(
        ["signal-server", "--signal-port", "0"],
        /listening on 127\.0\.0\.1:(\d+)/,
      );
      const signalPort = signal.line.match(/:(\d+)/)![1];
      const gateway = await launch(
        [
          "gateway",
          "--signal", `127.0.0.1:${signalPort}`,
          "--profile", "edge-llama",
          "--dataset", fixture,
          "--http-port", "0",
          "--time-scale", "0.05",
        ],
        /http on 127\.0\.0\.1:(\d+)/,
      );
      const httpPort = gateway.line.match(/http on 127\.0\.0\.1:(\d+)/)![1];

      const state = new UiState();
      const statuses: string[] = [];
      const client = new BridgeClient({
        url: `ws://127.0.0.1:${httpPort}/v1/bridge`,
        wsFactory: nodeWsFactory,
        onEvent: (e) => state.applyEvent(e),
        onStatus: (s) => statuses.push(s.state),
        baseDelayMs: 200,
      });
      client.connect();
      await poll(() => client.connected, "bridge to connect");

      // robot replays the bundled fixture while we watch; killing the
      // gateway mid-replay makes it exit noisily, which is expected here
      launch(
        [
          "robot-sim",
          "--dataset", fixture,
          "--signal", `127.0.0.1:${signalPort}`,
          "--fps", "30",
          "--schedule", "paced:300",
          "--out", "/tmp/ui-live-preds.jsonl",
        ],
        /robot-sim: \d+\/\d+ answered/,
        60_000,
      ).catch(() => {});

      await poll(() => state.activeSessionCount() > 0, "session to connect");
      await poll(() => state.frameCount >= 2, "live frames");
      await poll(() => state.chat.some((b) => !b.mine && b.badge !== null), "replay answers");

      // operator question -> answer bubble with the verbatim latency badge
      const queryId = client.sendQuery("Is anyone visible right now?");
      state.noteOutgoingQuery(queryId, "Is anyone visible right now?");
      await poll(
        () => state.chat.some((b) => b.queryId === queryId && !b.mine),
        "operator answer",
      );
      const bubble = state.chat.find((b) => b.queryId === queryId && !b.mine)!;
      expect(bubble.text).toBe("mock: no gold answer");
      expect(bubble.badge).toMatch(/^[\d.]+ ms$/);
      expect(parseFloat(bubble.badge!)).toBeGreaterThan(0);
      // replay answers carried gold, so running accuracy is live
      expect(state.scoredCount).toBeGreaterThan(0);
      expect(state.orderingViolations).toBe(0);

      // kill the gateway: the client must flip into its reconnect state
      gateway.proc.kill("SIGKILL");
      await poll(() => client.status.state === "reconnecting", "reconnect state");
      expect(statuses).toContain("reconnecting");
      client.close();
    },
    90_000,
  );
});
