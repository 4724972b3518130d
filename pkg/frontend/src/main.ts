/** DOM wiring: live view, chat, metrics, connection banner. */

import { BridgeClient } from "./bridge.js";
import { drawSparkline, drawStageBars } from "./charts.js";
import { accuracyLabel, bitrateLabel } from "./format.js";
import { UiState } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function bridgeUrl(): string {
  const params = new URLSearchParams(location.search);
  const override = params.get("bridge");
  if (override) return override;
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/v1/bridge`;
}

function start(): void {
  const state = new UiState();
  const banner = el<HTMLDivElement>("banner");
  const liveImg = el<HTMLImageElement>("live-frame");
  const liveMeta = el<HTMLDivElement>("live-meta");
  const chatLog = el<HTMLDivElement>("chat-log");
  const chatForm = el<HTMLFormElement>("chat-form");
  const chatInput = el<HTMLInputElement>("chat-input");
  const latencyCanvas = el<HTMLCanvasElement>("latency-chart");
  const stageCanvas = el<HTMLCanvasElement>("stage-chart");
  const accuracyDiv = el<HTMLDivElement>("accuracy");
  const telemetryDiv = el<HTMLDivElement>("telemetry");

  const render = () => {
    if (state.latestFrame) {
      liveImg.src = `data:image/jpeg;base64,${state.latestFrame.frame_jpeg_b64}`;
      liveMeta.textContent =
        `frame ${state.latestFrame.frame_id} · session ${state.latestFrame.session_id}` +
        ` · ${state.frameCount} frames · ${state.activeSessionCount()} active session(s)`;
    }
    chatLog.replaceChildren(
      ...state.chat.map((bubble) => {
        const div = document.createElement("div");
        div.className = bubble.mine ? "bubble mine" : "bubble";
        if (bubble.error) div.classList.add("error");
        const text = document.createElement("span");
        text.textContent = bubble.text;
        div.appendChild(text);
        if (bubble.badge) {
          const badge = document.createElement("span");
          badge.className = "badge";
          badge.textContent = bubble.badge;
          div.appendChild(badge);
        }
        if (bubble.correct !== null) {
          const mark = document.createElement("span");
          mark.className = bubble.correct ? "mark ok" : "mark bad";
          mark.textContent = bubble.correct ? "✓" : "✗";
          div.appendChild(mark);
        }
        return div;
      }),
    );
    chatLog.scrollTop = chatLog.scrollHeight;
    drawSparkline(latencyCanvas, state.latency.toArray().map((p) => p.e2eMs));
    if (state.lastStages) drawStageBars(stageCanvas, state.lastStages);
    accuracyDiv.textContent = accuracyLabel(state.correctCount, state.scoredCount);
    const lastTelemetry = state.telemetry.last();
    telemetryDiv.textContent = lastTelemetry
      ? `media: ${bitrateLabel(lastTelemetry)} · drops ${lastTelemetry.frames_dropped ?? 0}`
      : "media: waiting for telemetry";
  };

  const client = new BridgeClient({
    url: bridgeUrl(),
    onEvent: (event) => {
      state.applyEvent(event);
      render();
    },
    onStatus: (status) => {
      if (status.state === "open") {
        banner.className = "banner ok";
        banner.textContent = "connected";
        chatInput.disabled = false;
      } else if (status.state === "reconnecting") {
        banner.className = "banner warn";
        const wait = status.nextDelayMs !== null ? ` (retry in ${status.nextDelayMs} ms)` : "";
        banner.textContent = `reconnecting, attempt ${status.attempt}${wait}`;
        chatInput.disabled = true;
      } else {
        banner.className = "banner warn";
        banner.textContent = status.state;
      }
    },
  });

  chatForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const text = chatInput.value.trim();
    if (!text || !client.connected) return;
    const queryId = client.sendQuery(text);
    state.noteOutgoingQuery(queryId, text);
    chatInput.value = "";
    render();
  });

  client.connect();
}

document.addEventListener("DOMContentLoaded", start);
