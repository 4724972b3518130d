/** UI state fed purely by bridge events; panels render from this.
 * Charts keep bounded history (ring buffers of 100 points). */

import { RingBuffer } from "./ring.js";
import { latencyBadge } from "./format.js";
import type {
  AnswerPayload,
  BridgeEvent,
  FramePayload,
  SessionStatePayload,
  TelemetryPayload,
} from "./types.js";

export const CHART_POINTS = 100;

export interface ChatBubble {
  queryId: string;
  text: string;
  badge: string | null;
  error: string | null;
  correct: boolean | null;
  mine: boolean; // true for the operator's outgoing question
}

export interface LatencyPoint {
  e2eMs: number;
  serverTsUs: number;
}

export class UiState {
  chat: ChatBubble[] = [];
  latestFrame: FramePayload | null = null;
  frameCount = 0;
  latency = new RingBuffer<LatencyPoint>(CHART_POINTS);
  telemetry = new RingBuffer<TelemetryPayload>(CHART_POINTS);
  lastStages: Record<string, number> | null = null;
  sessions = new Map<string, string>();
  correctCount = 0;
  scoredCount = 0;
  /** events whose server_ts_us went backwards within a kind (should be 0) */
  orderingViolations = 0;
  private lastTsByKind = new Map<string, number>();

  noteOutgoingQuery(queryId: string, text: string): void {
    this.chat.push({ queryId, text, badge: null, error: null, correct: null, mine: true });
    this.trimChat();
  }

  applyEvent(event: BridgeEvent): void {
    const previous = this.lastTsByKind.get(event.kind);
    if (previous !== undefined && event.server_ts_us < previous) {
      this.orderingViolations += 1;
    }
    this.lastTsByKind.set(event.kind, event.server_ts_us);
    switch (event.kind) {
      case "frame":
        this.latestFrame = event.payload as FramePayload;
        this.frameCount += 1;
        break;
      case "answer":
        this.applyAnswer(event.payload as AnswerPayload, event.server_ts_us);
        break;
      case "telemetry":
        this.telemetry.push(event.payload as TelemetryPayload);
        break;
      case "session_state": {
        const payload = event.payload as SessionStatePayload;
        this.sessions.set(payload.session_id, payload.state);
        break;
      }
    }
  }

  private applyAnswer(answer: AnswerPayload, serverTsUs: number): void {
    this.chat.push({
      queryId: answer.query_id,
      text: answer.error ? `error: ${answer.error}` : answer.text,
      badge: latencyBadge(answer),
      error: answer.error ?? null,
      correct: typeof answer.correct === "boolean" ? answer.correct : null,
      mine: false,
    });
    this.trimChat();
    if (typeof answer.e2e_ms === "number") {
      this.latency.push({ e2eMs: answer.e2e_ms, serverTsUs });
    }
    if (answer.sim_durations_ms) {
      const stages: Record<string, number> = {};
      for (const key of ["preprocess", "fusion", "generation", "text_decode"]) {
        stages[key] = answer.sim_durations_ms[key] ?? 0;
      }
      this.lastStages = stages;
    }
    if (typeof answer.correct === "boolean") {
      this.scoredCount += 1;
      if (answer.correct) this.correctCount += 1;
    }
  }

  private trimChat(): void {
    if (this.chat.length > 200) this.chat.splice(0, this.chat.length - 200);
  }

  activeSessionCount(): number {
    let n = 0;
    for (const state of this.sessions.values()) if (state === "CONNECTED") n += 1;
    return n;
  }
}
