/** Wire types for the gateway's /v1/bridge WebSocket (docs/backend-api.md). */

export type BridgeKind = "frame" | "answer" | "telemetry" | "session_state";

export interface BridgeEvent {
  kind: BridgeKind;
  payload: unknown;
  server_ts_us: number;
}

export interface FramePayload {
  session_id: string;
  frame_id: number;
  capture_ts_us: number;
  frame_jpeg_b64: string;
}

export interface AnswerPayload {
  query_id: string;
  text: string;
  backend_id: string;
  token_count: number;
  session_id?: string;
  item_id?: string;
  error?: string;
  trace?: Record<string, number>;
  sim_durations_ms?: Record<string, number>;
  /** Server-computed end-to-end latency; displayed verbatim, never recomputed. */
  e2e_ms?: number;
  gold?: string;
  correct?: boolean;
}

export interface TelemetryPayload {
  session_id: string;
  event: string;
  received?: number;
  lost?: number;
  interval_ms?: number;
  frames_released?: number;
  frames_dropped?: number;
}

export interface SessionStatePayload {
  session_id: string;
  state: string;
}

export function isBridgeEvent(value: unknown): value is BridgeEvent {
  if (typeof value !== "object" || value === null) return false;
  const v = value as Record<string, unknown>;
  return (
    (v.kind === "frame" || v.kind === "answer" || v.kind === "telemetry" ||
      v.kind === "session_state") &&
    typeof v.server_ts_us === "number" &&
    "payload" in v
  );
}
