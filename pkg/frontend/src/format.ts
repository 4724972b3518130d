/** Display helpers. The latency badge shows the server's e2e_ms verbatim:
 * no rounding, no client-side recomputation from trace timestamps. */

import type { AnswerPayload } from "./types.js";

export function latencyBadge(answer: AnswerPayload): string | null {
  if (typeof answer.e2e_ms !== "number") return null;
  return `${answer.e2e_ms} ms`;
}

export function accuracyLabel(correct: number, total: number): string {
  if (total === 0) return "accuracy: n/a";
  return `accuracy: ${((100 * correct) / total).toFixed(1)}% (${correct}/${total})`;
}

export function bitrateLabel(t: { received?: number; lost?: number }): string {
  const received = t.received ?? 0;
  const lost = t.lost ?? 0;
  return `${received} pkts, ${lost} lost`;
}
