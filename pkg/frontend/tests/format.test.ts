import { describe, expect, it } from "vitest";

import { accuracyLabel, latencyBadge } from "../src/format.js";
import type { AnswerPayload } from "../src/types.js";

const answer = (e2e?: number): AnswerPayload => ({
  query_id: "q1",
  text: "yes",
  backend_id: "mock",
  token_count: 1,
  e2e_ms: e2e,
});

describe("latencyBadge", () => {
  it("shows the server e2e_ms verbatim, no rounding", () => {
    expect(latencyBadge(answer(1600.03))).toBe("1600.03 ms");
    expect(latencyBadge(answer(12.3456789))).toBe("12.3456789 ms");
  });

  it("round-trips back to the exact number", () => {
    const value = 87.65432100123;
    const badge = latencyBadge(answer(value))!;
    expect(parseFloat(badge)).toBe(value);
  });

  it("absent without a server-computed value", () => {
    expect(latencyBadge(answer(undefined))).toBeNull();
  });
});

describe("accuracyLabel", () => {
  it("handles the empty case", () => {
    expect(accuracyLabel(0, 0)).toBe("accuracy: n/a");
  });
  it("formats running accuracy", () => {
    expect(accuracyLabel(3, 4)).toBe("accuracy: 75.0% (3/4)");
  });
});
