import { describe, expect, it } from "vitest";

import { RingBuffer } from "../src/ring.js";

describe("RingBuffer", () => {
  it("keeps at most capacity items, dropping the oldest", () => {
    const ring = new RingBuffer<number>(100);
    for (let i = 0; i < 150; i++) ring.push(i);
    expect(ring.length).toBe(100);
    const items = ring.toArray();
    expect(items[0]).toBe(50);
    expect(items[99]).toBe(149);
  });

  it("preserves insertion order below capacity", () => {
    const ring = new RingBuffer<string>(4);
    ring.push("a");
    ring.push("b");
    expect(ring.toArray()).toEqual(["a", "b"]);
    expect(ring.last()).toBe("b");
  });

  it("last() follows wraparound", () => {
    const ring = new RingBuffer<number>(3);
    [1, 2, 3, 4, 5].forEach((n) => ring.push(n));
    expect(ring.last()).toBe(5);
    expect(ring.toArray()).toEqual([3, 4, 5]);
  });

  it("rejects nonsense capacity", () => {
    expect(() => new RingBuffer(0)).toThrow();
  });
});
