import { describe, expect, it } from "vitest";

import { ViewerState } from "../src/state.js";

describe("viewer state", () => {
  it("keeps the slice index within the volume depth", () => {
    const s = new ViewerState(6);
    s.setSlice(4);
    expect(s.slice).toBe(4);
    s.setSlice(99);
    expect(s.slice).toBe(5);
    s.setSlice(-3);
    expect(s.slice).toBe(0);
    s.setSlice(2.7);
    expect(s.slice).toBe(2);
  });

  it("rejects empty volumes", () => {
    expect(() => new ViewerState(0)).toThrow(/depth/);
  });

  it("has exactly one active tool at a time", () => {
    const s = new ViewerState(3);
    expect(s.tool).toBe("positive");
    s.setTool("negative");
    expect(s.tool).toBe("negative");
    s.setTool("pan");
    expect(s.tool).toBe("pan");
  });

  it("window/level maps intensities into clamped 8-bit", () => {
    const s = new ViewerState(1);
    expect(s.applyWindow(0)).toBe(0);
    expect(s.applyWindow(1)).toBe(255);
    expect(s.applyWindow(0.5)).toBe(128);
    s.windowCenter = 0.25;
    s.windowWidth = 0.5;
    expect(s.applyWindow(0.5)).toBe(255);   // above the window
    expect(s.applyWindow(-1)).toBe(0);       // below it
  });
});
