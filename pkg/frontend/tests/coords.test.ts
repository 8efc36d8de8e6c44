import { describe, expect, it } from "vitest";

import { canvasToVoxel, voxelToCanvas } from "../src/coords.js";

describe("coordinate mapping", () => {
  it("maps the canvas center of an unzoomed 128x128 slice to voxel (64, 64)", () => {
    const t = { zoom: 1, panX: 0, panY: 0 };
    expect(canvasToVoxel(64, 64, t, 128, 128)).toEqual({ x: 64, y: 64 });
  });

  it("voxel -> canvas -> voxel is exact identity at every zoom", () => {
    for (const zoom of [0.5, 1, 2, 3, 7.5]) {
      const t = { zoom, panX: 13.25, panY: -4 };
      for (let x = 0; x < 16; x++) {
        for (let y = 0; y < 16; y++) {
          const { cx, cy } = voxelToCanvas(x, y, t);
          expect(canvasToVoxel(cx, cy, t, 16, 16)).toEqual({ x, y });
        }
      }
    }
  });

  it("canvas -> voxel -> canvas lands within one image pixel", () => {
    let seed = 77;
    const rand = () => {
      seed = (seed * 1103515245 + 12345) & 0x7fffffff;
      return seed / 0x7fffffff;
    };
    for (const zoom of [0.5, 1, 2, 3, 7.5]) {
      const t = { zoom, panX: 5, panY: 9 };
      for (let trial = 0; trial < 200; trial++) {
        const cx = t.panX + rand() * 32 * zoom;
        const cy = t.panY + rand() * 32 * zoom;
        const v = canvasToVoxel(cx, cy, t, 32, 32);
        expect(v).not.toBeNull();
        const back = voxelToCanvas(v!.x, v!.y, t);
        // measured in image pixels, not canvas pixels
        expect(Math.abs(back.cx - cx) / zoom).toBeLessThan(1);
        expect(Math.abs(back.cy - cy) / zoom).toBeLessThan(1);
      }
    }
  });

  it("returns null outside the image so the click is ignored", () => {
    const t = { zoom: 2, panX: 0, panY: 0 };
    expect(canvasToVoxel(-1, 5, t, 16, 16)).toBeNull();
    expect(canvasToVoxel(5, 32.5, t, 16, 16)).toBeNull();
    expect(canvasToVoxel(31.9, 31.9, t, 16, 16)).toEqual({ x: 15, y: 15 });
  });
});
