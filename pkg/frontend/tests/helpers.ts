/** Test-side helpers: an RLE encoder mirroring the server's codec (the
 * client itself only decodes) and small response builders.
 */

import type { MaskEnvelope } from "../src/rle.js";

export function bytesToBase64(bytes: Uint8Array): string {
  let bin = "";
  for (const b of bytes) bin += String.fromCharCode(b);
  return btoa(bin);
}

/** Encode a flat 0/1 plane (y * w + x) as little-endian u32 run pairs. */
export function encodePlane(plane: Uint8Array | number[]): string {
  const runs: number[] = [];
  let start = -1;
  for (let i = 0; i <= plane.length; i++) {
    const v = i < plane.length ? plane[i] : 0;
    if (v && start < 0) start = i;
    if (!v && start >= 0) {
      runs.push(start, i - start);
      start = -1;
    }
  }
  const bytes = new Uint8Array(runs.length * 4);
  const view = new DataView(bytes.buffer);
  runs.forEach((r, i) => view.setUint32(i * 4, r, true));
  return bytesToBase64(bytes);
}

export function envelopeOf(planes: Array<Uint8Array | number[]>, h: number, w: number): MaskEnvelope {
  return {
    shape: [h, w, planes.length],
    encoding: "rle-b64-u32",
    slices: planes.map((p) => encodePlane(p)),
  };
}

export function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

/** A flat plane with a filled square blob. */
export function blobPlane(h: number, w: number, cx: number, cy: number, r: number): Uint8Array {
  const plane = new Uint8Array(h * w);
  for (let y = Math.max(0, cy - r); y <= Math.min(h - 1, cy + r); y++) {
    for (let x = Math.max(0, cx - r); x <= Math.min(w - 1, cx + r); x++) {
      plane[y * w + x] = 1;
    }
  }
  return plane;
}
