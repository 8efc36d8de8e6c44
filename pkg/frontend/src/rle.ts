/** Decoder for the server's run-length mask envelopes.
 *
 * Each slice is a base64 string of little-endian u32 (start, length)
 * pairs over the row-major flattened (H, W) plane. The client only ever
 * decodes; masks are never produced locally.
 */

export interface MaskEnvelope {
  shape: [number, number, number]; // (H, W, D)
  encoding: string;
  slices: string[];
}

function base64ToBytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

/** One plane as a flat Uint8Array of 0/1, indexed by y * w + x. */
export function decodePlane(b64: string, h: number, w: number): Uint8Array {
  const bytes = base64ToBytes(b64);
  if (bytes.length % 8 !== 0) {
    throw new Error(`rle plane: payload length ${bytes.length} is not a multiple of 8`);
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const plane = new Uint8Array(h * w);
  for (let off = 0; off < bytes.length; off += 8) {
    const start = view.getUint32(off, true);
    const len = view.getUint32(off + 4, true);
    if (start + len > plane.length) {
      throw new Error(`rle plane: run ${start}+${len} exceeds ${h}x${w}`);
    }
    plane.fill(1, start, start + len);
  }
  return plane;
}

export interface DecodedMask {
  shape: [number, number, number];
  planes: Uint8Array[]; // planes[d][y * w + x]
}

export function decodeMask(env: MaskEnvelope): DecodedMask {
  if (env.encoding !== "rle-b64-u32") {
    throw new Error(`unsupported mask encoding ${env.encoding}`);
  }
  const [h, w, d] = env.shape;
  if (env.slices.length !== d) {
    throw new Error(`mask envelope: ${env.slices.length} slices for depth ${d}`);
  }
  return { shape: env.shape, planes: env.slices.map((s) => decodePlane(s, h, w)) };
}

/** Slice indexes that contain any foreground — drives the scrubber badges. */
export function badgeSlices(env: MaskEnvelope): number[] {
  // a slice has foreground exactly when its run list is non-empty
  return env.slices.flatMap((s, d) => (s.length > 0 ? [d] : []));
}
