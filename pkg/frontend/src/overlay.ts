/** RGBA compositing of base slice + mask overlays + click markers.
 *
 * Everything here works on flat buffers so it is testable without a
 * canvas; the browser glue blits the result via ImageData.
 */

export interface Rgb {
  r: number;
  g: number;
  b: number;
}

export const INSTANCE_COLOR: Rgb = { r: 255, g: 170, b: 0 };
export const SEMANTIC_COLOR: Rgb = { r: 70, g: 130, b: 255 };
export const FINAL_COLOR: Rgb = { r: 180, g: 70, b: 255 };
export const POSITIVE_COLOR: Rgb = { r: 0, g: 200, b: 0 };
export const NEGATIVE_COLOR: Rgb = { r: 220, g: 30, b: 30 };

/** Expand an 8-bit gray plane into an opaque RGBA buffer. */
export function grayToRgba(gray: Uint8Array | Uint8ClampedArray, w: number, h: number): Uint8ClampedArray {
  if (gray.length !== w * h) throw new Error(`gray plane ${gray.length} != ${w}x${h}`);
  const out = new Uint8ClampedArray(w * h * 4);
  for (let i = 0; i < w * h; i++) {
    out[i * 4] = gray[i];
    out[i * 4 + 1] = gray[i];
    out[i * 4 + 2] = gray[i];
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Alpha-blend a binary mask plane over the buffer, in place. */
export function blendMask(
  buf: Uint8ClampedArray,
  plane: Uint8Array,
  w: number,
  h: number,
  color: Rgb,
  alpha: number,
): void {
  if (plane.length !== w * h) throw new Error(`mask plane ${plane.length} != ${w}x${h}`);
  for (let i = 0; i < w * h; i++) {
    if (!plane[i]) continue;
    buf[i * 4] = Math.round(buf[i * 4] * (1 - alpha) + color.r * alpha);
    buf[i * 4 + 1] = Math.round(buf[i * 4 + 1] * (1 - alpha) + color.g * alpha);
    buf[i * 4 + 2] = Math.round(buf[i * 4 + 2] * (1 - alpha) + color.b * alpha);
  }
}

/** Paint a small cross at a voxel, in place. Positive green, negative red. */
export function paintClickMarker(
  buf: Uint8ClampedArray,
  w: number,
  h: number,
  x: number,
  y: number,
  positive: boolean,
): void {
  const color = positive ? POSITIVE_COLOR : NEGATIVE_COLOR;
  const arms: Array<[number, number]> = [
    [0, 0], [1, 0], [-1, 0], [0, 1], [0, -1],
  ];
  for (const [dx, dy] of arms) {
    const px = x + dx;
    const py = y + dy;
    if (px < 0 || py < 0 || px >= w || py >= h) continue;
    const i = (py * w + px) * 4;
    buf[i] = color.r;
    buf[i + 1] = color.g;
    buf[i + 2] = color.b;
    buf[i + 3] = 255;
  }
}
