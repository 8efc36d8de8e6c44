/** Canvas <-> voxel coordinate mapping.
 *
 * The displayed image is the slice scaled by `zoom` and offset by
 * (panX, panY) in canvas pixels. Voxel centers sit at
 * (x + 0.5) * zoom + panX, so mapping a canvas point back to a voxel is
 * a floor division — the round trip canvas -> voxel -> canvas always
 * lands within half a voxel of where it started.
 */

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface VoxelXY {
  x: number;
  y: number;
}

export function canvasToVoxel(
  cx: number,
  cy: number,
  t: ViewTransform,
  width: number,
  height: number,
): VoxelXY | null {
  const x = Math.floor((cx - t.panX) / t.zoom);
  const y = Math.floor((cy - t.panY) / t.zoom);
  if (x < 0 || y < 0 || x >= width || y >= height) return null;
  return { x, y };
}

/** Canvas position of a voxel's center. */
export function voxelToCanvas(x: number, y: number, t: ViewTransform): { cx: number; cy: number } {
  return { cx: (x + 0.5) * t.zoom + t.panX, cy: (y + 0.5) * t.zoom + t.panY };
}
