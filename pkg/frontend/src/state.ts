/** Client-side viewer state. Masks themselves are not held here: every
 * rendered mask is a decoded server response tagged with its revision.
 */

export type Tool = "positive" | "negative" | "pan";

export interface OverlayToggles {
  instance: boolean;
  semantic: boolean;
  final: boolean;
}

export class ViewerState {
  readonly depth: number;
  private _slice = 0;
  private _tool: Tool = "positive";
  activeLesion: number | null = null;
  toggles: OverlayToggles = { instance: true, semantic: true, final: false };
  windowCenter = 0.5;
  windowWidth = 1.0;
  pending = false;
  revision = 0;

  constructor(depth: number) {
    if (depth < 1) throw new Error(`viewer depth must be >= 1, got ${depth}`);
    this.depth = depth;
  }

  get slice(): number {
    return this._slice;
  }

  /** Clamp into [0, depth). */
  setSlice(d: number): void {
    this._slice = Math.min(this.depth - 1, Math.max(0, Math.floor(d)));
  }

  get tool(): Tool {
    return this._tool;
  }

  /** Selecting a tool deselects the previous one — exactly one is active. */
  setTool(t: Tool): void {
    this._tool = t;
  }

  /** Display mapping from normalized intensity to 8-bit gray. */
  applyWindow(value: number): number {
    const lo = this.windowCenter - this.windowWidth / 2;
    const t = (value - lo) / this.windowWidth;
    return Math.round(255 * Math.min(1, Math.max(0, t)));
  }
}
