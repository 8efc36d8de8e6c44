/** Annotation workflow: click placement with revision-conflict recovery,
 * per-lesion refinement, exemplar propagation, and overlay assembly.
 *
 * Masks are only ever what the server returned; a stale-revision
 * conflict triggers one resync-and-retry, after which the client is at
 * the server's revision or the error is surfaced. Mutations run through
 * a queue so at most one is in flight, and each one reads the committed
 * revision only once it reaches the front of the queue.
 */

import { ApiError, ServiceClient } from "./api.js";
import type { ExemplarEntry } from "./api.js";
import { canvasToVoxel } from "./coords.js";
import type { ViewTransform } from "./coords.js";
import { badgeSlices, decodeMask, decodePlane } from "./rle.js";
import {
  INSTANCE_COLOR,
  SEMANTIC_COLOR,
  blendMask,
  grayToRgba,
  paintClickMarker,
} from "./overlay.js";
import { ViewerState } from "./state.js";

export interface PlacedClick {
  x: number;
  y: number;
  slice: number;
  positive: boolean;
  lesionId: number;
}

export interface ReviewResult {
  badges: number[];
  exemplars: ExemplarEntry[];
}

export class AnnotationController {
  readonly client: ServiceClient;
  readonly state: ViewerState;
  readonly volumeId: string;
  readonly height: number;
  readonly width: number;

  sessionId = "";
  /** lesion id -> slice -> decoded plane from the latest server response */
  instancePlanes = new Map<number, Map<number, Uint8Array>>();
  semanticPlanes: Uint8Array[] | null = null;
  badges: number[] = [];
  exemplars: ExemplarEntry[] = [];
  clicks: PlacedClick[] = [];
  private mutationChain: Promise<unknown> = Promise.resolve();

  constructor(client: ServiceClient, volumeId: string, shape: [number, number, number]) {
    this.client = client;
    this.volumeId = volumeId;
    this.height = shape[0];
    this.width = shape[1];
    this.state = new ViewerState(shape[2]);
  }

  /** Run a mutation after every earlier one has settled. */
  private mutate<T>(fn: () => Promise<T>): Promise<T> {
    const next = this.mutationChain.then(fn, fn);
    this.mutationChain = next.catch(() => undefined); // a failure doesn't poison the queue
    return next;
  }

  async open(modelId = "default"): Promise<void> {
    const info = await this.mutate(() => this.client.openSession(this.volumeId, modelId));
    this.sessionId = info.session_id;
    this.state.revision = info.revision;
  }

  async newLesion(): Promise<number> {
    const resp = await this.mutate(() => this.client.addLesion(this.sessionId));
    this.state.revision = resp.revision;
    this.state.activeLesion = resp.lesion_id;
    return resp.lesion_id;
  }

  /** Adopt the server's committed revision after a conflict. */
  async resync(): Promise<void> {
    const listing = await this.client.getExemplars(this.sessionId);
    this.state.revision = listing.revision;
    this.exemplars = listing.entries;
  }

  /** Map a canvas click to a voxel and send it; returns "ignored" when the
   * click lands outside the image or no click tool is active. */
  async placeClick(cx: number, cy: number, view: ViewTransform): Promise<"applied" | "ignored"> {
    if (this.state.tool === "pan") return "ignored";
    if (this.state.activeLesion === null) throw new Error("no active lesion");
    const voxel = canvasToVoxel(cx, cy, view, this.width, this.height);
    if (voxel === null) return "ignored";

    const lesionId = this.state.activeLesion;
    const positive = this.state.tool === "positive";
    // capture what the user saw at click time; the revision is read only
    // once the request reaches the front of the mutation queue
    const slice = this.state.slice;
    this.state.pending = true;
    try {
      const resp = await this.mutate(async () => {
        const body = {
          x: voxel.x,
          y: voxel.y,
          slice,
          label: (positive ? 1 : 0) as 0 | 1,
          revision: this.state.revision,
        };
        try {
          return await this.client.addClick(this.sessionId, lesionId, body);
        } catch (err) {
          if (!(err instanceof ApiError) || err.status !== 409) throw err;
          await this.resync(); // one retry at the server's committed revision
          return await this.client.addClick(this.sessionId, lesionId, {
            ...body,
            revision: this.state.revision,
          });
        }
      });
      this.state.revision = resp.revision;
      const [h, w] = resp.mask.shape;
      const plane = decodePlane(resp.mask.slices[0], h, w);
      let bySlice = this.instancePlanes.get(lesionId);
      if (!bySlice) {
        bySlice = new Map();
        this.instancePlanes.set(lesionId, bySlice);
      }
      bySlice.set(resp.slice, plane);
      this.clicks.push({ ...voxel, slice, positive, lesionId });
      return "applied";
    } finally {
      this.state.pending = false;
    }
  }

  /** Propagate the active lesion's mask through the volume (stage 1). */
  async propagateActive(): Promise<void> {
    if (this.state.activeLesion === null) throw new Error("no active lesion");
    const lesionId = this.state.activeLesion;
    const resp = await this.mutate(() =>
      this.client.propagate(this.sessionId, lesionId, this.state.revision),
    );
    this.state.revision = resp.revision;
    const decoded = decodeMask(resp.mask);
    const bySlice = new Map<number, Uint8Array>();
    decoded.planes.forEach((p, d) => bySlice.set(d, p));
    this.instancePlanes.set(lesionId, bySlice);
  }

  /** Stage 2: semantic propagation from the exemplar bank, plus the
   * scrubber badges and the exemplar panel contents. */
  async propagateAndReview(): Promise<ReviewResult> {
    const resp = await this.mutate(() =>
      this.client.propagateExemplars(this.sessionId, this.state.revision),
    );
    this.semanticPlanes = decodeMask(resp.mask).planes;
    this.badges = badgeSlices(resp.mask);
    const listing = await this.client.getExemplars(this.sessionId);
    this.exemplars = listing.entries;
    return { badges: this.badges, exemplars: this.exemplars };
  }

  /** Compose the displayed RGBA buffer for a slice from an 8-bit base. */
  renderSlice(d: number, baseGray: Uint8Array | Uint8ClampedArray): Uint8ClampedArray {
    const buf = grayToRgba(baseGray, this.width, this.height);
    if (this.state.toggles.instance) {
      for (const bySlice of this.instancePlanes.values()) {
        const plane = bySlice.get(d);
        if (plane) blendMask(buf, plane, this.width, this.height, INSTANCE_COLOR, 0.45);
      }
    }
    if (this.state.toggles.semantic && this.semanticPlanes) {
      blendMask(buf, this.semanticPlanes[d], this.width, this.height, SEMANTIC_COLOR, 0.35);
    }
    for (const c of this.clicks) {
      if (c.slice === d) paintClickMarker(buf, this.width, this.height, c.x, c.y, c.positive);
    }
    return buf;
  }
}
