/** Typed client for the session service: one method per endpoint plus
 * uniform error decoding. Request ordering is the controller's concern.
 */

import type { MaskEnvelope } from "./rle.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  readonly status: number;
  readonly detail: string;

  constructor(status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.status = status;
    this.detail = detail;
  }
}

export interface SessionInfo {
  session_id: string;
  volume_id: string;
  revision: number;
}

export interface VolumeInfo {
  volume_id: string;
  shape: [number, number, number];
  spacing: [number, number, number];
}

export interface ClickResponse {
  kind: "instance";
  revision: number;
  mask: MaskEnvelope; // single-slice envelope, shape (H, W, 1)
  slice: number;
  warning: boolean;
  lesion_id: number;
}

export interface MaskResponse {
  kind: string;
  revision: number;
  mask: MaskEnvelope;
  lesion_id?: number;
  provenance?: string;
}

export interface ExemplarEntry {
  lesion_id: number;
  slice: number;
  prompted: boolean;
  recency_rank: number;
}

export interface ExemplarListing {
  revision: number;
  capacity: number;
  entries: ExemplarEntry[];
}

export interface ClickRequest {
  x: number;
  y: number;
  slice: number;
  label: 0 | 1;
  revision?: number;
}

export class ServiceClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "content-type": "application/json" };
    }
    const resp = await this.fetchImpl(this.base + path, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const parsed = (await resp.json()) as { detail?: string };
        if (parsed.detail) detail = parsed.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  volumeInfo(volumeId: string): Promise<VolumeInfo> {
    return this.request("GET", `/volumes/${volumeId}`);
  }

  sliceImageUrl(volumeId: string, d: number): string {
    return `${this.base}/volumes/${volumeId}/slices/${d}`;
  }

  openSession(volumeId: string, modelId = "default"): Promise<SessionInfo> {
    return this.request("POST", "/sessions", { volume_id: volumeId, model_id: modelId });
  }

  addLesion(sessionId: string): Promise<{ lesion_id: number; revision: number }> {
    return this.request("POST", `/sessions/${sessionId}/lesions`);
  }

  addClick(sessionId: string, lesionId: number, click: ClickRequest): Promise<ClickResponse> {
    return this.request("POST", `/sessions/${sessionId}/lesions/${lesionId}/clicks`, click);
  }

  propagate(sessionId: string, lesionId: number, revision?: number): Promise<MaskResponse> {
    const q = revision === undefined ? "" : `?revision=${revision}`;
    return this.request("POST", `/sessions/${sessionId}/lesions/${lesionId}/propagate${q}`);
  }

  propagateExemplars(sessionId: string, revision?: number): Promise<MaskResponse> {
    const q = revision === undefined ? "" : `?revision=${revision}`;
    return this.request("POST", `/sessions/${sessionId}/propagate-exemplars${q}`);
  }

  getExemplars(sessionId: string): Promise<ExemplarListing> {
    return this.request("GET", `/sessions/${sessionId}/exemplars`);
  }

  getMask(sessionId: string, kind: "instance" | "semantic" | "final", lesionId?: number): Promise<MaskResponse> {
    const q = lesionId === undefined ? "" : `&lesion_id=${lesionId}`;
    return this.request("GET", `/sessions/${sessionId}/mask?kind=${kind}${q}`);
  }

  closeSession(sessionId: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/sessions/${sessionId}`);
  }
}
