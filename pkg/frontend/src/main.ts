/** Browser entry point: wires the controller to a canvas viewer.
 *
 * Query parameters: ?server=http://host:port&volume=<id>&model=<id>
 */

import { ServiceClient } from "./api.js";
import { AnnotationController } from "./controller.js";
import type { Tool } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

async function fetchGrayPlane(url: string, w: number, h: number): Promise<Uint8ClampedArray> {
  const img = new Image();
  img.crossOrigin = "anonymous";
  await new Promise<void>((resolve, reject) => {
    img.onload = () => resolve();
    img.onerror = () => reject(new Error(`failed to load ${url}`));
    img.src = url;
  });
  const scratch = document.createElement("canvas");
  scratch.width = w;
  scratch.height = h;
  const ctx = scratch.getContext("2d")!;
  ctx.drawImage(img, 0, 0);
  const rgba = ctx.getImageData(0, 0, w, h).data;
  const gray = new Uint8ClampedArray(w * h);
  for (let i = 0; i < w * h; i++) gray[i] = rgba[i * 4];
  return gray;
}

async function start(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const server = params.get("server") ?? "";
  const volumeId = params.get("volume");
  if (!volumeId) {
    el<HTMLDivElement>("status").textContent =
      "missing ?volume=<id> — upload a volume bundle first (POST /volumes)";
    return;
  }
  const client = new ServiceClient(server);
  const info = await client.volumeInfo(volumeId);
  const ctl = new AnnotationController(client, volumeId, info.shape);
  await ctl.open(params.get("model") ?? "default");
  await ctl.newLesion();

  const [h, w, depth] = info.shape;
  const zoom = Math.max(1, Math.floor(512 / Math.max(h, w)));
  const view = { zoom, panX: 0, panY: 0 };
  const canvas = el<HTMLCanvasElement>("viewer");
  canvas.width = w * zoom;
  canvas.height = h * zoom;
  const ctx = canvas.getContext("2d")!;
  const scrubber = el<HTMLInputElement>("slice");
  scrubber.max = String(depth - 1);
  const status = el<HTMLDivElement>("status");
  const grayCache = new Map<number, Uint8ClampedArray>();

  async function repaint(): Promise<void> {
    const d = ctl.state.slice;
    let gray = grayCache.get(d);
    if (!gray) {
      gray = await fetchGrayPlane(client.sliceImageUrl(volumeId!, d), w, h);
      grayCache.set(d, gray);
    }
    const windowed = new Uint8ClampedArray(gray.length);
    for (let i = 0; i < gray.length; i++) windowed[i] = ctl.state.applyWindow(gray[i] / 255);
    const buf = ctl.renderSlice(d, windowed);
    const scaled = document.createElement("canvas");
    scaled.width = w;
    scaled.height = h;
    scaled.getContext("2d")!.putImageData(new ImageData(new Uint8ClampedArray(buf), w, h), 0, 0);
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.drawImage(scaled, 0, 0, canvas.width, canvas.height);
    el<HTMLSpanElement>("slice-label").textContent =
      `slice ${d + 1}/${depth}` + (ctl.badges.includes(d) ? " ●" : "");
    el<HTMLDivElement>("badges").textContent = ctl.badges.length
      ? `lesions on slices: ${ctl.badges.map((b) => b + 1).join(", ")}`
      : "";
    status.textContent =
      `lesion ${ctl.state.activeLesion} · tool ${ctl.state.tool} · rev ${ctl.state.revision}` +
      (ctl.state.pending ? " · working…" : "");
  }

  function renderExemplars(): void {
    const panel = el<HTMLUListElement>("exemplars");
    panel.innerHTML = "";
    for (const e of ctl.exemplars) {
      const li = document.createElement("li");
      li.textContent =
        `lesion ${e.lesion_id} · slice ${e.slice + 1} · ` +
        `${e.prompted ? "prompted" : "propagated"} · rank ${e.recency_rank}`;
      panel.appendChild(li);
    }
  }

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    void ctl
      .placeClick(ev.clientX - rect.left, ev.clientY - rect.top, view)
      .then(repaint)
      .catch((err) => (status.textContent = String(err)));
  });
  scrubber.addEventListener("input", () => {
    ctl.state.setSlice(Number(scrubber.value));
    void repaint();
  });
  for (const tool of ["positive", "negative", "pan"] as Tool[]) {
    el<HTMLButtonElement>(`tool-${tool}`).addEventListener("click", () => {
      ctl.state.setTool(tool);
      void repaint();
    });
  }
  el<HTMLButtonElement>("new-lesion").addEventListener("click", () => {
    void ctl.newLesion().then(repaint);
  });
  el<HTMLButtonElement>("propagate").addEventListener("click", () => {
    void ctl
      .propagateActive()
      .then(repaint)
      .catch((err) => (status.textContent = String(err)));
  });
  el<HTMLButtonElement>("propagate-exemplars").addEventListener("click", () => {
    void ctl
      .propagateAndReview()
      .then(() => {
        renderExemplars();
        return repaint();
      })
      .catch((err) => (status.textContent = String(err)));
  });

  await repaint();
}

void start().catch((err) => {
  document.body.textContent = String(err);
});
