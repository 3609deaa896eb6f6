/** App wiring: image list, canvas annotation, submission, finetune trigger.
 *
 * The correct -> fine-tune -> re-predict loop: draw partial strokes over a bad
 * prediction, submit them, start a finetune job, watch its status, and see the
 * refreshed contour when it completes (no page reload).
 */

import { Api, ApiError } from "./api.js";
import { renderView } from "./render.js";
import { AnnotationSession } from "./session.js";
import { panBy, zoomAround } from "./transform.js";
import type { ContourJson, ImageInfo, Point } from "./types.js";

const POLL_MS = 1000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

class App {
  api = new Api();
  session: AnnotationSession | null = null;
  images: ImageInfo[] = [];
  prediction: ContourJson | null = null;
  bitmap: HTMLImageElement | null = null;
  canvas = el<HTMLCanvasElement>("view");
  ctx = this.canvas.getContext("2d")!;
  banner = el<HTMLDivElement>("banner");
  jobPanel = el<HTMLDivElement>("job");
  finetuneBtn = el<HTMLButtonElement>("finetune");
  submitBtn = el<HTMLButtonElement>("submit");
  clearBtn = el<HTMLButtonElement>("clear");
  picker = el<HTMLSelectElement>("picker");
  mode: "draw" | "pan" = "draw";
  polling = false;

  async start(): Promise<void> {
    try {
      const listing = await this.api.listImages();
      this.images = listing.images;
    } catch (err) {
      this.error(`failed to list images: ${err}`);
      return;
    }
    for (const info of this.images) {
      const opt = document.createElement("option");
      opt.value = info.id;
      opt.textContent = info.id;
      this.picker.appendChild(opt);
    }
    this.picker.addEventListener("change", () => this.load(this.picker.value));
    this.wireCanvas();
    this.wireButtons();
    if (this.images.length) await this.load(this.images[0].id);
  }

  error(message: string): void {
    this.banner.textContent = message;
    this.banner.className = "banner error";
  }

  info(message: string): void {
    this.banner.textContent = message;
    this.banner.className = message ? "banner" : "banner hidden";
  }

  async load(id: string): Promise<void> {
    const info = this.images.find((i) => i.id === id);
    if (!info) return;
    this.session = new AnnotationSession(info);
    const fit = Math.min(this.canvas.width / info.width, this.canvas.height / info.height);
    this.session.view = {
      zoom: fit,
      panX: (this.canvas.width - info.width * fit) / 2,
      panY: (this.canvas.height - info.height * fit) / 2,
    };
    this.prediction = null;
    this.bitmap = null;
    const img = new Image();
    img.src = this.api.imageUrl(id);
    img.onload = () => {
      this.bitmap = img;
      this.draw();
    };
    img.onerror = () => this.error(`failed to fetch image ${id}`);
    try {
      this.prediction = await this.api.getPrediction(id);
      this.info("");
    } catch (err) {
      this.error(`prediction fetch failed: ${err}`);
    }
    this.draw();
  }

  draw(): void {
    if (!this.session) return;
    renderView(this.ctx, this.session, this.bitmap, this.prediction);
    this.submitBtn.disabled = !this.session.submittable;
    if (this.session.clampWarning) {
      this.info("stroke clamped to image bounds");
    }
  }

  private pointer(ev: MouseEvent): Point {
    const rect = this.canvas.getBoundingClientRect();
    return [ev.clientX - rect.left, ev.clientY - rect.top];
  }

  wireCanvas(): void {
    let panning = false;
    let last: Point = [0, 0];
    this.canvas.addEventListener("mousedown", (ev) => {
      const p = this.pointer(ev);
      if (this.mode === "pan" || ev.button === 1 || ev.shiftKey) {
        panning = true;
        last = p;
      } else if (this.session) {
        this.session.beginStroke(p);
      }
      this.draw();
    });
    this.canvas.addEventListener("mousemove", (ev) => {
      const p = this.pointer(ev);
      if (panning && this.session) {
        this.session.view = panBy(this.session.view, p[0] - last[0], p[1] - last[1]);
        last = p;
      } else if (this.session?.active) {
        this.session.extendStroke(p);
      } else {
        return;
      }
      this.draw();
    });
    const finish = () => {
      panning = false;
      if (this.session?.active) {
        if (!this.session.endStroke()) {
          this.info("strokes need at least 2 points");
        }
        this.draw();
      }
    };
    this.canvas.addEventListener("mouseup", finish);
    this.canvas.addEventListener("mouseleave", finish);
    this.canvas.addEventListener("wheel", (ev) => {
      if (!this.session) return;
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
      this.session.view = zoomAround(this.session.view, this.pointer(ev), factor);
      this.draw();
    });
  }

  wireButtons(): void {
    el<HTMLButtonElement>("mode").addEventListener("click", (ev) => {
      this.mode = this.mode === "draw" ? "pan" : "draw";
      (ev.target as HTMLButtonElement).textContent = this.mode === "draw" ? "mode: draw" : "mode: pan";
    });
    this.clearBtn.addEventListener("click", () => {
      this.session?.discardStrokes();
      this.info("");
      this.draw();
    });
    this.submitBtn.addEventListener("click", () => void this.submit());
    this.finetuneBtn.addEventListener("click", () => void this.finetune());
  }

  async submit(): Promise<void> {
    if (!this.session) return;
    this.submitBtn.disabled = true;
    try {
      const payload = this.session.buildPayload();
      const stored = await this.api.postCorrections(this.session.image.id, payload);
      this.session.discardStrokes();
      this.info(`saved; ${stored.segments.length} segment(s) on ${stored.image}`);
    } catch (err) {
      this.error(err instanceof ApiError ? `server rejected: ${err.message}` : String(err));
    }
    this.draw();
  }

  async finetune(): Promise<void> {
    this.finetuneBtn.disabled = true;
    try {
      const { job } = await this.api.triggerFinetune();
      this.jobPanel.textContent = `job ${job}: starting`;
      await this.watch(job);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.jobPanel.textContent = "a finetune job is already running";
      } else {
        this.error(err instanceof ApiError ? err.message : String(err));
        this.finetuneBtn.disabled = false;
      }
    }
  }

  async watch(job: string): Promise<void> {
    this.polling = true;
    while (this.polling) {
      await new Promise((r) => setTimeout(r, POLL_MS));
      let status;
      try {
        status = await this.api.jobStatus(job);
      } catch (err) {
        this.error(`status poll failed: ${err}`);
        break;
      }
      this.jobPanel.textContent =
        `job ${job}: ${status.status}` +
        (status.epoch >= 0 ? ` epoch ${status.epoch}` : "") +
        (status.mean_loss != null ? ` loss ${status.mean_loss.toFixed(3)}` : "");
      if (status.status === "done") {
        // refetch the corrected image's prediction so the user sees the update
        if (this.session) await this.load(this.session.image.id);
        break;
      }
      if (status.status === "failed") {
        this.error(`finetune failed: ${status.error}`);
        break;
      }
    }
    this.polling = false;
    this.finetuneBtn.disabled = false;
  }
}

window.addEventListener("DOMContentLoaded", () => void new App().start());
