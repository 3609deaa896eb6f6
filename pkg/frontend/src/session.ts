/** Annotation session state: current image, strokes, zoom/pan.
 *
 * Stroke coordinates live in IMAGE pixels, never screen pixels. Points are
 * clamped into the image rectangle (with a warning flag) and strokes are
 * decimated before building the submission payload.
 */

import { decimate } from "./decimate.js";
import { clampToImage, screenToImage, ViewTransform } from "./transform.js";
import type { CorrectionsFile, ImageInfo, Point } from "./types.js";
import { validateCorrections } from "./types.js";

export interface Stroke {
  points: Point[]; // image coordinates
}

export class AnnotationSession {
  strokes: Stroke[] = [];
  active: Stroke | null = null;
  view: ViewTransform = { zoom: 1, panX: 0, panY: 0 };
  clampWarning = false;

  constructor(public image: ImageInfo) {}

  beginStroke(screenPoint: Point): void {
    this.active = { points: [] };
    this.extendStroke(screenPoint);
  }

  extendStroke(screenPoint: Point): void {
    if (!this.active) return;
    const raw = screenToImage(this.view, screenPoint);
    const { point, clamped } = clampToImage(raw, this.image.width, this.image.height);
    if (clamped) this.clampWarning = true;
    const prev = this.active.points[this.active.points.length - 1];
    if (prev && prev[0] === point[0] && prev[1] === point[1]) return;
    this.active.points.push(point);
  }

  endStroke(tolerance = 1.0): boolean {
    if (!this.active) return false;
    const pts = decimate(this.active.points, tolerance);
    this.active = null;
    if (pts.length < 2) return false; // single-point strokes never submit
    this.strokes.push({ points: pts });
    return true;
  }

  discardStrokes(): void {
    this.strokes = [];
    this.active = null;
    this.clampWarning = false;
  }

  /** Build and validate the POST payload; throws on schema violations. */
  buildPayload(author = "human"): CorrectionsFile {
    const payload: CorrectionsFile = {
      image: this.image.id,
      segments: this.strokes.map((s) => ({ author, points: s.points })),
    };
    const problem = validateCorrections(payload);
    if (problem) throw new Error(problem);
    return payload;
  }

  get submittable(): boolean {
    return this.strokes.length > 0 && this.strokes.every((s) => s.points.length >= 2);
  }
}
