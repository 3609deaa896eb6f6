/** Screen-to-image coordinate mapping under zoom and pan.
 *
 * Strokes are always STORED in image pixel coordinates; the view transform is
 * an exact inverse pair so a point survives screen->image->screen untouched
 * (up to float rounding) at any zoom level.
 */

import type { Point } from "./types.js";

export interface ViewTransform {
  zoom: number; // screen pixels per image pixel
  panX: number; // screen-space offset of image origin
  panY: number;
}

export function imageToScreen(t: ViewTransform, p: Point): Point {
  return [p[0] * t.zoom + t.panX, p[1] * t.zoom + t.panY];
}

export function screenToImage(t: ViewTransform, p: Point): Point {
  return [(p[0] - t.panX) / t.zoom, (p[1] - t.panY) / t.zoom];
}

export function zoomAround(t: ViewTransform, screenPoint: Point, factor: number): ViewTransform {
  // keep the image point under the cursor fixed while zooming
  const anchor = screenToImage(t, screenPoint);
  const zoom = Math.min(Math.max(t.zoom * factor, 0.25), 32);
  return {
    zoom,
    panX: screenPoint[0] - anchor[0] * zoom,
    panY: screenPoint[1] - anchor[1] * zoom,
  };
}

export function panBy(t: ViewTransform, dx: number, dy: number): ViewTransform {
  return { ...t, panX: t.panX + dx, panY: t.panY + dy };
}

/** Clamp an image-space point into the image rectangle; flags when clamped. */
export function clampToImage(
  p: Point,
  width: number,
  height: number
): { point: Point; clamped: boolean } {
  const x = Math.min(Math.max(p[0], 0), width - 1);
  const y = Math.min(Math.max(p[1], 0), height - 1);
  return { point: [x, y], clamped: x !== p[0] || y !== p[1] };
}
