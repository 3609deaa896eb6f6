/** Canvas rendering of image, prediction polyline, and correction strokes. */

import { AnnotationSession } from "./session.js";
import { imageToScreen } from "./transform.js";
import type { ContourJson, Point } from "./types.js";

function tracePolyline(
  ctx: CanvasRenderingContext2D,
  session: AnnotationSession,
  points: Point[],
  closed: boolean
): void {
  ctx.beginPath();
  points.forEach((p, i) => {
    const [x, y] = imageToScreen(session.view, p);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  if (closed) ctx.closePath();
  ctx.stroke();
}

export function renderView(
  ctx: CanvasRenderingContext2D,
  session: AnnotationSession,
  image: CanvasImageSource | null,
  prediction: ContourJson | null
): void {
  const canvas = ctx.canvas;
  ctx.setTransform(1, 0, 0, 1, 0, 0);
  ctx.fillStyle = "#181818";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  const { zoom, panX, panY } = session.view;
  if (image) {
    ctx.imageSmoothingEnabled = zoom < 1;
    ctx.setTransform(zoom, 0, 0, zoom, panX, panY);
    ctx.drawImage(image, 0, 0);
    ctx.setTransform(1, 0, 0, 1, 0, 0);
  }
  if (prediction) {
    ctx.strokeStyle = "#ffb336";
    ctx.lineWidth = 1.5;
    tracePolyline(ctx, session, prediction.points, prediction.closed);
    ctx.fillStyle = "#ffb336";
    for (const p of prediction.points) {
      const [x, y] = imageToScreen(session.view, p);
      ctx.fillRect(x - 1, y - 1, 2, 2);
    }
  }
  ctx.strokeStyle = "#4cd964";
  ctx.lineWidth = 2;
  for (const stroke of session.strokes) {
    tracePolyline(ctx, session, stroke.points, false);
  }
  if (session.active && session.active.points.length > 1) {
    ctx.strokeStyle = "#7adcf7";
    tracePolyline(ctx, session, session.active.points, false);
  }
}
