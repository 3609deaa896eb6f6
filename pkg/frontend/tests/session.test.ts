import { describe, expect, it } from "vitest";

import { AnnotationSession } from "../src/session.js";
import type { Point } from "../src/types.js";
import { validateCorrections } from "../src/types.js";

const IMAGE = { id: "img_003", width: 64, height: 64 };

function draw(session: AnnotationSession, screenPoints: Point[]): boolean {
  session.beginStroke(screenPoints[0]);
  for (const p of screenPoints.slice(1)) session.extendStroke(p);
  return session.endStroke();
}

describe("annotation session", () => {
  it("stores strokes in image coordinates under zoom 4", () => {
    const s = new AnnotationSession(IMAGE);
    s.view = { zoom: 4, panX: 10, panY: 20 };
    draw(s, [[50, 60], [90, 100], [130, 140]]);
    expect(s.strokes.length).toBe(1);
    expect(s.strokes[0].points[0]).toEqual([10, 10]);
    expect(s.strokes[0].points[s.strokes[0].points.length - 1]).toEqual([30, 30]);
  });

  it("blocks single-point strokes client-side", () => {
    const s = new AnnotationSession(IMAGE);
    s.view = { zoom: 1, panX: 0, panY: 0 };
    s.beginStroke([5, 5]);
    expect(s.endStroke()).toBe(false);
    expect(s.strokes.length).toBe(0);
    expect(s.submittable).toBe(false);
  });

  it("clamps out-of-image points and raises the warning flag", () => {
    const s = new AnnotationSession(IMAGE);
    s.view = { zoom: 1, panX: 0, panY: 0 };
    draw(s, [[-10, 5], [10, 5]]);
    expect(s.clampWarning).toBe(true);
    for (const stroke of s.strokes) {
      for (const [x, y] of stroke.points) {
        expect(x).toBeGreaterThanOrEqual(0);
        expect(y).toBeGreaterThanOrEqual(0);
        expect(x).toBeLessThanOrEqual(63);
        expect(y).toBeLessThanOrEqual(63);
      }
    }
  });

  it("builds a two-stroke payload with order preserved", () => {
    const s = new AnnotationSession(IMAGE);
    s.view = { zoom: 1, panX: 0, panY: 0 };
    draw(s, [[1, 1], [9, 1]]);
    draw(s, [[2, 30], [2, 40], [12, 45]]);
    const payload = s.buildPayload();
    expect(payload.image).toBe("img_003");
    expect(payload.segments.length).toBe(2);
    expect(payload.segments[0].points[0]).toEqual([1, 1]);
    expect(payload.segments[1].points[0]).toEqual([2, 30]);
    expect(validateCorrections(payload)).toBeNull();
  });

  it("refuses to build an empty payload", () => {
    const s = new AnnotationSession(IMAGE);
    expect(() => s.buildPayload()).toThrow(/non-empty/);
  });

  it("validates schema problems", () => {
    expect(
      validateCorrections({ image: "x", segments: [{ points: [[1, 2]] as never }] })
    ).toMatch(/at least 2/);
    expect(
      validateCorrections({ image: "x", segments: [{ points: [[1, 2], [Infinity, 3]] }] })
    ).toMatch(/non-finite/);
  });
});
