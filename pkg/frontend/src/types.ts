/** Shared wire types matching the service's JSON schemas. */

export type Point = [number, number];

export interface ContourJson {
  closed: boolean;
  points: Point[];
}

export interface ImageInfo {
  id: string;
  width: number;
  height: number;
}

export interface CorrectionSegment {
  author?: string;
  points: Point[];
  closed?: boolean;
  created_at?: string;
}

export interface CorrectionsFile {
  image: string;
  segments: CorrectionSegment[];
}

export interface JobStatus {
  job: string;
  status: "running" | "done" | "failed" | "idle";
  epoch: number;
  mean_loss: number | null;
  error: string | null;
}

export function isPoint(p: unknown): p is Point {
  return (
    Array.isArray(p) &&
    p.length === 2 &&
    typeof p[0] === "number" &&
    typeof p[1] === "number" &&
    Number.isFinite(p[0]) &&
    Number.isFinite(p[1])
  );
}

/** Validate a corrections payload against the documented schema before dispatch. */
export function validateCorrections(payload: CorrectionsFile): string | null {
  if (!payload.image) return "image id missing";
  if (!Array.isArray(payload.segments) || payload.segments.length === 0) {
    return "segments must be a non-empty list";
  }
  for (let i = 0; i < payload.segments.length; i++) {
    const seg = payload.segments[i];
    if (!Array.isArray(seg.points) || seg.points.length < 2) {
      return `segments[${i}] needs at least 2 points`;
    }
    for (const p of seg.points) {
      if (!isPoint(p)) return `segments[${i}] has a non-finite point`;
    }
  }
  return null;
}
