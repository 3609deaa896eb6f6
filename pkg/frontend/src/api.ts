/** Thin client over the correction service endpoints. */

import type { ContourJson, CorrectionsFile, ImageInfo, JobStatus } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(res: Response): Promise<T> {
  if (!res.ok) {
    let detail = res.statusText;
    try {
      const body = await res.json();
      detail = JSON.stringify(body.detail ?? body);
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(res.status, detail);
  }
  return (await res.json()) as T;
}

export class Api {
  constructor(private base = "") {}

  listImages(): Promise<{ images: ImageInfo[] }> {
    return fetch(`${this.base}/api/images`).then((r) => asJson(r));
  }

  imageUrl(id: string): string {
    return `${this.base}/api/image/${id}`;
  }

  getPrediction(id: string): Promise<ContourJson> {
    return fetch(`${this.base}/api/prediction/${id}`).then((r) => asJson(r));
  }

  getCorrections(id: string): Promise<CorrectionsFile> {
    return fetch(`${this.base}/api/corrections/${id}`).then((r) => asJson(r));
  }

  postCorrections(id: string, payload: CorrectionsFile): Promise<CorrectionsFile> {
    return fetch(`${this.base}/api/corrections/${id}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    }).then((r) => asJson(r));
  }

  triggerFinetune(overrides: Record<string, unknown> = {}): Promise<{ job: string }> {
    return fetch(`${this.base}/api/finetune`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(overrides),
    }).then((r) => asJson(r));
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return fetch(`${this.base}/api/job/${jobId}`).then((r) => asJson(r));
  }

  metrics(): Promise<unknown> {
    return fetch(`${this.base}/api/metrics`).then((r) => asJson(r));
  }
}
