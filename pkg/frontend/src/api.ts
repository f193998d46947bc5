/** REST client for the workbench service. The UI mutates server state only
 * through putAnnotations and submitJob; everything else is a read. */

import type {
  AnnotationDocument,
  AnnotationLayer,
  Job,
  JobRequest,
  SlideMeta,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** PUT at a stale revision: carries the server's current document. */
export class ConflictError extends Error {
  constructor(readonly current: AnnotationDocument) {
    super("revision conflict");
    this.name = "ConflictError";
  }
}

export class JobFailedError extends Error {
  constructor(readonly job: Job) {
    super(job.error ?? "job failed");
    this.name = "JobFailedError";
  }
}

async function errorMessage(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { error?: string };
    if (typeof body.error === "string") return body.error;
  } catch {
    /* non-JSON error body */
  }
  return `HTTP ${res.status}`;
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await fetch(this.baseUrl + path, init);
    if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
    return (await res.json()) as T;
  }

  async listSlides(): Promise<SlideMeta[]> {
    const body = await this.json<{ slides: SlideMeta[] }>("/api/slides");
    return body.slides;
  }

  getSlide(slideId: string): Promise<SlideMeta> {
    return this.json(`/api/slides/${slideId}`);
  }

  uploadSlide(data: BodyInit, name: string): Promise<SlideMeta> {
    const q = new URLSearchParams({ name });
    return this.json(`/api/slides?${q}`, { method: "POST", body: data });
  }

  tileUrl(slideId: string, level: number, x: number, y: number): string {
    return `${this.baseUrl}/api/slides/${slideId}/tiles/${level}/${x}_${y}`;
  }

  getAnnotations(slideId: string): Promise<AnnotationDocument> {
    return this.json(`/api/slides/${slideId}/annotations`);
  }

  /** Optimistic-concurrency save; throws ConflictError on a stale base. */
  async putAnnotations(
    slideId: string,
    layers: AnnotationLayer[],
    baseRevision: number,
  ): Promise<{ slide_id: string; revision: number }> {
    const res = await fetch(`${this.baseUrl}/api/slides/${slideId}/annotations`, {
      method: "PUT",
      headers: {
        "Content-Type": "application/json",
        "If-Match": String(baseRevision),
      },
      body: JSON.stringify({ layers }),
    });
    if (res.status === 409) {
      const body = (await res.json()) as { current: AnnotationDocument };
      throw new ConflictError(body.current);
    }
    if (!res.ok) throw new ApiError(res.status, await errorMessage(res));
    return (await res.json()) as { slide_id: string; revision: number };
  }

  submitJob(request: JobRequest): Promise<Job> {
    return this.json("/api/jobs", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
  }

  getJob(jobId: string): Promise<Job> {
    return this.json(`/api/jobs/${jobId}`);
  }

  /** Poll until the job is terminal; resolves on done, throws on failed. */
  async pollJob(
    jobId: string,
    opts: {
      intervalMs?: number;
      timeoutMs?: number;
      onProgress?: (job: Job) => void;
    } = {},
  ): Promise<Job> {
    const interval = opts.intervalMs ?? 500;
    const deadline = Date.now() + (opts.timeoutMs ?? 300_000);
    for (;;) {
      const job = await this.getJob(jobId);
      opts.onProgress?.(job);
      if (job.state === "done") return job;
      if (job.state === "failed") throw new JobFailedError(job);
      if (Date.now() > deadline) {
        throw new ApiError(0, `job ${jobId} did not finish in time`);
      }
      await new Promise((resolve) => setTimeout(resolve, interval));
    }
  }
}
