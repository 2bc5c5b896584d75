/** Typed client for the generation service REST API.
 *
 * All state lives server-side; this module only shapes requests and
 * responses. Errors carry the service's structured detail so the UI can
 * point at the offending frame when an envelope is rejected.
 */

export interface EnvelopePayload {
  hop: number;
  source_sample_rate: number;
  values: number[];
  revision?: number;
}

export interface SessionInfo {
  id: string;
  revision: number;
}

export interface GenerationParams {
  class?: number | null;
  embedding_ref?: string | null;
  seconds_total?: number | null;
  steps?: number | null;
  cfg_scale?: number | null;
  seed?: number;
}

export type JobState = "pending" | "running" | "done" | "failed";

export interface JobStatus {
  id: string;
  status: JobState;
  revision: number;
  e_l1_vs_target?: number | null;
  artifact?: string;
  error?: string;
}

export interface ErrorDetail {
  message: string;
  index?: number;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: ErrorDetail,
  ) {
    super(`HTTP ${status}: ${detail.message}`);
    this.name = "ApiError";
  }
}

function toDetail(body: unknown): ErrorDetail {
  // FastAPI wraps error payloads as {detail: ...}; detail is either a plain
  // string or our structured {message, index?} object
  if (typeof body === "object" && body !== null && "detail" in body) {
    const detail = (body as { detail: unknown }).detail;
    if (typeof detail === "string") return { message: detail };
    if (typeof detail === "object" && detail !== null && "message" in detail) {
      return detail as ErrorDetail;
    }
  }
  return { message: "request failed" };
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    // wrap the global so fetch is never invoked with a foreign `this`
    this.fetchImpl = fetchImpl ?? ((input, init) => globalThis.fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.base + path, init);
    if (!response.ok) {
      let body: unknown = null;
      try {
        body = await response.json();
      } catch {
        // non-JSON error body; fall through with a generic detail
      }
      throw new ApiError(response.status, toDetail(body));
    }
    return (await response.json()) as T;
  }

  private async binary(path: string): Promise<Uint8Array> {
    const response = await this.fetchImpl(this.base + path);
    if (!response.ok) {
      throw new ApiError(response.status, toDetail(await response.json().catch(() => null)));
    }
    return new Uint8Array(await response.arrayBuffer());
  }

  createSession(
    envelope: Omit<EnvelopePayload, "revision">,
    semantic?: Record<string, unknown>,
  ): Promise<SessionInfo> {
    return this.request("/v1/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ envelope, semantic }),
    });
  }

  getEnvelope(sessionId: string, rev?: number): Promise<EnvelopePayload> {
    const query = rev === undefined ? "" : `?rev=${rev}`;
    return this.request(`/v1/sessions/${sessionId}/envelope${query}`);
  }

  putEnvelope(
    sessionId: string,
    envelope: Omit<EnvelopePayload, "revision">,
  ): Promise<{ revision: number }> {
    return this.request(`/v1/sessions/${sessionId}/envelope`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(envelope),
    });
  }

  startGeneration(
    sessionId: string,
    params: GenerationParams,
  ): Promise<{ job: string; revision: number }> {
    return this.request(`/v1/sessions/${sessionId}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(params),
    });
  }

  job(jobId: string): Promise<JobStatus> {
    return this.request(`/v1/jobs/${jobId}`);
  }

  audio(sessionId: string, rev?: number): Promise<Uint8Array> {
    const query = rev === undefined ? "" : `?rev=${rev}`;
    return this.binary(`/v1/sessions/${sessionId}/audio${query}`);
  }

  measuredEnvelope(sessionId: string, rev?: number): Promise<EnvelopePayload> {
    const query = rev === undefined ? "" : `?rev=${rev}`;
    return this.request(`/v1/sessions/${sessionId}/measured-envelope${query}`);
  }

  extractEnvelope(
    wav: Uint8Array,
    opts: { window?: number; hop?: number; smooth?: number; normalize?: boolean } = {},
  ): Promise<EnvelopePayload> {
    const query = new URLSearchParams();
    if (opts.window !== undefined) query.set("window", String(opts.window));
    if (opts.hop !== undefined) query.set("hop", String(opts.hop));
    if (opts.smooth !== undefined) query.set("smooth", String(opts.smooth));
    if (opts.normalize) query.set("normalize", "true");
    const suffix = query.size ? `?${query}` : "";
    return this.request(`/v1/envelopes:extract${suffix}`, {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: wav as BodyInit,
    });
  }

  predictEnvelope(features: Uint8Array): Promise<EnvelopePayload> {
    return this.request("/v1/envelopes:predict", {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: features as BodyInit,
    });
  }
}
