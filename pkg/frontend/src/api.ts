import type {
  EventDetail,
  EventRecord,
  EventStatus,
  JobDetail,
  ModelDoc,
  ModelKind,
  ReviewRequest,
  SessionDoc,
  TimelineDoc,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

type FetchLike = typeof fetch;

/** Thin typed client over the service HTTP API. */
export class ApiClient {
  constructor(
    public readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
    private readonly token?: string,
  ) {}

  private headers(json = false): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["Content-Type"] = "application/json";
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: unknown };
        if (body.detail !== undefined) detail = JSON.stringify(body.detail);
      } catch {
        // non-JSON error body; keep statusText
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  healthz(): Promise<{ status: string }> {
    return this.request("/healthz", { headers: this.headers() });
  }

  sessions(): Promise<SessionDoc[]> {
    return this.request("/sessions", { headers: this.headers() });
  }

  timeline(sessionId: string): Promise<TimelineDoc> {
    return this.request(`/sessions/${encodeURIComponent(sessionId)}/timeline`, {
      headers: this.headers(),
    });
  }

  events(opts: { status?: EventStatus; since?: number } = {}): Promise<EventRecord[]> {
    const params = new URLSearchParams();
    if (opts.status) params.set("status", opts.status);
    if (opts.since !== undefined) params.set("since", String(opts.since));
    const query = params.size ? `?${params}` : "";
    return this.request(`/events${query}`, { headers: this.headers() });
  }

  event(eventId: string): Promise<EventDetail> {
    return this.request(`/events/${encodeURIComponent(eventId)}`, {
      headers: this.headers(),
    });
  }

  review(eventId: string, body: ReviewRequest): Promise<{ event: EventRecord["event"] }> {
    return this.request(`/events/${encodeURIComponent(eventId)}/review`, {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify(body),
    });
  }

  retrain(kind: ModelKind): Promise<{ job: JobDetail["job"] }> {
    return this.request("/retrain", {
      method: "POST",
      headers: this.headers(true),
      body: JSON.stringify({ kind }),
    });
  }

  job(jobId: string): Promise<JobDetail> {
    return this.request(`/retrain/${encodeURIComponent(jobId)}`, {
      headers: this.headers(),
    });
  }

  models(): Promise<Record<ModelKind, ModelDoc[]>> {
    return this.request("/models", { headers: this.headers() });
  }

  alertStreamUrl(cursor: number): string {
    return `${this.baseUrl}/alerts/stream?cursor=${cursor}`;
  }
}
