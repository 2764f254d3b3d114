import type { ApiClient } from "./api.js";
import type {
  EventDoc,
  EventStatus,
  JobDetail,
  ModelDoc,
  ModelKind,
  ReviewDecision,
} from "./types.js";
import type { StreamStatus } from "./sse.js";

export interface EventCard {
  id: string;
  status: EventStatus;
  modality: string;
  onsetMs: number;
  offsetMs: number | null;
  recordStartMs: number;
  recordEndMs: number | null;
  peakScore: number;
  evidence: [number, number][];
  truncated: boolean;
  cursor: number;
  /** set while a review round-trip is in flight (optimistic state) */
  pendingReview: ReviewDecision | null;
  lastError: string | null;
}

function cardFromDoc(doc: EventDoc, cursor: number, prev?: EventCard): EventCard {
  return {
    id: doc.event_id,
    status: doc.status,
    modality: doc.modality,
    onsetMs: doc.onset_ms,
    offsetMs: doc.offset_ms,
    recordStartMs: doc.record_start_ms,
    recordEndMs: doc.record_end_ms,
    peakScore: doc.peak_score,
    evidence: doc.evidence,
    truncated: doc.truncated,
    cursor: Math.max(cursor, prev?.cursor ?? 0),
    pendingReview: prev?.pendingReview ?? null,
    lastError: prev?.lastError ?? null,
  };
}

/**
 * Client-side view model. Every card is derivable from the latest server
 * payload for that event id plus at most one in-flight optimistic review;
 * a full reload (backfill from cursor 0) reproduces identical state.
 */
export class DashboardStore {
  readonly events = new Map<string, EventCard>();
  private order: string[] = [];
  connection: StreamStatus = "connecting";
  models: Record<string, ModelDoc[]> = {};
  jobs: JobDetail[] = [];
  private listeners: (() => void)[] = [];

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  setConnection(status: StreamStatus): void {
    this.connection = status;
    this.notify();
  }

  /** Apply a server event payload; duplicates (same id) update in place. */
  applyEventDoc(doc: EventDoc, cursor = 0): void {
    const prev = this.events.get(doc.event_id);
    if (!prev) this.order.push(doc.event_id);
    this.events.set(doc.event_id, cardFromDoc(doc, cursor, prev));
    this.notify();
  }

  applyAlertData(data: string): void {
    let doc: EventDoc;
    try {
      doc = JSON.parse(data) as EventDoc;
    } catch {
      return; // malformed stream record: ignore, backfill will repair
    }
    this.applyEventDoc(doc);
  }

  maxCursor(): number {
    let max = 0;
    for (const card of this.events.values()) max = Math.max(max, card.cursor);
    return max;
  }

  cards(): EventCard[] {
    return this.order
      .map((id) => this.events.get(id))
      .filter((c): c is EventCard => c !== undefined);
  }

  alertFeed(): EventCard[] {
    return this.cards()
      .slice()
      .sort((a, b) => b.onsetMs - a.onsetMs);
  }

  reviewQueue(): EventCard[] {
    return this.cards().filter((c) => c.status === "closed");
  }

  byStatus(status: EventStatus): EventCard[] {
    return this.cards().filter((c) => c.status === status);
  }

  /** Clamp proposed bounds to the recorded context buffer range. */
  clampBounds(card: EventCard, startMs: number, endMs: number): [number, number] {
    const lo = card.recordStartMs;
    const hi = card.recordEndMs ?? (card.offsetMs ?? card.onsetMs) + 1;
    const start = Math.min(Math.max(startMs, lo), hi - 1);
    const end = Math.max(Math.min(endMs, hi), start + 1);
    return [start, end];
  }

  /**
   * Optimistic review: the card flips immediately, then reconciles against
   * the server response; any 4xx rolls the card back and surfaces the error.
   */
  async submitReview(
    api: ApiClient,
    eventId: string,
    decision: ReviewDecision,
    reviewer: string,
    bounds?: [number, number],
    note?: string,
  ): Promise<boolean> {
    const card = this.events.get(eventId);
    if (!card) throw new Error(`unknown event ${eventId}`);
    const rollback: EventCard = { ...card };
    card.status = decision === "confirm" ? "confirmed" : "rejected";
    card.pendingReview = decision;
    card.lastError = null;
    this.notify();
    try {
      const body = {
        decision,
        reviewer,
        note,
        ...(bounds
          ? { adjusted_start_ms: bounds[0], adjusted_end_ms: bounds[1] }
          : {}),
      };
      const resp = await api.review(eventId, body);
      const prev = this.events.get(eventId);
      const updated = cardFromDoc(resp.event, prev?.cursor ?? 0);
      this.events.set(eventId, updated);
      this.notify();
      return true;
    } catch (err) {
      rollback.pendingReview = null;
      rollback.lastError = err instanceof Error ? err.message : String(err);
      this.events.set(eventId, rollback);
      this.notify();
      return false;
    }
  }

  async refreshModels(api: ApiClient): Promise<void> {
    this.models = await api.models();
    this.notify();
  }

  async triggerRetrain(api: ApiClient, kind: ModelKind): Promise<JobDetail | null> {
    try {
      const created = await api.retrain(kind);
      const detail = await api.job(created.job.job_id);
      this.upsertJob(detail);
      return detail;
    } catch (err) {
      // busy (409) is non-blocking: surface nothing fatal, keep existing jobs
      return null;
    }
  }

  upsertJob(detail: JobDetail): void {
    const idx = this.jobs.findIndex((j) => j.job.job_id === detail.job.job_id);
    if (idx >= 0) this.jobs[idx] = detail;
    else this.jobs.push(detail);
    this.notify();
  }

  async pollJob(api: ApiClient, jobId: string, intervalMs = 500, maxPolls = 240): Promise<JobDetail> {
    for (let i = 0; i < maxPolls; i++) {
      const detail = await api.job(jobId);
      this.upsertJob(detail);
      if (detail.job.status === "done" || detail.job.status === "failed") {
        await this.refreshModels(api);
        return detail;
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
    throw new Error(`job ${jobId} did not finish`);
  }
}
