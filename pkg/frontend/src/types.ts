// JSON shapes served by the agitrack review service.

export type EventStatus = "open" | "closed" | "confirmed" | "rejected";
export type Modality = "wrist" | "video" | "fused";
export type ReviewDecision = "confirm" | "reject";
export type ModelKind = "forest" | "recurrent";

export interface EventDoc {
  event_id: string;
  onset_ms: number;
  offset_ms: number | null;
  record_start_ms: number;
  record_end_ms: number | null;
  modality: Modality;
  peak_score: number;
  status: EventStatus;
  evidence: [number, number][];
  truncated: boolean;
}

export interface EventRecord {
  cursor: number;
  event: EventDoc;
}

export interface EventDetail extends EventRecord {
  reviews: ReviewDoc[];
}

export interface ReviewDoc {
  event_id: string;
  decision: ReviewDecision;
  reviewer: string;
  reviewed_at_ms: number;
  adjusted_start_ms: number | null;
  adjusted_end_ms: number | null;
  note: string | null;
}

export interface ReviewRequest {
  decision: ReviewDecision;
  reviewer: string;
  adjusted_start_ms?: number;
  adjusted_end_ms?: number;
  note?: string;
}

export interface JobDoc {
  job_id: string;
  kind: ModelKind;
  snapshot_id: string;
  status: "queued" | "running" | "done" | "failed";
  created_at_ms: number;
  model_version: number | null;
  auc: number | null;
  swapped: boolean | null;
  message: string | null;
}

export interface LabelDoc {
  start_ms: number;
  end_ms: number;
  class: string;
  source: string;
}

export interface JobDetail {
  job: JobDoc;
  snapshot: { labels?: LabelDoc[]; n_labels?: number; n_confirmed?: number };
}

export interface ModelDoc {
  kind: ModelKind;
  version: number;
  auc: number | null;
  path: string | null;
  serving: boolean;
}

export interface SessionDoc {
  session_id: string;
  participant_id: string;
  t0_ms: number;
  duration_s: number;
}

export interface TimelineDoc {
  scores: { t_ms: number; score: number; modality: Modality }[];
  labels: LabelDoc[];
}
