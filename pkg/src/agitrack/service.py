"""Event store, clinician review workflow, retraining orchestration, and the
HTTP surface the review dashboard consumes.

Persistence is one append-only JSONL log; all state is a pure fold over the
log, so replaying it after a crash reconstructs the exact store. Confirmed
events append AGITATION label intervals that the next retrain snapshot picks
up; a new model only becomes the serving model when its held-out AUC does
not regress more than the guard threshold.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, StreamingResponse

from .core import (
    LabelClass,
    LabelInterval,
    LabelSource,
    Timestamp,
    ValidationError,
)
from .realtime import DetectedEvent, EventStatus

AUC_GUARD = 0.02


class NotFoundError(KeyError):
    pass


class ConflictError(ValueError):
    pass


class InvalidStateError(ValueError):
    pass


class BusyError(ValueError):
    pass


class ReviewDecisionKind(str, Enum):
    CONFIRM = "confirm"
    REJECT = "reject"


class JobStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class ModelKind(str, Enum):
    FOREST = "forest"
    RECURRENT = "recurrent"


@dataclass(frozen=True)
class ReviewDecision:
    event_id: str
    decision: ReviewDecisionKind
    reviewer: str
    reviewed_at: Timestamp
    adjusted_start: Optional[Timestamp] = None
    adjusted_end: Optional[Timestamp] = None
    note: Optional[str] = None

    def __post_init__(self) -> None:
        if (self.adjusted_start is None) != (self.adjusted_end is None):
            raise ValidationError("adjusted bounds must be given together")
        if self.adjusted_start is not None and not self.adjusted_start < self.adjusted_end:
            raise ValidationError("adjusted_start must precede adjusted_end")

    def to_doc(self) -> dict:
        return {
            "event_id": self.event_id,
            "decision": self.decision.value,
            "reviewer": self.reviewer,
            "reviewed_at_ms": self.reviewed_at,
            "adjusted_start_ms": self.adjusted_start,
            "adjusted_end_ms": self.adjusted_end,
            "note": self.note,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ReviewDecision":
        return cls(
            event_id=doc["event_id"],
            decision=ReviewDecisionKind(doc["decision"]),
            reviewer=doc["reviewer"],
            reviewed_at=int(doc["reviewed_at_ms"]),
            adjusted_start=(
                None if doc.get("adjusted_start_ms") is None else int(doc["adjusted_start_ms"])
            ),
            adjusted_end=(
                None if doc.get("adjusted_end_ms") is None else int(doc["adjusted_end_ms"])
            ),
            note=doc.get("note"),
        )


@dataclass
class RetrainJob:
    job_id: str
    kind: ModelKind
    snapshot_id: str
    status: JobStatus
    created_at: Timestamp
    model_version: Optional[int] = None
    auc: Optional[float] = None
    swapped: Optional[bool] = None
    message: Optional[str] = None

    def to_doc(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind.value,
            "snapshot_id": self.snapshot_id,
            "status": self.status.value,
            "created_at_ms": self.created_at,
            "model_version": self.model_version,
            "auc": self.auc,
            "swapped": self.swapped,
            "message": self.message,
        }


@dataclass
class ModelVersion:
    kind: ModelKind
    version: int
    auc: Optional[float]
    path: Optional[str]
    serving: bool

    def to_doc(self) -> dict:
        return {
            "kind": self.kind.value,
            "version": self.version,
            "auc": self.auc,
            "path": self.path,
            "serving": self.serving,
        }


def _label_to_doc(iv: LabelInterval) -> dict:
    return {
        "start_ms": iv.start,
        "end_ms": iv.end,
        "class": iv.klass.value,
        "source": iv.source.value,
    }


def _label_from_doc(doc: dict) -> LabelInterval:
    return LabelInterval(
        int(doc["start_ms"]),
        int(doc["end_ms"]),
        LabelClass(doc["class"]),
        LabelSource(doc["source"]),
    )


class EventStore:
    """Append-only log with a folded in-memory view.

    Single-writer: every append happens under one lock and goes straight to
    disk; reads serve from the folded state. Event records supersede older
    ones for the same event id along the OPEN -> CLOSED -> reviewed
    lifecycle; nothing is ever rewritten in place.
    """

    def __init__(self, log_path: str) -> None:
        self.log_path = log_path
        self._lock = threading.RLock()
        self.seq = 0
        self.events: Dict[str, DetectedEvent] = {}
        self.event_seq: Dict[str, int] = {}
        self.event_order: List[str] = []
        self.reviews: Dict[str, List[ReviewDecision]] = {}
        self.review_labels: Dict[str, LabelInterval] = {}
        self.jobs: Dict[str, RetrainJob] = {}
        self.snapshots: Dict[str, dict] = {}
        self.models: Dict[ModelKind, List[ModelVersion]] = {k: [] for k in ModelKind}
        if os.path.exists(log_path):
            with open(log_path, "r", encoding="utf-8") as fh:
                content = fh.read()
            body, newline, tail = content.rpartition("\n")
            if tail:
                # unterminated tail = append torn by a crash; it was never
                # acknowledged, so drop it and realign the file
                with open(log_path, "w", encoding="utf-8") as fh:
                    fh.write(body + newline)
            for line in body.split("\n"):
                if line.strip():
                    self._fold(json.loads(line))

    # -- folding ---------------------------------------------------------------

    def _fold(self, record: dict) -> None:
        kind = record["type"]
        self.seq = max(self.seq, int(record["seq"]))
        if kind == "event":
            event = DetectedEvent.from_doc(record["event"])
            if event.event_id not in self.events:
                self.event_order.append(event.event_id)
            self.events[event.event_id] = event
            self.event_seq[event.event_id] = int(record["seq"])
        elif kind == "review":
            decision = ReviewDecision.from_doc(record["review"])
            self.reviews.setdefault(decision.event_id, []).append(decision)
            event = self.events[decision.event_id]
            event.status = (
                EventStatus.CONFIRMED
                if decision.decision == ReviewDecisionKind.CONFIRM
                else EventStatus.REJECTED
            )
        elif kind == "label":
            self.review_labels[record["event_id"]] = _label_from_doc(record["label"])
        elif kind == "snapshot":
            self.snapshots[record["snapshot_id"]] = record["snapshot"]
        elif kind == "job":
            doc = record["job"]
            job = RetrainJob(
                job_id=doc["job_id"],
                kind=ModelKind(doc["kind"]),
                snapshot_id=doc["snapshot_id"],
                status=JobStatus(doc["status"]),
                created_at=int(doc["created_at_ms"]),
                model_version=doc.get("model_version"),
                auc=doc.get("auc"),
                swapped=doc.get("swapped"),
                message=doc.get("message"),
            )
            self.jobs[job.job_id] = job
        elif kind == "model":
            doc = record["model"]
            mv = ModelVersion(
                kind=ModelKind(doc["kind"]),
                version=int(doc["version"]),
                auc=doc.get("auc"),
                path=doc.get("path"),
                serving=bool(doc.get("serving")),
            )
            versions = self.models[mv.kind]
            if mv.serving:
                for other in versions:
                    other.serving = False
            existing = next((v for v in versions if v.version == mv.version), None)
            if existing is None:
                versions.append(mv)
            else:
                existing.auc = mv.auc
                existing.path = mv.path
                existing.serving = mv.serving
        else:
            raise ValidationError(f"unknown log record type: {kind}")

    def _append(self, record: dict) -> int:
        with self._lock:
            self.seq += 1
            record = dict(record, seq=self.seq)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._fold(record)
            return self.seq

    # -- operations ---------------------------------------------------------------

    def record_event(self, event: DetectedEvent) -> str:
        with self._lock:
            existing = self.events.get(event.event_id)
            if existing is not None:
                if existing.to_doc() == event.to_doc():
                    return event.event_id  # idempotent
                order = [
                    EventStatus.OPEN,
                    EventStatus.CLOSED,
                    EventStatus.CONFIRMED,
                    EventStatus.REJECTED,
                ]
                if order.index(event.status) < order.index(existing.status):
                    same_identity = (
                        event.onset == existing.onset
                        and event.modality == existing.modality
                    )
                    if event.status == EventStatus.CLOSED and same_identity:
                        return event.event_id  # redelivery after review: no-op
                    raise ConflictError(
                        f"event {event.event_id}: cannot regress {existing.status.value} "
                        f"-> {event.status.value}"
                    )
                if event.status == existing.status and event.onset != existing.onset:
                    raise ConflictError(
                        f"event {event.event_id}: conflicting duplicate content"
                    )
                if event.onset != existing.onset or event.modality != existing.modality:
                    raise ConflictError(
                        f"event {event.event_id}: onset/modality may not change"
                    )
            self._append({"type": "event", "event": event.to_doc()})
            return event.event_id

    def submit_review(self, decision: ReviewDecision) -> DetectedEvent:
        with self._lock:
            event = self.events.get(decision.event_id)
            if event is None:
                raise NotFoundError(f"unknown event: {decision.event_id}")
            if event.status == EventStatus.OPEN:
                raise InvalidStateError("cannot review an event that is still open")
            start = decision.adjusted_start if decision.adjusted_start is not None else event.onset
            end = decision.adjusted_end if decision.adjusted_end is not None else event.offset
            if end is None or not start < end:
                raise ValidationError("review interval must be non-empty")
            klass = (
                LabelClass.AGITATION
                if decision.decision == ReviewDecisionKind.CONFIRM
                else LabelClass.NORMAL
            )
            self._append({"type": "review", "review": decision.to_doc()})
            self._append(
                {
                    "type": "label",
                    "event_id": decision.event_id,
                    "label": _label_to_doc(
                        LabelInterval(start, end, klass, LabelSource.VIDEO_REVIEW)
                    ),
                }
            )
            return self.events[decision.event_id]

    def record_snapshot(self, snapshot_id: str, snapshot: dict) -> None:
        self._append({"type": "snapshot", "snapshot_id": snapshot_id, "snapshot": snapshot})

    def record_job(self, job: RetrainJob) -> None:
        self._append({"type": "job", "job": job.to_doc()})

    def record_model(self, model: ModelVersion) -> None:
        self._append({"type": "model", "model": model.to_doc()})

    # -- queries ---------------------------------------------------------------

    def list_events(
        self, status: Optional[EventStatus] = None, since: Optional[int] = None
    ) -> List[Tuple[int, DetectedEvent]]:
        with self._lock:
            out = []
            for event_id in self.event_order:
                seq = self.event_seq[event_id]
                event = self.events[event_id]
                if status is not None and event.status != status:
                    continue
                if since is not None and seq <= since:
                    continue
                out.append((seq, event))
            return out

    def get_event(self, event_id: str) -> DetectedEvent:
        with self._lock:
            event = self.events.get(event_id)
            if event is None:
                raise NotFoundError(f"unknown event: {event_id}")
            return event

    def confirmed_labels(self) -> List[LabelInterval]:
        """Active review label per event, AGITATION confirmations only."""
        with self._lock:
            return [
                iv for iv in self.review_labels.values() if iv.klass == LabelClass.AGITATION
            ]

    def all_review_labels(self) -> List[LabelInterval]:
        with self._lock:
            return list(self.review_labels.values())

    def serving_model(self, kind: ModelKind) -> Optional[ModelVersion]:
        with self._lock:
            return next((v for v in self.models[kind] if v.serving), None)

    def running_job(self, kind: ModelKind) -> Optional[RetrainJob]:
        with self._lock:
            return next(
                (
                    j
                    for j in self.jobs.values()
                    if j.kind == kind and j.status in (JobStatus.QUEUED, JobStatus.RUNNING)
                ),
                None,
            )

    def state_fingerprint(self) -> dict:
        """Deterministic full-state view; used by durability checks."""
        with self._lock:
            return {
                "seq": self.seq,
                "events": {k: v.to_doc() for k, v in sorted(self.events.items())},
                "event_seq": dict(sorted(self.event_seq.items())),
                "reviews": {
                    k: [d.to_doc() for d in v] for k, v in sorted(self.reviews.items())
                },
                "labels": {
                    k: _label_to_doc(v) for k, v in sorted(self.review_labels.items())
                },
                "jobs": {k: v.to_doc() for k, v in sorted(self.jobs.items())},
                "snapshots": dict(sorted(self.snapshots.items())),
                "models": {
                    k.value: [m.to_doc() for m in v] for k, v in self.models.items()
                },
            }


@dataclass
class RetrainOutcome:
    auc: Optional[float]
    model_path: Optional[str] = None
    message: Optional[str] = None


Retrainer = Callable[[ModelKind, List[LabelInterval]], RetrainOutcome]


class AgitrackService:
    """Store + review/retrain orchestration + alert fan-out, one session."""

    def __init__(
        self,
        store: EventStore,
        session_meta: Optional[dict] = None,
        base_labels: Optional[Sequence[LabelInterval]] = None,
        retrainer: Optional[Retrainer] = None,
        inline_jobs: bool = False,
    ) -> None:
        self.store = store
        self.session_meta = session_meta or {}
        self.base_labels = list(base_labels or [])
        self.retrainer = retrainer
        self.inline_jobs = inline_jobs
        self._subscribers: List[queue.Queue] = []
        self._sub_lock = threading.Lock()
        self._timeline: List[Tuple[int, float, str]] = []
        self._workers: List[threading.Thread] = []

    # -- alerts -----------------------------------------------------------------

    def subscribe_alerts(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._sub_lock:
            self._subscribers.append(q)
        return q

    def unsubscribe_alerts(self, q: queue.Queue) -> None:
        with self._sub_lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def _broadcast(self, seq: int, event: DetectedEvent) -> None:
        with self._sub_lock:
            for q in self._subscribers:
                q.put((seq, event))

    # -- engine-facing ------------------------------------------------------------

    def on_event(self, event: DetectedEvent) -> str:
        event_id = self.store.record_event(event)
        if event.status == EventStatus.OPEN:
            self._broadcast(self.store.event_seq[event_id], event)
        return event_id

    def on_score(self, t: int, score: float, modality) -> None:
        self._timeline.append((t, score, getattr(modality, "value", str(modality))))
        if len(self._timeline) > 200_000:
            del self._timeline[:100_000]

    # -- review / retrain -----------------------------------------------------------

    def review(self, decision: ReviewDecision) -> DetectedEvent:
        return self.store.submit_review(decision)

    def current_labels(self) -> List[LabelInterval]:
        return sorted(
            self.base_labels + self.store.confirmed_labels(), key=lambda iv: iv.start
        )

    def trigger_retrain(self, kind: ModelKind) -> RetrainJob:
        if self.retrainer is None:
            raise ValidationError("service has no retrainer configured")
        if self.store.running_job(kind) is not None:
            raise BusyError(f"a {kind.value} retrain job is already running")
        # store.seq is monotone across restarts, so ids never collide with
        # jobs recorded before a crash
        token = self.store.seq + 1
        job_id = f"job-{kind.value}-{token:06d}"
        snapshot_id = f"snap-{kind.value}-{token:06d}"
        labels = self.current_labels()
        snapshot = {
            "labels": [_label_to_doc(iv) for iv in labels],
            "n_labels": len(labels),
            "n_confirmed": len(self.store.confirmed_labels()),
        }
        self.store.record_snapshot(snapshot_id, snapshot)
        job = RetrainJob(
            job_id=job_id,
            kind=kind,
            snapshot_id=snapshot_id,
            status=JobStatus.QUEUED,
            created_at=int(time.time() * 1000),
        )
        self.store.record_job(job)
        if self.inline_jobs:
            self._run_job(job, labels)
        else:
            worker = threading.Thread(
                target=self._run_job, args=(job, labels), daemon=True
            )
            self._workers.append(worker)
            worker.start()
        return self.store.jobs[job.job_id]

    def _run_job(self, job: RetrainJob, labels: List[LabelInterval]) -> None:
        running = RetrainJob(
            job_id=job.job_id,
            kind=job.kind,
            snapshot_id=job.snapshot_id,
            status=JobStatus.RUNNING,
            created_at=job.created_at,
        )
        self.store.record_job(running)
        try:
            outcome = self.retrainer(job.kind, labels)
        except Exception as exc:  # the job must record its failure, not crash
            self.store.record_job(
                RetrainJob(
                    job_id=job.job_id,
                    kind=job.kind,
                    snapshot_id=job.snapshot_id,
                    status=JobStatus.FAILED,
                    created_at=job.created_at,
                    message=str(exc),
                )
            )
            return
        current = self.store.serving_model(job.kind)
        versions = self.store.models[job.kind]
        new_version = max((v.version for v in versions), default=0) + 1
        swap = True
        message = None
        if (
            current is not None
            and current.auc is not None
            and outcome.auc is not None
            and outcome.auc < current.auc - AUC_GUARD
        ):
            swap = False
            message = (
                f"swap withheld: new AUC {outcome.auc:.4f} regressed more than "
                f"{AUC_GUARD} below serving AUC {current.auc:.4f}"
            )
        self.store.record_model(
            ModelVersion(
                kind=job.kind,
                version=new_version,
                auc=outcome.auc,
                path=outcome.model_path,
                serving=swap,
            )
        )
        self.store.record_job(
            RetrainJob(
                job_id=job.job_id,
                kind=job.kind,
                snapshot_id=job.snapshot_id,
                status=JobStatus.DONE,
                created_at=job.created_at,
                model_version=new_version,
                auc=outcome.auc,
                swapped=swap,
                message=message or outcome.message,
            )
        )

    def register_model(self, kind: ModelKind, auc: Optional[float], path: Optional[str]) -> None:
        versions = self.store.models[kind]
        version = max((v.version for v in versions), default=0) + 1
        self.store.record_model(
            ModelVersion(kind=kind, version=version, auc=auc, path=path, serving=True)
        )

    def timeline(self) -> List[Tuple[int, float, str]]:
        return list(self._timeline)


def create_app(service: AgitrackService, token: Optional[str] = None) -> FastAPI:
    """FastAPI application over the service; bodies are JSON throughout."""
    app = FastAPI(title="agitrack", version="0.1.0")
    token = token if token is not None else os.environ.get("AGITRACK_TOKEN")

    def check_auth(request: Request) -> None:
        if not token:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or invalid token")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/sessions")
    def sessions(request: Request):
        check_auth(request)
        return [service.session_meta] if service.session_meta else []

    @app.get("/sessions/{session_id}/timeline")
    def timeline(session_id: str, request: Request):
        check_auth(request)
        if service.session_meta.get("session_id") != session_id:
            raise HTTPException(status_code=404, detail="unknown session")
        return {
            "scores": [
                {"t_ms": t, "score": s, "modality": m} for t, s, m in service.timeline()
            ],
            "labels": [_label_to_doc(iv) for iv in service.current_labels()],
        }

    @app.get("/events")
    def list_events(request: Request, status: Optional[str] = None, since: Optional[int] = None):
        check_auth(request)
        try:
            status_f = EventStatus(status) if status else None
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown status {status!r}")
        records = service.store.list_events(status_f, since)
        return [
            {"cursor": seq, "event": event.to_doc()} for seq, event in records
        ]

    @app.get("/events/{event_id}")
    def get_event(event_id: str, request: Request):
        check_auth(request)
        try:
            event = service.store.get_event(event_id)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="unknown event")
        return {
            "cursor": service.store.event_seq[event_id],
            "event": event.to_doc(),
            "reviews": [d.to_doc() for d in service.store.reviews.get(event_id, [])],
        }

    @app.post("/events/{event_id}/review")
    def review_event(event_id: str, body: dict, request: Request):
        check_auth(request)
        try:
            decision = ReviewDecision(
                event_id=event_id,
                decision=ReviewDecisionKind(body["decision"]),
                reviewer=str(body.get("reviewer", "")),
                reviewed_at=int(time.time() * 1000),
                adjusted_start=body.get("adjusted_start_ms"),
                adjusted_end=body.get("adjusted_end_ms"),
                note=body.get("note"),
            )
            if not decision.reviewer:
                raise ValidationError("reviewer is required")
            event = service.review(decision)
        except (KeyError, ValueError) as exc:
            if isinstance(exc, NotFoundError):
                raise HTTPException(status_code=404, detail=str(exc))
            if isinstance(exc, InvalidStateError):
                raise HTTPException(status_code=409, detail=str(exc))
            raise HTTPException(status_code=422, detail=str(exc))
        return {"event": event.to_doc()}

    @app.post("/retrain", status_code=201)
    def retrain(body: dict, request: Request):
        check_auth(request)
        try:
            kind = ModelKind(body["kind"])
        except (KeyError, ValueError):
            raise HTTPException(status_code=422, detail="kind must be forest|recurrent")
        try:
            job = service.trigger_retrain(kind)
        except BusyError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"job": job.to_doc()}

    @app.get("/retrain/{job_id}")
    def get_job(job_id: str, request: Request):
        check_auth(request)
        job = service.store.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail="unknown job")
        snapshot = service.store.snapshots.get(job.snapshot_id, {})
        return {"job": job.to_doc(), "snapshot": snapshot}

    @app.get("/models")
    def models(request: Request):
        check_auth(request)
        return {
            kind.value: [m.to_doc() for m in versions]
            for kind, versions in service.store.models.items()
        }

    @app.get("/alerts/stream")
    def alerts_stream(request: Request, cursor: int = 0, limit: int = 0):
        """SSE stream of event records; `cursor` resumes after the given
        sequence number, `limit` > 0 ends the stream after that many records
        (0 = stay open)."""
        check_auth(request)

        def generate():
            q = service.subscribe_alerts()
            try:
                sent = 0
                for seq, event in service.store.list_events(since=cursor):
                    yield f"id: {seq}\ndata: {json.dumps(event.to_doc())}\n\n"
                    sent += 1
                    if limit and sent >= limit:
                        return
                while True:
                    try:
                        seq, event = q.get(timeout=1.0)
                        yield f"id: {seq}\ndata: {json.dumps(event.to_doc())}\n\n"
                        sent += 1
                        if limit and sent >= limit:
                            return
                    except queue.Empty:
                        yield ": heartbeat\n\n"
            finally:
                service.unsubscribe_alerts(q)

        return StreamingResponse(generate(), media_type="text/event-stream")

    @app.exception_handler(ValidationError)
    def validation_handler(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    return app
