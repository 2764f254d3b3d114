import json
import os
import threading

import numpy as np
import pytest

from agitrack.core import LabelClass, LabelInterval, LabelSource, ValidationError
from agitrack.realtime import DetectedEvent, EventStatus, Modality
from agitrack.service import (
    AgitrackService,
    BusyError,
    ConflictError,
    EventStore,
    InvalidStateError,
    JobStatus,
    ModelKind,
    NotFoundError,
    RetrainOutcome,
    ReviewDecision,
    ReviewDecisionKind,
    create_app,
)


def make_event(eid="e1", onset=600_000, offset=720_000, status=EventStatus.CLOSED):
    return DetectedEvent(
        event_id=eid,
        onset=onset,
        offset=offset if status != EventStatus.OPEN else None,
        record_start=max(0, onset - 300_000),
        record_end=(offset + 300_000) if status != EventStatus.OPEN else None,
        modality=Modality.FUSED,
        peak_score=0.93,
        status=status,
        evidence=[(onset, 0.93)],
    )


def make_store(tmp_path, name="events.log"):
    return EventStore(str(tmp_path / name))


class TestEventLifecycle:
    def test_record_and_list(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        assert len(store.list_events()) == 1

    def test_idempotent_duplicate(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        store.record_event(make_event())
        assert len(store.list_events()) == 1

    def test_conflicting_duplicate_rejected(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        conflicting = make_event(onset=610_000)
        with pytest.raises(ConflictError):
            store.record_event(conflicting)
        assert store.get_event("e1").onset == 600_000

    def test_open_to_closed_lifecycle_update(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event(status=EventStatus.OPEN))
        store.record_event(make_event(status=EventStatus.CLOSED))
        assert store.get_event("e1").status == EventStatus.CLOSED
        with pytest.raises(ConflictError):
            store.record_event(make_event(status=EventStatus.OPEN))


class TestReview:
    def decision(self, eid="e1", kind=ReviewDecisionKind.CONFIRM, start=None, end=None):
        return ReviewDecision(
            event_id=eid,
            decision=kind,
            reviewer="dr-a",
            reviewed_at=1_000_000,
            adjusted_start=start,
            adjusted_end=end,
        )

    def test_confirm_adds_agitation_interval_with_adjusted_bounds(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        store.submit_review(self.decision(start=610_000, end=700_000))
        labels = store.confirmed_labels()
        assert len(labels) == 1
        assert (labels[0].start, labels[0].end) == (610_000, 700_000)
        assert labels[0].klass == LabelClass.AGITATION
        assert labels[0].source == LabelSource.VIDEO_REVIEW
        assert store.get_event("e1").status == EventStatus.CONFIRMED

    def test_confirm_without_adjustment_uses_event_bounds(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        store.submit_review(self.decision())
        labels = store.confirmed_labels()
        assert (labels[0].start, labels[0].end) == (600_000, 720_000)

    def test_reject_adds_no_agitation_interval(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        store.submit_review(self.decision(kind=ReviewDecisionKind.REJECT))
        assert store.confirmed_labels() == []
        all_labels = store.all_review_labels()
        assert len(all_labels) == 1 and all_labels[0].klass == LabelClass.NORMAL
        assert store.get_event("e1").status == EventStatus.REJECTED

    def test_superseding_decision_latest_wins_history_kept(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event())
        store.submit_review(self.decision(kind=ReviewDecisionKind.REJECT))
        store.submit_review(self.decision(kind=ReviewDecisionKind.CONFIRM))
        assert store.get_event("e1").status == EventStatus.CONFIRMED
        assert len(store.reviews["e1"]) == 2
        assert len(store.confirmed_labels()) == 1

    def test_unknown_event_not_found(self, tmp_path):
        store = make_store(tmp_path)
        with pytest.raises(NotFoundError):
            store.submit_review(self.decision(eid="nope"))

    def test_open_event_invalid_state(self, tmp_path):
        store = make_store(tmp_path)
        store.record_event(make_event(status=EventStatus.OPEN))
        with pytest.raises(InvalidStateError):
            store.submit_review(self.decision())

    def test_bad_adjusted_bounds_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            self.decision(start=700_000, end=610_000)


class FakeRetrainer:
    """Deterministic retrainer stub with a controllable AUC sequence."""

    def __init__(self, aucs):
        self.aucs = list(aucs)
        self.calls = []

    def __call__(self, kind, labels):
        self.calls.append((kind, list(labels)))
        return RetrainOutcome(auc=self.aucs.pop(0), model_path=None)


def make_service(tmp_path, aucs=(0.9,), **kw):
    store = make_store(tmp_path)
    retrainer = FakeRetrainer(aucs)
    service = AgitrackService(
        store,
        session_meta={"session_id": "s1", "participant_id": "p1", "t0_ms": 0, "duration_s": 3600.0},
        base_labels=[],
        retrainer=retrainer,
        inline_jobs=True,
        **kw,
    )
    return service, retrainer


class TestRetrain:
    def test_snapshot_contains_confirmed_interval(self, tmp_path):
        service, retrainer = make_service(tmp_path)
        service.store.record_event(make_event())
        service.review(
            ReviewDecision(
                event_id="e1",
                decision=ReviewDecisionKind.CONFIRM,
                reviewer="dr-a",
                reviewed_at=0,
                adjusted_start=605_000,
                adjusted_end=695_000,
            )
        )
        job = service.trigger_retrain(ModelKind.FOREST)
        assert job.status == JobStatus.DONE
        snapshot = service.store.snapshots[job.snapshot_id]
        assert {
            "start_ms": 605_000,
            "end_ms": 695_000,
            "class": "agitation",
            "source": "video_review",
        } in snapshot["labels"]
        assert retrainer.calls[0][0] == ModelKind.FOREST

    def test_swap_on_improvement_and_withheld_on_regression(self, tmp_path):
        service, _ = make_service(tmp_path, aucs=(0.90, 0.95, 0.80))
        j1 = service.trigger_retrain(ModelKind.FOREST)
        assert j1.swapped is True
        assert service.store.serving_model(ModelKind.FOREST).version == 1
        j2 = service.trigger_retrain(ModelKind.FOREST)
        assert j2.swapped is True
        assert service.store.serving_model(ModelKind.FOREST).version == 2
        j3 = service.trigger_retrain(ModelKind.FOREST)  # 0.80 < 0.95 - 0.02
        assert j3.status == JobStatus.DONE
        assert j3.swapped is False
        assert service.store.serving_model(ModelKind.FOREST).version == 2
        assert "withheld" in j3.message

    def test_concurrent_trigger_busy(self, tmp_path):
        store = make_store(tmp_path)
        release = threading.Event()

        def slow_retrainer(kind, labels):
            release.wait(timeout=5)
            return RetrainOutcome(auc=0.9)

        service = AgitrackService(store, retrainer=slow_retrainer, inline_jobs=False)
        service.trigger_retrain(ModelKind.FOREST)
        with pytest.raises(BusyError):
            service.trigger_retrain(ModelKind.FOREST)
        release.set()
        for worker in service._workers:
            worker.join(timeout=5)
        assert service.store.running_job(ModelKind.FOREST) is None

    def test_failed_retrainer_marks_job_failed(self, tmp_path):
        store = make_store(tmp_path)

        def boom(kind, labels):
            raise RuntimeError("no data")

        service = AgitrackService(store, retrainer=boom, inline_jobs=True)
        job = service.trigger_retrain(ModelKind.RECURRENT)
        assert job.status == JobStatus.FAILED
        assert "no data" in job.message


class TestDurability:
    def test_log_replay_rebuilds_identical_state(self, tmp_path):
        service, _ = make_service(tmp_path, aucs=[0.9] * 50)
        rng = np.random.default_rng(0)
        for i in range(60):
            op = rng.integers(0, 4)
            if op == 0:
                service.store.record_event(make_event(f"e{rng.integers(0, 20)}"))
            elif op == 1:
                try:
                    service.review(
                        ReviewDecision(
                            event_id=f"e{rng.integers(0, 20)}",
                            decision=(
                                ReviewDecisionKind.CONFIRM
                                if rng.random() < 0.5
                                else ReviewDecisionKind.REJECT
                            ),
                            reviewer="dr",
                            reviewed_at=int(i),
                        )
                    )
                except (NotFoundError, InvalidStateError):
                    pass
            elif op == 2 and rng.random() < 0.3:
                try:
                    service.trigger_retrain(ModelKind.FOREST)
                except BusyError:
                    pass
        rebuilt = EventStore(service.store.log_path)
        assert rebuilt.state_fingerprint() == service.store.state_fingerprint()

    def test_append_only_log_never_shrinks(self, tmp_path):
        service, _ = make_service(tmp_path)
        path = service.store.log_path
        sizes = []
        service.store.record_event(make_event("a"))
        sizes.append(os.path.getsize(path))
        service.store.record_event(make_event("b"))
        sizes.append(os.path.getsize(path))
        service.review(
            ReviewDecision("a", ReviewDecisionKind.CONFIRM, "dr", 0)
        )
        sizes.append(os.path.getsize(path))
        assert sizes == sorted(sizes) and sizes[0] > 0


@pytest.fixture()
def client(tmp_path):
    from fastapi.testclient import TestClient

    service, _ = make_service(tmp_path, aucs=[0.9] * 5)
    service.store.record_event(make_event("e1"))
    service.store.record_event(make_event("e2", onset=2_000_000, offset=2_100_000))
    app = create_app(service, token="")
    return TestClient(app), service


class TestHttpApi:
    def test_healthz(self, client):
        c, _ = client
        assert c.get("/healthz").json() == {"status": "ok"}

    def test_sessions_and_timeline(self, client):
        c, service = client
        service.on_score(60_000, 0.4, Modality.WRIST)
        assert c.get("/sessions").json()[0]["session_id"] == "s1"
        body = c.get("/sessions/s1/timeline").json()
        assert body["scores"][0]["score"] == 0.4
        assert c.get("/sessions/nope/timeline").status_code == 404

    def test_event_listing_and_cursor(self, client):
        c, _ = client
        events = c.get("/events").json()
        assert len(events) == 2
        cursor = events[0]["cursor"]
        later = c.get(f"/events?since={cursor}").json()
        assert len(later) == 1
        assert later[0]["event"]["event_id"] == "e2"

    def test_event_detail_includes_evidence(self, client):
        c, _ = client
        body = c.get("/events/e1").json()
        assert body["event"]["evidence"] == [[600_000, 0.93]]
        assert c.get("/events/ghost").status_code == 404

    def test_review_endpoint_status_codes(self, client):
        c, service = client
        ok = c.post(
            "/events/e1/review",
            json={
                "decision": "confirm",
                "reviewer": "dr-b",
                "adjusted_start_ms": 610_000,
                "adjusted_end_ms": 700_000,
            },
        )
        assert ok.status_code == 200
        assert ok.json()["event"]["status"] == "confirmed"
        assert c.post("/events/ghost/review", json={"decision": "confirm", "reviewer": "x"}).status_code == 404
        bad = c.post("/events/e2/review", json={"decision": "maybe", "reviewer": "x"})
        assert bad.status_code == 422
        service.store.record_event(make_event("e3", status=EventStatus.OPEN))
        open_review = c.post(
            "/events/e3/review", json={"decision": "confirm", "reviewer": "x"}
        )
        assert open_review.status_code == 409

    def test_retrain_endpoints(self, client):
        c, _ = client
        created = c.post("/retrain", json={"kind": "forest"})
        assert created.status_code == 201
        job_id = created.json()["job"]["job_id"]
        got = c.get(f"/retrain/{job_id}")
        assert got.status_code == 200
        assert got.json()["job"]["status"] == "done"
        assert "labels" in got.json()["snapshot"]
        assert c.post("/retrain", json={"kind": "banana"}).status_code == 422
        assert c.get("/retrain/ghost").status_code == 404

    def test_models_view(self, client):
        c, _ = client
        c.post("/retrain", json={"kind": "forest"})
        models = c.get("/models").json()
        assert models["forest"][0]["serving"] is True

    def test_alert_stream_backlog(self, client):
        c, _ = client
        response = c.get("/alerts/stream?cursor=0&limit=2")
        assert response.status_code == 200
        records = [
            json.loads(line[len("data: ") :])
            for line in response.text.splitlines()
            if line.startswith("data: ")
        ]
        assert {r["event_id"] for r in records} == {"e1", "e2"}
        # cursor resume skips already-seen records
        ids = [
            int(line[len("id: ") :])
            for line in response.text.splitlines()
            if line.startswith("id: ")
        ]
        resumed = c.get(f"/alerts/stream?cursor={ids[0]}&limit=1")
        assert "e2" in resumed.text and "e1" not in resumed.text

    def test_auth_when_token_set(self, tmp_path):
        from fastapi.testclient import TestClient

        service, _ = make_service(tmp_path)
        app = create_app(service, token="sekret")
        c = TestClient(app)
        assert c.get("/events").status_code == 401
        assert c.get("/healthz").status_code == 200
        ok = c.get("/events", headers={"Authorization": "Bearer sekret"})
        assert ok.status_code == 200


def test_job_ids_unique_across_restart(tmp_path):
    service, _ = make_service(tmp_path, aucs=[0.9] * 4)
    j1 = service.trigger_retrain(ModelKind.FOREST)
    # restart: rebuild from the same log, trigger again
    rebuilt = EventStore(service.store.log_path)
    service2 = AgitrackService(
        rebuilt, retrainer=FakeRetrainer([0.9]), inline_jobs=True
    )
    j2 = service2.trigger_retrain(ModelKind.FOREST)
    assert j1.job_id != j2.job_id
    assert set(service2.store.jobs) >= {j1.job_id, j2.job_id}
    assert service2.store.jobs[j1.job_id].status == JobStatus.DONE


def test_torn_final_log_line_dropped(tmp_path):
    service, _ = make_service(tmp_path)
    service.store.record_event(make_event("a"))
    service.store.record_event(make_event("b"))
    path = service.store.log_path
    with open(path, "a", encoding="utf-8") as fh:
        fh.write('{"type":"event","seq":99,"event":{"event_id":"torn"')  # no newline, cut off
    rebuilt = EventStore(path)
    assert set(rebuilt.events) == {"a", "b"}
    # appending after recovery keeps the log replayable
    rebuilt.record_event(make_event("c"))
    again = EventStore(path)
    assert set(again.events) == {"a", "b", "c"}
