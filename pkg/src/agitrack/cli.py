"""Operator command line: synth, ingest, features, train, prune, replay,
serve, report. Pipelines compose through files only; every stochastic step
takes --seed. Exit codes: 0 success, 1 validation, 2 runtime; errors go to
stderr as one JSON record per line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from .core import LabelClass, ValidationError
from . import forest as forest_mod
from . import ingest as ingest_mod
from . import pose as pose_mod
from . import realtime as realtime_mod
from . import seqnet as seqnet_mod
from . import synthgen as synthgen_mod
from . import wrist as wrist_mod

DATA_DIR_ENV = "AGITRACK_DATA_DIR"


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 1) -> None:
        super().__init__(message)
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 on flag/usage problems
        raise CliError(message, exit_code=1)


def _resolve(path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    base = os.environ.get(DATA_DIR_ENV)
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def _emit_error(message: str, kind: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _print(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, default=str) + "\n")


def known_dests(parser: argparse.ArgumentParser) -> set:
    dests = set()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                dests |= known_dests(sub)
        elif action.dest != "help":
            dests.add(action.dest)
    return dests


def build_parser() -> _Parser:
    parser = _Parser(prog="agitrack", description=__doc__)
    parser.add_argument(
        "--config",
        default=None,
        help="JSON file of flag defaults (explicit flags still win)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic session directory")
    p.add_argument("--spec", default="default", help="'default' or a JSON spec file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--duration", type=float, default=None, help="override duration_s")

    p = sub.add_parser("ingest", help="validate a session directory and report")
    p.add_argument("--session", required=True, dest="session_dir")

    p = sub.add_parser("features", help="emit feature files")
    p.add_argument("mode", choices=["wrist", "pose"])
    p.add_argument("--session", required=True, dest="session_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, default=None)
    p.add_argument("--stride", type=float, default=None)
    p.add_argument("--step-hz", type=float, default=5.0)
    p.add_argument("--participant", default=None)
    p.add_argument(
        "--include-biomarkers",
        action="store_true",
        help="append derived minute biomarkers as bm.* columns (wrist mode)",
    )

    p = sub.add_parser("train", help="train a model from a feature file")
    p.add_argument("mode", choices=["forest", "seq"])
    p.add_argument("--in", required=True, dest="in_path")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--kind",
        default=None,
        help="forest: extra_trees|random_forest|gradient_boosted; seq: lstm|gru",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--trace-out", default=None)
    p.add_argument("--include-preagitation", action="store_true")

    p = sub.add_parser("prune", help="per-class correlation pruning report")
    p.add_argument("--in", required=True, dest="in_path", help="pose sequence CSV")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="replay a session through the live engine")
    p.add_argument("--session", required=True, dest="session_dir")
    p.add_argument("--wrist-model", default=None)
    p.add_argument("--video-model", default=None)
    p.add_argument("--out", default=None, help="event log JSONL")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--fusion", choices=["or", "wrist_only", "video_only"], default="or")
    p.add_argument("--k-on", type=int, default=3)
    p.add_argument("--k-off", type=int, default=5)

    p = sub.add_parser("serve", help="start the review service on a session replay")
    p.add_argument("--session", required=True, dest="session_dir")
    p.add_argument("--wrist-model", default=None)
    p.add_argument("--video-model", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--log", default=None, help="event log path (default: in session dir)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--fusion", choices=["or", "wrist_only", "video_only"], default="or")
    p.add_argument("--k-on", type=int, default=3)
    p.add_argument("--k-off", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui-dir", default=None, help="static dashboard directory to mount")

    p = sub.add_parser("report", help="render metric/loss CSV traces to PNG plots")
    p.add_argument("--in", required=True, dest="in_path")
    p.add_argument("--out", required=True)
    return parser


def _load_spec(args) -> synthgen_mod.ScenarioSpec:
    if args.spec == "default":
        return synthgen_mod.default_spec(
            duration_s=args.duration if args.duration is not None else 7200.0,
            seed=args.seed,
        )
    with open(_resolve(args.spec), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    kwargs = {}
    if "episodes" in doc:
        kwargs["episodes"] = [synthgen_mod.Episode(**ep) for ep in doc.pop("episodes")]
    effects = synthgen_mod.EffectConfig(**doc.pop("effects", {}))
    doc.pop("seed", None)
    if args.duration is not None:
        doc["duration_s"] = args.duration
    return synthgen_mod.ScenarioSpec(effects=effects, seed=args.seed, **kwargs, **doc)


def _cmd_synth(args) -> int:
    spec = _load_spec(args)
    out_dir = _resolve(args.out)
    session = synthgen_mod.write_scenario(spec, out_dir)
    _print(
        {
            "session_dir": out_dir,
            "duration_s": spec.duration_s,
            "episodes": len(spec.episodes),
            "keypoint_frames": len(session.keypoints),
            "truth": [
                {"start_ms": iv.start, "end_ms": iv.end, "class": iv.klass.value}
                for iv in session.truth
            ],
        }
    )
    return 0


def _cmd_ingest(args) -> int:
    session = ingest_mod.load_session(_resolve(args.session_dir))
    _print(
        {
            "session_id": session.meta.session_id,
            "participant_id": session.meta.participant_id,
            "t0_ms": session.meta.t0,
            "duration_s": session.meta.duration_s,
            "channels": {
                ch.value: {
                    "rate_hz": float(s.rate_hz),
                    "samples": len(s),
                    "valid_fraction": float(np.mean(s.validity)) if len(s) else 0.0,
                }
                for ch, s in sorted(session.series.items(), key=lambda kv: kv[0].value)
            },
            "biomarker_records": len(session.biomarkers),
            "keypoint_frames": len(session.keypoints),
            "labels": len(session.labels),
        }
    )
    return 0


def _cmd_features(args) -> int:
    session = ingest_mod.load_session(_resolve(args.session_dir))
    out = _resolve(args.out)
    if args.mode == "wrist":
        window = args.window or 60.0
        stride = args.stride or window
        ds = wrist_mod.build_window_dataset(
            session.series,
            session.labels,
            session.meta.t0,
            session.end(),
            window_len_s=window,
            stride_s=stride,
            include_biomarkers=args.include_biomarkers,
        )
        ds.write_csv(out)
        _print({"out": out, "windows": len(ds.rows), "features": len(ds.schema)})
        return 0
    window = args.window or 30.0
    stride = args.stride or 1.0
    rows = pose_mod.extract_feature_rows(session.keypoints, person_id=args.participant)
    sequences = pose_mod.build_sequences(
        rows,
        session.labels,
        window_s=window,
        stride_s=stride,
        step_hz=args.step_hz,
        participant_id=session.meta.participant_id,
    )
    write_sequence_csv(sequences, out)
    _print(
        {
            "out": out,
            "sequences": len(sequences),
            "positives": int(sum(s.label for s in sequences)),
            "steps_per_sequence": sequences[0].steps.shape[0] if sequences else 0,
        }
    )
    return 0


def write_sequence_csv(sequences: List[pose_mod.FeatureSequence], path: str) -> None:
    """Long-format sequence file plus a sidecar schema listing."""
    names = pose_mod.POSE_FEATURE_NAMES
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seq_id,step,feature,value,label\n")
        for si, seq in enumerate(sequences):
            for step in range(seq.steps.shape[0]):
                row = seq.steps[step]
                for fi, name in enumerate(names):
                    fh.write(f"{si},{step},{name},{format(row[fi], '.9g')},{seq.label}\n")
    with open(path + ".schema", "w", encoding="utf-8") as fh:
        fh.write("\n".join(names) + "\n")


def read_sequence_csv(path: str):
    """Rebuild (X, y) arrays from the long-format sequence file."""
    import collections

    by_seq = collections.defaultdict(dict)
    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "seq_id,step,feature,value,label":
            raise ValidationError(f"{path}: unexpected sequence file header")
        for line in fh:
            seq_id, step, feature, value, label = line.rstrip("\n").split(",")
            by_seq[int(seq_id)].setdefault(int(step), {})[feature] = float(value)
            labels[int(seq_id)] = int(label)
    schema_path = path + ".schema"
    if os.path.exists(schema_path):
        with open(schema_path, "r", encoding="utf-8") as fh:
            names = [ln for ln in fh.read().splitlines() if ln]
    else:
        names = list(pose_mod.POSE_FEATURE_NAMES)
    seq_ids = sorted(by_seq)
    X = np.array(
        [
            [[by_seq[s][t][n] for n in names] for t in sorted(by_seq[s])]
            for s in seq_ids
        ]
    )
    y = np.array([labels[s] for s in seq_ids])
    return X, y, names


def _cmd_train(args) -> int:
    out = _resolve(args.out)
    if args.mode == "forest":
        kind = forest_mod.ForestKind(args.kind or "extra_trees")
        wds = wrist_mod.WindowDataset.read_csv(_resolve(args.in_path))
        mask = wds.training_mask(include_preagitation=args.include_preagitation)
        ds = forest_mod.Dataset(
            schema=wds.schema,
            rows=wds.rows[mask],
            labels=wds.binary_labels(args.include_preagitation)[mask],
        )
        train_ds, test_ds = forest_mod.split_train_test(ds, 0.7, args.seed)
        if len(np.unique(train_ds.labels)) > 1:
            train_ds = forest_mod.oversample_minority(train_ds, args.seed)
        hp = {"n_trees": args.trees}
        model = forest_mod.train(train_ds, kind, hp, seed=args.seed)
        model.save(out)
        report = forest_mod.evaluate(model, test_ds, threshold=args.threshold)
        _print({"model": out, "kind": kind.value, "eval": report.to_doc()})
        return 0
    kind = seqnet_mod.RecurrentKind(args.kind or "lstm")
    X, y, names = read_sequence_csv(_resolve(args.in_path))
    config = seqnet_mod.TrainConfig(
        epochs=args.epochs, hidden_dim=args.hidden, seed=args.seed
    )
    model, trace = seqnet_mod.train(X, y, kind, config, schema=names)
    model.save(out)
    if args.trace_out:
        trace.write_csv(_resolve(args.trace_out))
    probs = model.predict_proba(X)[:, 1]
    report = forest_mod.evaluate_scores(probs, y, threshold=args.threshold)
    _print(
        {
            "model": out,
            "kind": kind.value,
            "final_train_loss": trace.train_loss[-1],
            "final_val_loss": trace.val_loss[-1],
            "train_eval": report.to_doc(),
        }
    )
    return 0


def _cmd_prune(args) -> int:
    X, y, names = read_sequence_csv(_resolve(args.in_path))
    report = pose_mod.prune_by_class_correlation(
        X[y == 1], X[y == 0], threshold=args.threshold, names=names
    )
    out = _resolve(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_doc(), fh, indent=2)
        fh.write("\n")
    _print({"out": out, "kept": len(report.kept), "removed": len(report.removed)})
    return 0


def _replay_config(args) -> realtime_mod.EngineConfig:
    return realtime_mod.EngineConfig(
        threshold=args.threshold,
        k_on=args.k_on,
        k_off=args.k_off,
        fusion=realtime_mod.FusionMode(args.fusion),
    )


def _cmd_replay(args) -> int:
    session = ingest_mod.load_session(_resolve(args.session_dir))
    wrist_model = (
        forest_mod.load_model(_resolve(args.wrist_model)) if args.wrist_model else None
    )
    video_model = (
        seqnet_mod.RecurrentClassifier.load(_resolve(args.video_model))
        if args.video_model
        else None
    )
    if wrist_model is None and video_model is None:
        raise ValidationError("replay needs at least one of --wrist-model/--video-model")
    events = realtime_mod.run_replay(
        session, wrist_model, video_model, _replay_config(args)
    )
    if args.out:
        with open(_resolve(args.out), "w", encoding="utf-8") as fh:
            for e in events:
                fh.write(json.dumps(e.to_doc(), sort_keys=True) + "\n")
    truth = [iv for iv in session.labels if iv.klass == LabelClass.AGITATION]
    fused = [e for e in events if e.modality == realtime_mod.Modality.FUSED]
    metrics = realtime_mod.detection_latency(
        fused, session.labels, span=(session.meta.t0, session.end())
    )
    _print(
        {
            "events": len(events),
            "fused_events": len(fused),
            "truth_intervals": len(truth),
            "latency": metrics.to_doc(),
            "out": args.out,
        }
    )
    return 0


def _cmd_serve(args) -> int:
    import threading

    import uvicorn

    from .service import AgitrackService, EventStore, ModelKind, create_app
    from .service import RetrainOutcome

    session_dir = _resolve(args.session_dir)
    session = ingest_mod.load_session(session_dir)
    wrist_model = (
        forest_mod.load_model(_resolve(args.wrist_model)) if args.wrist_model else None
    )
    video_model = (
        seqnet_mod.RecurrentClassifier.load(_resolve(args.video_model))
        if args.video_model
        else None
    )
    log_path = _resolve(args.log) if args.log else os.path.join(session_dir, "events.log")
    store = EventStore(log_path)

    def retrainer(kind: ModelKind, labels) -> RetrainOutcome:
        if kind == ModelKind.FOREST:
            ds = wrist_mod.build_window_dataset(
                session.series, labels, session.meta.t0, session.end()
            )
            mask = ds.training_mask()
            data = forest_mod.Dataset(ds.schema, ds.rows[mask], ds.binary_labels()[mask])
            if len(np.unique(data.labels)) < 2:
                return RetrainOutcome(auc=None, message="single-class snapshot; kept prior")
            tr, te = forest_mod.split_train_test(data, 0.7, args.seed)
            model = forest_mod.train(
                forest_mod.oversample_minority(tr, args.seed),
                forest_mod.ForestKind.EXTRA_TREES,
                seed=args.seed,
            )
            path = os.path.join(session_dir, "wrist-model-retrained.json")
            model.save(path)
            return RetrainOutcome(auc=forest_mod.evaluate(model, te).auc, model_path=path)
        rows = pose_mod.extract_feature_rows(session.keypoints)
        sequences = pose_mod.build_sequences(rows, labels, step_hz=5.0)
        ys = np.array([s.label for s in sequences])
        if len(sequences) == 0 or len(np.unique(ys)) < 2:
            return RetrainOutcome(auc=None, message="single-class snapshot; kept prior")
        X = np.stack([s.steps for s in sequences])
        config = seqnet_mod.TrainConfig(epochs=3, hidden_dim=16, seed=args.seed)
        model, _ = seqnet_mod.train(X, ys, "lstm", config)
        path = os.path.join(session_dir, "video-model-retrained.json")
        model.save(path)
        probs = model.predict_proba(X)[:, 1]
        return RetrainOutcome(
            auc=forest_mod.auc_score(probs, ys), model_path=path
        )

    service = AgitrackService(
        store,
        session_meta={
            "session_id": session.meta.session_id,
            "participant_id": session.meta.participant_id,
            "t0_ms": session.meta.t0,
            "duration_s": session.meta.duration_s,
        },
        base_labels=session.labels,
        retrainer=retrainer,
    )
    if wrist_model is not None:
        service.register_model(ModelKind.FOREST, auc=None, path=_resolve(args.wrist_model))
    if video_model is not None:
        service.register_model(ModelKind.RECURRENT, auc=None, path=_resolve(args.video_model))

    def replay_worker():
        config = _replay_config(args)

        def on_event(event):
            service.on_event(event)

        events = realtime_mod.run_replay(
            session,
            wrist_model,
            video_model,
            config,
            alert_sink=on_event,
            score_sink=service.on_score,
        )
        for event in events:
            service.on_event(event)

    threading.Thread(target=replay_worker, daemon=True).start()
    app = create_app(service)
    if args.ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=_resolve(args.ui_dir), html=True), name="ui")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    in_path = _resolve(args.in_path)
    with open(in_path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    header = lines[0].split(",")
    columns = {name: [] for name in header}
    for line in lines[1:]:
        for name, cell in zip(header, line.split(",")):
            columns[name].append(float(cell))
    x = columns[header[0]]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name in header[1:]:
        ax.plot(x, columns[name], label=name)
    ax.set_xlabel(header[0])
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out = _resolve(args.out)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    _print({"out": out, "series": header[1:], "points": len(x)})
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "features": _cmd_features,
    "train": _cmd_train,
    "prune": _cmd_prune,
    "replay": _cmd_replay,
    "serve": _cmd_serve,
    "report": _cmd_report,
}


def _apply_config_overlay(parser: _Parser, argv: List[str]) -> List[str]:
    """Pull --config out of argv and seed its values as parser defaults.

    argparse only applies a subcommand default when the dest is not already
    on the namespace, so overlay values lose to explicit flags but beat
    built-in defaults.
    """
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise CliError("--config requires a file path")
    path = _resolve(argv[idx + 1])
    argv = argv[:idx] + argv[idx + 2 :]
    try:
        with open(path, "r", encoding="utf-8") as fh:
            overlay = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"--config {path}: {exc}")
    if not isinstance(overlay, dict):
        raise CliError(f"--config {path}: expected a JSON object of flag defaults")
    valid = known_dests(parser)
    unknown = sorted(set(overlay) - valid)
    if unknown:
        raise CliError(f"--config {path}: unknown keys: {', '.join(unknown)}")
    # subparsers parse into a fresh namespace (bpo-9351), so defaults must
    # be seeded on each subparser, not the root
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                applicable = {
                    k: v for k, v in overlay.items() if k in known_dests(sub)
                }
                if applicable:
                    sub.set_defaults(**applicable)
    return argv


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        argv = _apply_config_overlay(parser, argv)
        args = parser.parse_args(argv)
    except CliError as exc:
        _emit_error(str(exc), "validation")
        return exc.exit_code
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, ValueError, KeyError) as exc:
        _emit_error(str(exc), "validation")
        return 1
    except OSError as exc:
        _emit_error(str(exc), "runtime")
        return 2
    except Exception as exc:  # anything else is a runtime failure, not a crash
        _emit_error(f"{type(exc).__name__}: {exc}", "runtime")
        return 2


if __name__ == "__main__":
    sys.exit(main())
