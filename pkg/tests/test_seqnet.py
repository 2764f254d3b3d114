import numpy as np
import pytest

from agitrack.core import ValidationError
from agitrack.seqnet import (
    RecurrentClassifier,
    RecurrentKind,
    TrainConfig,
    _FORWARD,
    _init_params,
    grad_check,
    measure_latency,
    train,
)


def toy_task(n=2000, L=20, d=3, seed=0):
    """Label = 1 iff the running mean of feature 0 is positive."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, L, d))
    bias = rng.choice([-0.6, 0.6], size=n)
    X[:, :, 0] += bias[:, None]
    y = (X[:, :, 0].mean(axis=1) > 0).astype(int)
    return X, y


class TestGradCheck:
    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_small_dims_under_tolerance(self, kind):
        assert grad_check(kind, 3, 4, 5, seed=0) < 1e-4

    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_many_seeds(self, kind):
        worst = max(grad_check(kind, 2, 3, 4, seed=s) for s in range(5))
        assert worst < 1e-4

    def test_zero_inputs_zero_input_weight_grads(self):
        kind = RecurrentKind.LSTM
        rng = np.random.default_rng(0)
        params = _init_params(kind, 3, 4, rng)
        X = np.zeros((2, 5, 3))
        y = np.array([1.0, 0.0])
        from agitrack.seqnet import _BACKWARD, _bce_loss_and_dlogits

        logits, h_last, cache = _FORWARD[kind](params, X, True)
        _, dlogits = _bce_loss_and_dlogits(logits, y)
        grads = _BACKWARD[kind](params, X, cache, h_last, dlogits)
        assert np.allclose(grads["W"], 0.0)


class TestForward:
    def test_zero_output_layer_gives_half(self):
        model = RecurrentClassifier(kind="lstm", hidden_dim=4, epochs=1, seed=0)
        X, y = toy_task(20, L=5, d=2, seed=1)
        model.fit(X, y)
        model.params_["w_out"][:] = 0.0
        model.params_["b_out"][:] = 0.0
        assert model.score_sequence(X[0]) == pytest.approx(0.5)

    def test_empty_sequence_uses_initial_state(self):
        model = RecurrentClassifier(kind="gru", hidden_dim=4, epochs=1, seed=0)
        X, y = toy_task(20, L=5, d=2, seed=2)
        model.fit(X, y)
        b = float(model.params_["b_out"][0])
        empty = np.zeros((1, 0, 2))
        p = model.predict_proba(empty)[0, 1]
        assert p == pytest.approx(1.0 / (1.0 + np.exp(-b)), rel=1e-9)

    def test_feature_permutation_with_weights_is_invariant(self):
        # permuting input features together with the corresponding rows of W
        # and the normalization stats must leave the output unchanged
        model = RecurrentClassifier(kind="lstm", hidden_dim=6, epochs=1, seed=3)
        X, y = toy_task(30, L=8, d=4, seed=3)
        model.fit(X, y)
        perm = np.array([2, 0, 3, 1])
        p_before = model.score_sequence(X[0])
        model.params_["W"] = model.params_["W"][perm]
        model.feat_mean_ = model.feat_mean_[perm]
        model.feat_std_ = model.feat_std_[perm]
        p_after = model.score_sequence(X[0][:, perm])
        assert p_after == pytest.approx(p_before, rel=1e-12)

    def test_output_strictly_inside_unit_interval(self):
        model = RecurrentClassifier(kind="lstm", hidden_dim=4, epochs=2, seed=1)
        X, y = toy_task(50, L=6, d=2, seed=4)
        model.fit(X, y)
        probs = model.predict_proba(X)[:, 1]
        assert np.all(probs > 0.0) and np.all(probs < 1.0)

    def test_dim_mismatch_rejected(self):
        model = RecurrentClassifier(kind="gru", hidden_dim=4, epochs=1, seed=0)
        X, y = toy_task(20, L=5, d=3, seed=5)
        model.fit(X, y)
        with pytest.raises(ValidationError):
            model.predict_proba(np.zeros((2, 5, 4)))


class TestTraining:
    @pytest.mark.parametrize("kind", ["lstm", "gru"])
    def test_toy_task_heldout_accuracy(self, kind):
        X, y = toy_task(2000, seed=6)
        config = TrainConfig(epochs=30, hidden_dim=16, batch_size=128, seed=0)
        model, trace = train(X[:1400], y[:1400], kind, config)
        acc = np.mean(model.predict(X[1400:]) == y[1400:])
        assert acc > 0.97
        assert len(trace.train_loss) == 30
        assert all(np.isfinite(trace.train_loss))
        assert all(np.isfinite(trace.val_loss))

    def test_loss_decreases_in_expectation(self):
        X, y = toy_task(600, seed=7)
        medians = []
        for seed in range(3):
            config = TrainConfig(epochs=10, hidden_dim=8, batch_size=64, seed=seed)
            _, trace = train(X, y, "lstm", config)
            medians.append((trace.train_loss[0], trace.train_loss[9]))
        first = np.median([m[0] for m in medians])
        last = np.median([m[1] for m in medians])
        assert last < first

    def test_bit_identical_rerun(self):
        X, y = toy_task(200, L=10, d=2, seed=8)
        config = TrainConfig(epochs=3, hidden_dim=8, batch_size=32, seed=5)
        m1, _ = train(X, y, "gru", config)
        m2, _ = train(X, y, "gru", config)
        for key in m1.params_:
            assert np.array_equal(m1.params_[key], m2.params_[key])

    def test_normalization_roundtrip(self):
        X, y = toy_task(300, seed=9)
        config = TrainConfig(epochs=1, hidden_dim=4, seed=2, val_fraction=0.0)
        model, _ = train(X, y, "lstm", config)
        flat = ((X - model.feat_mean_) / model.feat_std_).reshape(-1, X.shape[2])
        assert np.all(np.abs(flat.mean(axis=0)) < 1e-6)
        nonconstant = model.feat_std_ > 1e-12
        assert np.all(np.abs(flat.std(axis=0)[nonconstant] - 1.0) < 1e-6)

    def test_single_class_rejected(self):
        X, _ = toy_task(30, seed=10)
        with pytest.raises(ValidationError):
            train(X, np.ones(30), "lstm", TrainConfig(epochs=1))

    def test_nonuniform_lengths_rejected_by_shape(self):
        model = RecurrentClassifier(epochs=1)
        ragged = [np.zeros((5, 3)), np.zeros((6, 3))]
        with pytest.raises((ValidationError, ValueError)):
            model.fit(np.array(ragged, dtype=object), np.array([0, 1]))

    def test_serialization_roundtrip(self, tmp_path):
        X, y = toy_task(200, seed=11)
        config = TrainConfig(epochs=2, hidden_dim=8, seed=3)
        model, trace = train(X, y, "lstm", config)
        path = tmp_path / "model.json"
        model.save(str(path))
        back = RecurrentClassifier.load(str(path))
        p1 = model.predict_proba(X[:20])[:, 1]
        p2 = back.predict_proba(X[:20])[:, 1]
        assert np.allclose(p1, p2, atol=1e-7)  # weights stored at 9 significant digits
        trace_path = tmp_path / "trace.csv"
        trace.write_csv(str(trace_path))
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 3


class TestLatency:
    def test_stable_and_scales_linearly(self):
        X, y = toy_task(120, L=30, d=4, seed=12)
        config = TrainConfig(epochs=1, hidden_dim=8, seed=0)
        model, _ = train(X, y, "lstm", config)
        batch = X[:40]
        r1 = measure_latency(model, batch)
        r2 = measure_latency(model, batch)
        assert r1.per_sequence_ms > 0
        spread = abs(r1.per_sequence_ms - r2.per_sequence_ms) / max(
            r1.per_sequence_ms, r2.per_sequence_ms
        )
        assert spread < 0.5  # generous: CI machines jitter
        double = np.concatenate([batch, batch], axis=1)  # 2x seq_len
        r4 = measure_latency(model, double)
        assert r4.per_sequence_ms < 4.0 * r1.per_sequence_ms


def test_train_accepts_sequence_objects():
    from agitrack.pose import FeatureSequence

    rng = np.random.default_rng(20)
    seqs = []
    for i in range(40):
        label = i % 2
        steps = rng.normal(loc=label * 1.5, size=(12, 3))
        seqs.append(FeatureSequence(window_start=i * 1000, steps=steps, label=label))
    model, trace = train(seqs, kind="gru", config=TrainConfig(epochs=2, hidden_dim=4, seed=1))
    assert model.input_dim_ == 3
    assert len(trace.train_loss) == 2
    with pytest.raises(ValidationError):
        train([], kind="gru")
