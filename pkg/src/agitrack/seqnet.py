"""Single-cell LSTM / GRU binary sequence classifiers, written from scratch.

Forward and backward passes are batched numpy; the input-to-gate products
are hoisted into one GEMM across all timesteps, so the per-step loop only
carries the recurrent term. Gradients are exact (verified against central
finite differences by grad_check) and training is bit-deterministic for a
fixed seed in serial mode.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .core import ValidationError

MODEL_FORMAT_VERSION = 1
_P_FLOOR = 1e-12


class RecurrentKind(str, Enum):
    LSTM = "lstm"
    GRU = "gru"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float = 5.0
    val_fraction: float = 0.3
    hidden_dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")


@dataclass
class TrainTrace:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                fh.write(f"{i},{format(tr, '.9g')},{format(va, '.9g')}\n")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


class _Params(dict):
    """Named parameter arrays; ordering is fixed for flatten/unflatten."""

    ORDER = ("W", "U", "b", "w_out", "b_out")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self[k].ravel() for k in self.ORDER])

    def assign_flat(self, flat: np.ndarray) -> None:
        off = 0
        for k in self.ORDER:
            size = self[k].size
            self[k] = flat[off : off + size].reshape(self[k].shape)
            off += size


def _init_params(
    kind: RecurrentKind, d: int, h: int, rng: np.random.Generator
) -> _Params:
    gates = 4 if kind == RecurrentKind.LSTM else 3
    bound = math.sqrt(6.0 / (d + h))
    params = _Params()
    params["W"] = rng.uniform(-bound, bound, size=(d, gates * h))
    params["U"] = rng.uniform(-bound, bound, size=(h, gates * h))
    params["b"] = np.zeros(gates * h)
    if kind == RecurrentKind.LSTM:
        params["b"][h : 2 * h] = 1.0  # forget-gate bias: stability on long windows
    out_bound = math.sqrt(6.0 / (h + 1))
    params["w_out"] = rng.uniform(-out_bound, out_bound, size=h)
    params["b_out"] = np.zeros(1)
    return params


def _forward_lstm(params: _Params, X: np.ndarray, want_cache: bool):
    B, L, d = X.shape
    h_dim = params["w_out"].shape[0]
    W, U, b = params["W"], params["U"], params["b"]
    xw = X.reshape(B * L, d) @ W if L else np.zeros((0, 4 * h_dim))
    xw = xw.reshape(B, L, 4 * h_dim) + b
    h = np.zeros((B, h_dim))
    c = np.zeros((B, h_dim))
    cache = {"gates": [], "c_prev": [], "tanh_c": [], "h_prev": []} if want_cache else None
    for t in range(L):
        a = xw[:, t, :] + h @ U
        i = _sigmoid(a[:, :h_dim])
        f = _sigmoid(a[:, h_dim : 2 * h_dim])
        g = np.tanh(a[:, 2 * h_dim : 3 * h_dim])
        o = _sigmoid(a[:, 3 * h_dim :])
        if want_cache:
            cache["h_prev"].append(h)
            cache["c_prev"].append(c)
        c = f * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        if want_cache:
            cache["gates"].append((i, f, g, o))
            cache["tanh_c"].append(tanh_c)
    logits = h @ params["w_out"] + params["b_out"][0]
    return logits, h, cache


def _backward_lstm(
    params: _Params, X: np.ndarray, cache, h_last: np.ndarray, dlogits: np.ndarray
) -> _Params:
    B, L, d = X.shape
    h_dim = params["w_out"].shape[0]
    U = params["U"]
    grads = _Params(
        W=np.zeros_like(params["W"]),
        U=np.zeros_like(U),
        b=np.zeros_like(params["b"]),
        w_out=h_last.T @ dlogits,
        b_out=np.array([float(np.sum(dlogits))]),
    )
    dh = dlogits[:, None] * params["w_out"][None, :]
    dc = np.zeros((B, h_dim))
    da_all = np.zeros((B, L, 4 * h_dim))
    for t in range(L - 1, -1, -1):
        i, f, g, o = cache["gates"][t]
        tanh_c = cache["tanh_c"][t]
        c_prev = cache["c_prev"][t]
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c**2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        da = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g**2),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        da_all[:, t, :] = da
        dh = da @ U.T
        dc = dc * f
    da_flat = da_all.reshape(B * L, 4 * h_dim)
    if L:
        grads["W"] = X.reshape(B * L, d).T @ da_flat
        h_prev_flat = np.stack(cache["h_prev"], axis=1).reshape(B * L, h_dim)
        grads["U"] = h_prev_flat.T @ da_flat
        grads["b"] = da_flat.sum(axis=0)
    return grads


def _forward_gru(params: _Params, X: np.ndarray, want_cache: bool):
    B, L, d = X.shape
    h_dim = params["w_out"].shape[0]
    W, U, b = params["W"], params["U"], params["b"]
    xw = X.reshape(B * L, d) @ W if L else np.zeros((0, 3 * h_dim))
    xw = xw.reshape(B, L, 3 * h_dim) + b
    h = np.zeros((B, h_dim))
    cache = {"z": [], "r": [], "n": [], "hun": [], "h_prev": []} if want_cache else None
    for t in range(L):
        zr_pre = xw[:, t, : 2 * h_dim] + h @ U[:, : 2 * h_dim]
        z = _sigmoid(zr_pre[:, :h_dim])
        r = _sigmoid(zr_pre[:, h_dim:])
        hun = h @ U[:, 2 * h_dim :]
        n = np.tanh(xw[:, t, 2 * h_dim :] + r * hun)
        if want_cache:
            cache["h_prev"].append(h)
            cache["z"].append(z)
            cache["r"].append(r)
            cache["n"].append(n)
            cache["hun"].append(hun)
        h = (1.0 - z) * n + z * h
    logits = h @ params["w_out"] + params["b_out"][0]
    return logits, h, cache


def _backward_gru(
    params: _Params, X: np.ndarray, cache, h_last: np.ndarray, dlogits: np.ndarray
) -> _Params:
    B, L, d = X.shape
    h_dim = params["w_out"].shape[0]
    U = params["U"]
    grads = _Params(
        W=np.zeros_like(params["W"]),
        U=np.zeros_like(U),
        b=np.zeros_like(params["b"]),
        w_out=h_last.T @ dlogits,
        b_out=np.array([float(np.sum(dlogits))]),
    )
    dh = dlogits[:, None] * params["w_out"][None, :]
    da_all = np.zeros((B, L, 3 * h_dim))
    dU_n = np.zeros((h_dim, h_dim))
    for t in range(L - 1, -1, -1):
        z = cache["z"][t]
        r = cache["r"][t]
        n = cache["n"][t]
        hun = cache["hun"][t]
        h_prev = cache["h_prev"][t]
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        dn_pre = dn * (1.0 - n**2)
        dr = dn_pre * hun
        dh_prev = dh_prev + (dn_pre * r) @ U[:, 2 * h_dim :].T
        dU_n += h_prev.T @ (dn_pre * r)
        da_z = dz * z * (1.0 - z)
        da_r = dr * r * (1.0 - r)
        da_all[:, t, :h_dim] = da_z
        da_all[:, t, h_dim : 2 * h_dim] = da_r
        da_all[:, t, 2 * h_dim :] = dn_pre
        dh_prev = dh_prev + da_z @ U[:, :h_dim].T + da_r @ U[:, h_dim : 2 * h_dim].T
        dh = dh_prev
    da_flat = da_all.reshape(B * L, 3 * h_dim)
    if L:
        grads["W"] = X.reshape(B * L, d).T @ da_flat
        h_prev_flat = np.stack(cache["h_prev"], axis=1).reshape(B * L, h_dim)
        grads["U"][:, : 2 * h_dim] = h_prev_flat.T @ da_flat[:, : 2 * h_dim]
        grads["U"][:, 2 * h_dim :] = dU_n
        grads["b"] = da_flat.sum(axis=0)
    return grads


_FORWARD = {RecurrentKind.LSTM: _forward_lstm, RecurrentKind.GRU: _forward_gru}
_BACKWARD = {RecurrentKind.LSTM: _backward_lstm, RecurrentKind.GRU: _backward_gru}


def _bce_loss_and_dlogits(
    logits: np.ndarray, y: np.ndarray
) -> Tuple[float, np.ndarray]:
    p = np.clip(_sigmoid(logits), _P_FLOOR, 1.0 - _P_FLOOR)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    return loss, (p - y) / len(y)


class RecurrentClassifier(BaseEstimator, ClassifierMixin):
    """fit/predict wrapper around the hand-written recurrent cells.

    X is (n, L, d); features are z-scored with statistics taken from the
    training portion (constant features get std 1). Readout is a sigmoid on
    the final hidden state.
    """

    def __init__(
        self,
        kind: str = "lstm",
        hidden_dim: int = 64,
        epochs: int = 100,
        batch_size: int = 256,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        clip_norm: float = 5.0,
        val_fraction: float = 0.3,
        seed: int = 0,
    ) -> None:
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.seed = seed

    # -- helpers -----------------------------------------------------------

    def _validate_X(self, X, fitted: bool) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValidationError("X must be (n, seq_len, n_features)")
        if np.any(~np.isfinite(X)):
            raise ValidationError("X must be finite")
        if fitted and X.shape[2] != self.input_dim_:
            raise ValidationError(
                f"feature dim {X.shape[2]} != model input dim {self.input_dim_}"
            )
        return X

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.feat_mean_) / self.feat_std_

    def _forward_logits(self, X: np.ndarray, want_cache: bool = False):
        return _FORWARD[RecurrentKind(self.kind)](self.params_, X, want_cache)

    # -- sklearn surface ----------------------------------------------------

    def fit(self, X, y, schema: Optional[Sequence[str]] = None):
        X = self._validate_X(X, fitted=False)
        y = np.asarray(y, dtype=np.float64)
        n, L, d = X.shape
        if y.shape != (n,) or not np.all(np.isin(y, (0.0, 1.0))):
            raise ValidationError("y must be binary 0/1, one per sequence")
        if len(np.unique(y)) < 2:
            raise ValidationError("training requires both classes present")
        kind = RecurrentKind(self.kind)
        rng = np.random.default_rng(self.seed)

        n_val = int(round(n * self.val_fraction))
        perm = rng.permutation(n)
        val_idx = perm[:n_val]
        train_idx = perm[n_val:]
        if len(train_idx) == 0:
            raise ValidationError("val_fraction leaves no training data")

        self.input_dim_ = d
        self.seq_len_ = L
        self.schema_ = tuple(schema) if schema else tuple(f"f{i}" for i in range(d))
        flat = X[train_idx].reshape(-1, d)
        self.feat_mean_ = flat.mean(axis=0) if len(flat) else np.zeros(d)
        std = flat.std(axis=0) if len(flat) else np.ones(d)
        self.feat_std_ = np.where(std > 1e-12, std, 1.0)

        self.params_ = _init_params(kind, d, self.hidden_dim, rng)
        adam_m = {k: np.zeros_like(v) for k, v in self.params_.items()}
        adam_v = {k: np.zeros_like(v) for k, v in self.params_.items()}
        step = 0

        Xn_train = self._normalize(X[train_idx])
        y_train = y[train_idx]
        Xn_val = self._normalize(X[val_idx]) if n_val else None
        y_val = y[val_idx] if n_val else None

        trace = TrainTrace()
        backward = _BACKWARD[kind]
        for _ in range(self.epochs):
            order = rng.permutation(len(train_idx))
            epoch_loss = 0.0
            for start in range(0, len(order), self.batch_size):
                batch = order[start : start + self.batch_size]
                xb = Xn_train[batch]
                yb = y_train[batch]
                logits, h_last, cache = self._forward_logits(xb, want_cache=True)
                loss, dlogits = _bce_loss_and_dlogits(logits, yb)
                grads = backward(self.params_, xb, cache, h_last, dlogits)
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > self.clip_norm:
                    scale = self.clip_norm / norm
                    for k in grads:
                        grads[k] = grads[k] * scale
                step += 1
                b1t = 1.0 - self.beta1**step
                b2t = 1.0 - self.beta2**step
                for k in self.params_:
                    adam_m[k] = self.beta1 * adam_m[k] + (1.0 - self.beta1) * grads[k]
                    adam_v[k] = self.beta2 * adam_v[k] + (1.0 - self.beta2) * grads[k] ** 2
                    self.params_[k] = self.params_[k] - self.learning_rate * (
                        adam_m[k] / b1t
                    ) / (np.sqrt(adam_v[k] / b2t) + self.epsilon)
                epoch_loss += loss * len(batch)
            trace.train_loss.append(epoch_loss / len(train_idx))
            if n_val:
                trace.val_loss.append(self._loss_on(Xn_val, y_val))
            else:
                trace.val_loss.append(trace.train_loss[-1])
        self.trace_ = trace
        return self

    def _loss_on(self, Xn: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
        total = 0.0
        for start in range(0, len(Xn), chunk):
            logits, _, _ = self._forward_logits(Xn[start : start + chunk])
            loss, _ = _bce_loss_and_dlogits(logits, y[start : start + chunk])
            total += loss * len(Xn[start : start + chunk])
        return total / len(Xn)

    def predict_proba(self, X) -> np.ndarray:
        X = self._validate_X(X, fitted=True)
        out = np.empty(len(X))
        for start in range(0, len(X), 512):
            xb = self._normalize(X[start : start + 512])
            logits, _, _ = self._forward_logits(xb)
            out[start : start + 512] = np.clip(
                _sigmoid(logits), _P_FLOOR, 1.0 - _P_FLOOR
            )
        return np.column_stack([1.0 - out, out])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def score_sequence(self, seq) -> float:
        """Probability of the positive class for one (L, d) sequence."""
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2:
            raise ValidationError("sequence must be (seq_len, n_features)")
        return float(self.predict_proba(seq[None])[0, 1])

    # -- persistence ---------------------------------------------------------

    def to_doc(self) -> dict:
        def arr(a: np.ndarray) -> list:
            return [float(format(v, ".9g")) for v in np.asarray(a).ravel()]

        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "hidden_dim": self.hidden_dim,
            "input_dim": self.input_dim_,
            "seq_len": self.seq_len_,
            "schema": list(self.schema_),
            "hyperparams": self.get_params(),
            "feat_mean": arr(self.feat_mean_),
            "feat_std": arr(self.feat_std_),
            "weights": {k: arr(v) for k, v in self.params_.items()},
            "shapes": {k: list(v.shape) for k, v in self.params_.items()},
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")

    @classmethod
    def from_doc(cls, doc: dict) -> "RecurrentClassifier":
        model = cls(**doc["hyperparams"])
        model.input_dim_ = int(doc["input_dim"])
        model.seq_len_ = int(doc["seq_len"])
        model.schema_ = tuple(doc["schema"])
        model.feat_mean_ = np.asarray(doc["feat_mean"], dtype=np.float64)
        model.feat_std_ = np.asarray(doc["feat_std"], dtype=np.float64)
        params = _Params()
        for k, shape in doc["shapes"].items():
            params[k] = np.asarray(doc["weights"][k], dtype=np.float64).reshape(shape)
        model.params_ = params
        return model

    @classmethod
    def load(cls, path: str) -> "RecurrentClassifier":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


def train(
    X,
    y=None,
    kind: RecurrentKind | str = RecurrentKind.LSTM,
    config: Optional[TrainConfig] = None,
    schema: Optional[Sequence[str]] = None,
) -> Tuple[RecurrentClassifier, TrainTrace]:
    """Train a classifier from (X, y) arrays or a list of labeled sequence
    objects carrying .steps and .label (y inferred in that case)."""
    if y is None:
        sequences = list(X)
        if not sequences:
            raise ValidationError("training requires at least one sequence")
        lengths = {s.steps.shape[0] for s in sequences}
        if len(lengths) != 1:
            raise ValidationError(f"sequences must share one length, got {sorted(lengths)}")
        X = np.stack([s.steps for s in sequences]).astype(np.float64)
        y = np.asarray([s.label for s in sequences])
    cfg = config or TrainConfig()
    model = RecurrentClassifier(
        kind=RecurrentKind(kind).value,
        hidden_dim=cfg.hidden_dim,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        epsilon=cfg.epsilon,
        clip_norm=cfg.clip_norm,
        val_fraction=cfg.val_fraction,
        seed=cfg.seed,
    )
    model.fit(X, y, schema=schema)
    return model, model.trace_


def grad_check(
    kind: RecurrentKind | str,
    input_dim: int = 3,
    hidden_dim: int = 4,
    seq_len: int = 5,
    batch: int = 3,
    seed: int = 0,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic BPTT gradients and central
    finite differences, over every parameter of a randomly initialized cell."""
    kind = RecurrentKind(kind)
    rng = np.random.default_rng(seed)
    params = _init_params(kind, input_dim, hidden_dim, rng)
    X = rng.normal(size=(batch, seq_len, input_dim))
    y = rng.integers(0, 2, size=batch).astype(np.float64)
    forward = _FORWARD[kind]
    backward = _BACKWARD[kind]

    logits, h_last, cache = forward(params, X, True)
    _, dlogits = _bce_loss_and_dlogits(logits, y)
    grads = backward(params, X, cache, h_last, dlogits)

    def loss_at(flat: np.ndarray) -> float:
        trial = _Params({k: v.copy() for k, v in params.items()})
        trial.assign_flat(flat.copy())
        lg, _, _ = forward(trial, X, False)
        loss, _ = _bce_loss_and_dlogits(lg, y)
        return loss

    flat = params.flatten()
    analytic = grads.flatten()
    worst = 0.0
    for i in range(len(flat)):
        bump = np.zeros_like(flat)
        bump[i] = eps
        numeric = (loss_at(flat + bump) - loss_at(flat - bump)) / (2.0 * eps)
        denom = max(1e-8, abs(numeric) + abs(analytic[i]))
        worst = max(worst, abs(numeric - analytic[i]) / denom)
    return worst


@dataclass
class LatencyReport:
    per_sequence_ms: float
    total_s: float
    n_sequences: int
    seq_len: int
    input_dim: int
    hidden_dim: int
    kind: str

    def to_doc(self) -> dict:
        return asdict(self)


def measure_latency(
    model: RecurrentClassifier, X: np.ndarray, warmup: int = 3
) -> LatencyReport:
    """Wall-clock one-sequence-at-a-time forward timing, warmup excluded."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValidationError("latency measurement needs a non-empty batch")
    for i in range(min(warmup, len(X))):
        model.score_sequence(X[i])
    start = time.perf_counter()
    for seq in X:
        model.score_sequence(seq)
    total = time.perf_counter() - start
    return LatencyReport(
        per_sequence_ms=total / len(X) * 1000.0,
        total_s=total,
        n_sequences=len(X),
        seq_len=X.shape[1],
        input_dim=X.shape[2],
        hidden_dim=model.hidden_dim,
        kind=model.kind,
    )
