"""Three-layer MLP failure detectors: inference, AdamW training, persistence.

Layout is ``d -> h1 -> h2 -> 1`` with exact (erf-based) GELU on both hidden
layers and a logistic output. Weights are stored as ``(fan_in, fan_out)``
matrices so a batch ``X @ W + b`` runs row-wise.
"""
from __future__ import annotations

import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf, expit

from .errors import ModelFormatError, ProbeMismatchError, ShapeError, TrainingError, ValidationError
from .spectral import DEFAULT_PROBES, FeatureVector, Level, feature_dim

log = logging.getLogger(__name__)

MODEL_MAGIC = b"NRMNMLP\x00"
MODEL_VERSION = 1
_LEVEL_CODES = {Level.INTRA: 0, Level.INTER: 1, Level.INST: 2}
_CODE_LEVELS = {v: k for k, v in _LEVEL_CODES.items()}

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_P_MIN = np.finfo(np.float64).tiny
_P_MAX = 1.0 - np.finfo(np.float64).epsneg


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class MlpModel:
    level: Level
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0
    probe_digest: str = DEFAULT_PROBES.digest

    def __post_init__(self):
        self.level = Level(self.level)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ShapeError("an MLP detector has exactly three layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} input does not match layer {i - 1} output")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValidationError(f"layer {i} has non-finite parameters")
        if self.weights[-1].shape[1] != 1:
            raise ShapeError("output layer must have width 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in file order: W1, b1, W2, b2, W3, b3."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.level,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout,
            self.probe_digest,
        )

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Batch inference; ``X`` has shape (n, d). Dropout is never applied here."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.dims[0]:
            raise ShapeError(f"model expects {self.dims[0]} features, got {X.shape[1]}")
        h = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = gelu(h @ w + b)
        z = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return np.clip(expit(z), _P_MIN, _P_MAX)


def forward(model: MlpModel, features) -> float:
    """Failure probability for one feature vector."""
    if isinstance(features, FeatureVector):
        if features.level is not model.level:
            raise ShapeError(f"{features.level} features fed to a {model.level} model")
        features = features.as_array()
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.dims[0],):
        raise ShapeError(f"model expects {model.dims[0]} features, got shape {x.shape}")
    return float(model.predict_proba(x[None, :])[0])


def init_model(
    level: Level | str,
    hidden: tuple[int, int] = (16, 16),
    seed: int = 0,
    dropout: float = 0.0,
    probe_digest: str = DEFAULT_PROBES.digest,
    input_dim: int | None = None,
) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    dims = (input_dim or feature_dim(level), *hidden, 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(Level(level), weights, biases, dropout, probe_digest)


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------


def _logistic_loss(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    # softplus(z) - y*z, stable for large |z|
    return np.logaddexp(0.0, z) - y * z


def loss_and_grads(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> tuple[float, list[np.ndarray]]:
    """Weighted mean BCE and its gradient w.r.t. ``model.parameters()``.

    Inverted dropout on both hidden layers is applied when ``dropout > 0``
    (``rng`` is then required).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    (W1, W2, W3), (b1, b2, b3) = model.weights, model.biases

    a1 = X @ W1 + b1
    h1 = gelu(a1)
    if dropout > 0:
        m1 = (rng.random(h1.shape) >= dropout) / (1.0 - dropout)
        h1 = h1 * m1
    a2 = h1 @ W2 + b2
    h2 = gelu(a2)
    if dropout > 0:
        m2 = (rng.random(h2.shape) >= dropout) / (1.0 - dropout)
        h2 = h2 * m2
    z = (h2 @ W3 + b3)[:, 0]

    loss = float(np.dot(w, _logistic_loss(z, y)) / n)

    dz = (w * (expit(z) - y) / n)[:, None]
    gW3 = h2.T @ dz
    gb3 = dz.sum(axis=0)
    dh2 = dz @ W3.T
    if dropout > 0:
        dh2 = dh2 * m2
    da2 = dh2 * gelu_grad(a2)
    gW2 = h1.T @ da2
    gb2 = da2.sum(axis=0)
    dh1 = da2 @ W2.T
    if dropout > 0:
        dh1 = dh1 * m1
    da1 = dh1 * gelu_grad(a1)
    gW1 = X.T @ da1
    gb1 = da1.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2, gW3, gb3]


def grad_check(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    epsilon: float = 1e-5,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Max relative error between backprop and central finite differences.

    The relative error of a component is ``|a - n| / max(|a|, |n|, 1e-6)``;
    the floor keeps near-zero gradients from dominating through rounding noise.
    """
    _, analytic = loss_and_grads(model, X, y, sample_weight)
    probe = model.copy()
    worst = 0.0
    for param, grad in zip(probe.parameters(), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, _ = loss_and_grads(probe, X, y, sample_weight)
            flat[i] = orig - epsilon
            down, _ = loss_and_grads(probe, X, y, sample_weight)
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(gflat[i]), abs(numeric), 1e-6)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    batch_size: int = 256
    epochs: int = 30
    dropout: float = 0.1
    hidden: tuple[int, int] = (16, 16)
    seed: int = 0
    balance_classes: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")


def default_train_config(level: Level | str, **overrides) -> TrainConfig:
    """Training defaults per level.

    Instance windows give one row per trace, so the inst detector sees a few
    hundred rows at most; small batches and more epochs keep the number of
    optimizer steps comparable to the token levels.
    """
    level = Level(level)
    base = {"batch_size": 16, "epochs": 300} if level is Level.INST else {}
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    eval_recall: list[float] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        return self.eval_accuracy[-1] if self.eval_accuracy else None

    @property
    def recall(self) -> float | None:
        return self.eval_recall[-1] if self.eval_recall else None


def evaluate(model: MlpModel, X: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """(accuracy, recall on the positive class)."""
    y = np.asarray(y)
    pred = model.predict_proba(X) >= threshold
    truth = y >= 0.5
    accuracy = float(np.mean(pred == truth)) if y.size else float("nan")
    recall = float(np.mean(pred[truth])) if truth.any() else float("nan")
    return accuracy, recall


def class_weights(y: np.ndarray) -> np.ndarray:
    """Inverse-frequency sample weights with mean 1."""
    y = np.asarray(y)
    n = y.size
    pos = np.count_nonzero(y >= 0.5)
    w_pos = n / (2.0 * pos)
    w_neg = n / (2.0 * (n - pos))
    return np.where(y >= 0.5, w_pos, w_neg)


def _fold_standardization(model: MlpModel, mean: np.ndarray, scale: np.ndarray) -> None:
    W1 = model.weights[0]
    model.biases[0] = model.biases[0] - (mean / scale) @ W1
    model.weights[0] = W1 / scale[:, None]


def train(
    X: np.ndarray,
    y: np.ndarray,
    level: Level | str,
    config: TrainConfig | None = None,
    X_eval: np.ndarray | None = None,
    y_eval: np.ndarray | None = None,
    probe_digest: str = DEFAULT_PROBES.digest,
) -> tuple[MlpModel, TrainReport]:
    """Fit a detector by minimizing (class-weighted) mean BCE with AdamW.

    Inputs are standardized with training-set statistics during optimization;
    the affine map is folded into the first layer, so the returned model takes
    raw features.
    """
    config = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TrainingError("training set is empty")
    if X.shape[0] != y.shape[0]:
        raise ShapeError("features and labels differ in length")
    if not np.isin(y, (0.0, 1.0)).all():
        raise TrainingError("labels must be 0 or 1")
    if np.unique(y).size < 2:
        raise TrainingError("training set contains a single class")
    if not np.isfinite(X).all():
        raise TrainingError("training features contain NaN or Inf")

    rng = np.random.default_rng(config.seed)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Xs = (X - mean) / scale
    weights = class_weights(y) if config.balance_classes else np.ones_like(y)

    model = init_model(
        level, config.hidden, seed=config.seed, dropout=config.dropout,
        probe_digest=probe_digest, input_dim=X.shape[1],
    )
    params = model.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    report = TrainReport()
    step = 0
    n = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(
                model, Xs[idx], y[idx], weights[idx], rng=rng, dropout=config.dropout
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss diverged to {loss} at epoch {epoch}, step {step}; "
                    f"try a smaller learning rate (now {config.learning_rate})"
                )
            total += loss * idx.size
            step += 1
            bc1 = 1.0 - config.beta1**step
            bc2 = 1.0 - config.beta2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= config.beta1
                mi += (1.0 - config.beta1) * g
                vi *= config.beta2
                vi += (1.0 - config.beta2) * g * g
                p *= 1.0 - config.learning_rate * config.weight_decay
                p -= config.learning_rate * (mi / bc1) / (np.sqrt(vi / bc2) + config.adam_eps)
        report.losses.append(total / n)
        if X_eval is not None and y_eval is not None and len(y_eval):
            snapshot = model.copy()
            _fold_standardization(snapshot, mean, scale)
            acc, rec = evaluate(snapshot, X_eval, y_eval)
            report.eval_accuracy.append(acc)
            report.eval_recall.append(rec)
        log.debug("epoch %d loss %.6f", epoch, report.losses[-1])

    _fold_standardization(model, mean, scale)
    return model, report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
#
# layout (little-endian):
#   magic[8] version:u16 level:u8 reserved:u8 probe_digest[32] dropout:f64
#   n_dims:u32 dims:u32*n_dims  params:f64*  crc32:u32 (over all preceding bytes)

_HEADER = struct.Struct("<8sHBB32sdI")


def model_to_bytes(model: MlpModel) -> bytes:
    digest = model.probe_digest.encode("ascii")
    if len(digest) != 32:
        raise ValidationError("probe digest must be 32 hex characters")
    dims = model.dims
    body = _HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, _LEVEL_CODES[model.level], 0, digest, model.dropout, len(dims)
    )
    body += struct.pack(f"<{len(dims)}I", *dims)
    body += b"".join(p.astype("<f8").tobytes() for p in model.parameters())
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes, expected_probe_digest: str | None = None) -> MlpModel:
    if len(data) < _HEADER.size + 4:
        raise ModelFormatError("model file is truncated")
    magic, version, level_code, _, digest, dropout, n_dims = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError("not a detector model file (bad magic)")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError("model file checksum mismatch (corrupted or tampered)")
    if level_code not in _CODE_LEVELS:
        raise ModelFormatError(f"unknown level code {level_code}")
    if n_dims != 4:
        raise ModelFormatError(f"expected 4 layer dimensions, found {n_dims}")
    offset = _HEADER.size
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    offset += 4 * n_dims
    shapes = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        shapes += [(fan_in, fan_out), (fan_out,)]
    n_params = sum(int(np.prod(s)) for s in shapes)
    if len(data) - 4 - offset != 8 * n_params:
        raise ModelFormatError("parameter block size does not match the dimension table")
    flat = np.frombuffer(data, dtype="<f8", count=n_params, offset=offset).astype(np.float64)
    arrays, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(flat[pos : pos + size].reshape(shape).copy())
        pos += size
    digest = digest.decode("ascii")
    if expected_probe_digest is not None and digest != expected_probe_digest:
        raise ProbeMismatchError(
            f"model was trained with probe set {digest}, extractor uses {expected_probe_digest}"
        )
    try:
        return MlpModel(_CODE_LEVELS[level_code], arrays[0::2], arrays[1::2], dropout, digest)
    except (ShapeError, ValidationError) as exc:
        raise ModelFormatError(str(exc)) from exc


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: MlpModel, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path: str | os.PathLike, expected_probe_digest: str | None = None) -> MlpModel:
    return model_from_bytes(Path(path).read_bytes(), expected_probe_digest)
