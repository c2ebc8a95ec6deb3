"""Online monitoring engine.

Frames are pushed into one :class:`~neuromon.spectral.SpectralWindow` per
level. The intra/inter windows keep the tokens of the most recent ``k`` steps
(the step in progress counts as one); the instance window holds the first
``K`` steps and is evaluated once, when the K-th step separator arrives.
Detector probabilities at or above the level threshold produce an
:class:`InterventionEvent`, after which the level is muted for a refractory
span measured in steps.
"""
from __future__ import annotations

import json
import logging
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .classifier import MlpModel
from .errors import ConfigError, ProbeMismatchError, ProtocolError, ShapeError
from .ingest import ActivationFrame, read_trace
from .spectral import DEFAULT_PROBES, EPSILON, Level, ProbeSet, SpectralWindow, feature_dim

log = logging.getLogger(__name__)

NOTHINKING_PROMPT = "Okay, I have finished thinking."
DEFAULT_PAYLOADS = {
    Level.INTRA: "<INTRA>",
    Level.INTER: "<INTER>",
    Level.INST: NOTHINKING_PROMPT,
}
ALLOWED_K = (2, 4, 8)
AGGREGATIONS = ("mean-features", "max-probability")
# when several levels fire on the same token only one event can be emitted
LEVEL_PRIORITY = (Level.INST, Level.INTRA, Level.INTER)
_LEVEL_CODE = {Level.INTRA: 0, Level.INTER: 1, Level.INST: 2}


def _per_level(value, cast=lambda v: v) -> dict[Level, object]:
    if isinstance(value, dict):
        return {Level(k): cast(v) for k, v in value.items()}
    return {lvl: cast(value) for lvl in Level}


@dataclass
class MonitorConfig:
    """Static monitor settings, shared read-only between streams.

    ``channels`` maps each level to the frame channel indices of its expert
    neurons; ``None`` (or a missing level) means every channel.
    ``refractory`` is in steps and defaults to ``2 * k`` for the level.
    """

    k_intra: int = 4
    k_inter: int = 4
    k_inst: int = 4
    thresholds: dict = field(default_factory=lambda: {lvl: 0.5 for lvl in Level})
    refractory: dict | None = None
    aggregation: str = "mean-features"
    channels: dict | None = None
    probes: ProbeSet = DEFAULT_PROBES
    epsilon: float = EPSILON
    stride: int = 1
    payloads: dict = field(default_factory=lambda: dict(DEFAULT_PAYLOADS))
    allow_any_k: bool = False
    rebuild_every: int | None = 4096

    def __post_init__(self):
        for name in ("k_intra", "k_inter", "k_inst"):
            k = getattr(self, name)
            if not isinstance(k, (int, np.integer)) or k < 1:
                raise ConfigError(f"{name} must be a positive integer, got {k!r}")
            if not self.allow_any_k and k not in ALLOWED_K:
                raise ConfigError(
                    f"{name}={k} is outside {set(ALLOWED_K)}; set allow_any_k to override"
                )
        self.thresholds = _per_level(self.thresholds, float)
        for lvl in Level:
            t = self.thresholds.setdefault(lvl, 0.5)
            if not 0.0 < t < 1.0:
                raise ConfigError(f"threshold for {lvl} must lie in (0, 1), got {t}")
        default_refractory = {Level.INTRA: 2 * self.k_intra, Level.INTER: 2 * self.k_inter, Level.INST: 0}
        given = _per_level(self.refractory, int) if self.refractory is not None else {}
        self.refractory = {**default_refractory, **given}
        if any(v < 0 for v in self.refractory.values()):
            raise ConfigError("refractory spans must be non-negative")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.stride < 1:
            raise ConfigError("stride must be at least 1")
        self.payloads = {**DEFAULT_PAYLOADS, **_per_level(self.payloads or {}, str)}
        if self.channels is not None:
            chans = {}
            for lvl, idx in _per_level(self.channels).items():
                if idx is None:
                    continue
                idx = tuple(int(i) for i in idx)
                if not idx:
                    raise ConfigError(f"empty expert neuron set for {lvl}")
                if min(idx) < 0 or len(set(idx)) != len(idx):
                    raise ConfigError(f"invalid channel indices for {lvl}: {idx}")
                chans[lvl] = idx
            self.channels = chans

    def window_steps(self, level: Level) -> int:
        return {Level.INTRA: self.k_intra, Level.INTER: self.k_inter, Level.INST: self.k_inst}[level]

    def level_channels(self, level: Level, n_channels: int) -> tuple[int, ...]:
        if self.channels and level in self.channels:
            return self.channels[level]
        return tuple(range(n_channels))


@dataclass(frozen=True)
class Evaluation:
    """Features of one window at one token, per expert channel."""

    level: Level
    t: int
    step: int
    length: int
    features: np.ndarray  # (n_channels, d)


class FeatureTracker:
    """Step-keyed sliding windows for one stream (no detectors).

    :meth:`update` consumes a frame and returns the window evaluations due at
    that token. The dataset builder and the live monitor both go through this
    class, so training features match what the monitor sees.
    """

    def __init__(self, config: MonitorConfig, n_channels: int):
        self.config = config
        self.n_channels = n_channels
        self.channels = {lvl: np.array(config.level_channels(lvl, n_channels)) for lvl in Level}
        for lvl, idx in self.channels.items():
            if idx.max() >= n_channels:
                raise ConfigError(
                    f"{lvl} expert channel {idx.max()} is outside the {n_channels}-channel frame"
                )
        self.windows: dict[Level, SpectralWindow | None] = {
            lvl: SpectralWindow(len(idx), config.probes, config.epsilon, config.rebuild_every)
            for lvl, idx in self.channels.items()
        }
        self.step_tokens = {Level.INTRA: deque([0]), Level.INTER: deque([0])}
        self.step = 0
        self.tokens = 0

    def window_length(self, level: Level) -> int:
        win = self.windows[level]
        return 0 if win is None else len(win)

    def update(self, frame: ActivationFrame) -> list[Evaluation]:
        if frame.n_channels != self.n_channels:
            raise ConfigError(
                f"frame has {frame.n_channels} channels, stream started with {self.n_channels}"
            )
        values = frame.values
        self.tokens += 1
        out = []
        for lvl in (Level.INTRA, Level.INTER):
            win = self.windows[lvl]
            win.push(values[self.channels[lvl]])
            self.step_tokens[lvl][-1] += 1
            if len(win) >= 2 and self.tokens % self.config.stride == 0:
                out.append(Evaluation(lvl, frame.t, self.step, len(win), win.features(lvl)))
        inst = self.windows[Level.INST]
        if inst is not None:
            inst.push(values[self.channels[Level.INST]])
            if frame.separator and self.step + 1 == self.config.k_inst:
                if len(inst) >= 2:
                    out.append(
                        Evaluation(Level.INST, frame.t, self.step + 1, len(inst), inst.features(Level.INST))
                    )
                self.windows[Level.INST] = None
        if frame.separator:
            self.step += 1
            for lvl, counts in self.step_tokens.items():
                if len(counts) >= self.config.window_steps(lvl):
                    self.windows[lvl].pop(counts.popleft())
                counts.append(0)
        return out


@dataclass(frozen=True)
class InterventionEvent:
    """A detection at token ``t``; ``step`` counts the steps completed at that token."""

    stream_id: int
    t: int
    step: int
    level: Level
    probability: float
    payload: str
    window_id: int

    def to_record(self) -> dict:
        record = asdict(self)
        record["level"] = self.level.value
        return record


@dataclass(frozen=True)
class Directive:
    """Instruction to the decoding runtime: force ``force`` as token ``at``."""

    stream_id: int
    level: Level
    force: str
    at: int
    resume_at: int
    probability: float

    def to_message(self) -> dict:
        return {
            "stream": self.stream_id,
            "level": self.level.value,
            "force": self.force,
            "at": self.at,
            "resume_at": self.resume_at,
            "probability": self.probability,
        }


def decode_constraint(event: InterventionEvent | None) -> Directive | None:
    """Hard constraint on the next token after an event at position τ."""
    if event is None:
        return None
    return Directive(event.stream_id, event.level, event.payload, event.t + 1, event.t + 2, event.probability)


def aggregate(model: MlpModel, features: np.ndarray, mode: str = "mean-features") -> float:
    """Level probability from per-neuron features of shape (n_neurons, d)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ConfigError("aggregation needs a non-empty set of expert neurons")
    if mode == "mean-features":
        return float(model.predict_proba(features.mean(axis=0, keepdims=True))[0])
    if mode == "max-probability":
        return float(model.predict_proba(features).max())
    raise ConfigError(f"unknown aggregation mode {mode!r}")


def check_models(config: MonitorConfig, models: dict) -> dict[Level, MlpModel]:
    models = {Level(k): v for k, v in models.items()}
    for lvl, model in models.items():
        if model.level is not lvl:
            raise ConfigError(f"model for {lvl} is tagged {model.level}")
        if model.probe_digest != config.probes.digest:
            raise ProbeMismatchError(
                f"{lvl} model was trained with probe set {model.probe_digest}, "
                f"monitor uses {config.probes.digest}"
            )
        if model.dims[0] != feature_dim(lvl):
            raise ShapeError(f"{lvl} model takes {model.dims[0]} inputs, expected {feature_dim(lvl)}")
    return models


class Monitor:
    """Per-stream monitoring state. Single owner; models and config are shared."""

    def __init__(self, config: MonitorConfig, models: dict, stream_id: int | None = None,
                 record_features: bool = False):
        self.config = config
        self.models = check_models(config, models)
        self.stream_id = stream_id
        self.tracker: FeatureTracker | None = None
        self.refractory_until = {lvl: 0 for lvl in Level}
        self.inst_fired = False
        self.events: list[InterventionEvent] = []
        self.record_features = record_features
        self.feature_rows: list[list[float]] = []
        self.n_evaluations = 0
        self.last_t: int | None = None
        self.ended = False
        self.truncated = False

    @property
    def step(self) -> int:
        return 0 if self.tracker is None else self.tracker.step

    def on_frame(self, frame: ActivationFrame) -> InterventionEvent | None:
        if self.ended:
            raise ProtocolError("frame received after end of stream")
        if self.tracker is None:
            self.tracker = FeatureTracker(self.config, frame.n_channels)
            if self.stream_id is None:
                self.stream_id = frame.stream_id
        if self.last_t is not None and frame.t <= self.last_t:
            raise ProtocolError(f"token index {frame.t} does not follow {self.last_t}")
        self.last_t = frame.t
        evaluations = self.tracker.update(frame)
        step_now = self.tracker.step
        fired: dict[Level, tuple[float, int]] = {}
        for ev in evaluations:
            model = self.models.get(ev.level)
            if model is None:
                continue
            prob = aggregate(model, ev.features, self.config.aggregation)
            window_id = self.n_evaluations
            self.n_evaluations += 1
            if self.record_features:
                self._record(ev, prob)
            if prob < self.config.thresholds[ev.level]:
                continue
            if ev.level is Level.INST:
                if self.inst_fired:
                    continue
            elif step_now < self.refractory_until[ev.level]:
                continue
            fired[ev.level] = (prob, window_id)
        for lvl in LEVEL_PRIORITY:
            if lvl in fired:
                prob, window_id = fired[lvl]
                event = InterventionEvent(
                    self.stream_id, frame.t, step_now, lvl, prob, self.config.payloads[lvl], window_id
                )
                if lvl is Level.INST:
                    self.inst_fired = True
                else:
                    self.refractory_until[lvl] = step_now + self.config.refractory[lvl]
                self.events.append(event)
                return event
        return None

    def _record(self, ev: Evaluation, prob: float) -> None:
        feats = ev.features.mean(axis=0)
        row = [float(ev.t), float(ev.step), float(_LEVEL_CODE[ev.level]), float(ev.length), prob]
        row += list(feats) + [float("nan")] * (3 - feats.size)
        self.feature_rows.append(row)

    def finish(self) -> dict:
        self.ended = True
        return {"stream": self.stream_id, "frames": self.tracker.tokens if self.tracker else 0,
                "events": len(self.events)}

    def mark_truncated(self) -> dict:
        self.ended = True
        self.truncated = True
        return {"stream": self.stream_id, "kind": "truncated", "t": self.last_t}


FEATURE_DUMP_COLUMNS = ("t", "step", "level", "length", "probability", "f0", "f1", "f2")


@dataclass
class ReplayResult:
    events: list[InterventionEvent]
    features: np.ndarray  # rows per evaluated window, columns FEATURE_DUMP_COLUMNS
    n_frames: int
    n_evaluations: int

    def event_records(self) -> list[dict]:
        return [e.to_record() for e in self.events]


def replay(
    trace: str | os.PathLike | Iterable[ActivationFrame],
    config: MonitorConfig,
    models: dict,
    dump_features: bool = False,
) -> ReplayResult:
    """Run a monitor over a recorded trace (a path or an iterable of frames)."""
    frames: Iterator[ActivationFrame]
    frames = read_trace(trace) if isinstance(trace, (str, os.PathLike)) else iter(trace)
    monitor = Monitor(config, models, record_features=dump_features)
    n = 0
    for frame in frames:
        monitor.on_frame(frame)
        n += 1
    monitor.finish()
    rows = np.array(monitor.feature_rows, dtype=np.float64).reshape(-1, len(FEATURE_DUMP_COLUMNS))
    return ReplayResult(monitor.events, rows, n, monitor.n_evaluations)


class MonitorSession:
    """Adapter between a socket session and a :class:`Monitor`.

    Every event turns into a directive message; stream ends and truncations
    are appended to ``log`` (a list shared with the caller, if given).
    """

    def __init__(self, config: MonitorConfig, models: dict, log: list | None = None):
        self.monitor = Monitor(config, models)
        self.log = log if log is not None else []

    def on_frame(self, frame: ActivationFrame) -> dict | None:
        event = self.monitor.on_frame(frame)
        if event is None:
            return None
        self.log.append(event.to_record())
        return decode_constraint(event).to_message()

    def on_end(self) -> dict:
        return self.monitor.finish()

    def on_truncated(self) -> None:
        record = self.monitor.mark_truncated()
        log.warning("stream %s truncated after t=%s", record["stream"], record["t"])
        self.log.append(record)


def write_event_log(path: str | os.PathLike, records: Iterable[dict]) -> None:
    from .classifier import atomic_write_bytes

    lines = [json.dumps(r, sort_keys=True) for r in records]
    atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))


def read_event_log(path: str | os.PathLike) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
