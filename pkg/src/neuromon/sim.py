"""Labeled synthetic activation traces.

Each trace is a sequence of reasoning "steps" of random token length. The
channels are split into three expert groups, one per failure level, and
every injected pattern only touches its own group:

* intra  -- isolated impulses on top of the baseline (sharp spikes);
* inter  -- a sinusoid lasting a few steps (periodic fluctuation);
* inst   -- "easy" traces start with an elevated, strongly fluctuating
  phase that collapses to baseline before step K; "hard" traces keep the
  fluctuating phase for the whole trace.

The baseline is a log-normal transform of a unit-variance AR(1) process, so
magnitudes are positive and mildly low-pass. Signs are random: the monitor
only looks at ``|a|``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import atomic_write_bytes
from .errors import ValidationError
from .ingest import ActivationFrame, write_trace
from .monitor import FeatureTracker, MonitorConfig
from .spectral import Level

DEFAULT_GROUPS = {Level.INTRA: (0, 1, 2, 3), Level.INTER: (4, 5, 6, 7), Level.INST: (8, 9, 10, 11)}
INSTANCE_KINDS = ("easy", "hard")


@dataclass
class Injection:
    """One injected failure pattern.

    ``magnitude`` is in units of the baseline noise scale: the impulse height
    for intra events, the sinusoid amplitude for inter events.
    """

    level: Level
    onset: int
    duration: int = 1
    magnitude: float | None = None
    period: float = 12.0
    count: int = 1

    def __post_init__(self):
        self.level = Level(self.level)
        if self.magnitude is None:
            self.magnitude = 12.0 if self.level is Level.INTRA else 6.0


@dataclass
class SimSpec:
    n_channels: int = 12
    steps: int = 32
    tokens_per_step: tuple[int, int] = (10, 20)
    baseline_mean: float = 1.0
    noise_scale: float = 0.1
    ar_coef: float = 0.3
    injections: list[Injection] = field(default_factory=list)
    instance: str | None = None
    instance_steps: int = 4
    instance_level: float = 30.0
    instance_spread: float = 3.0
    instance_decay: float = 8.0
    channel_groups: dict = field(default_factory=lambda: dict(DEFAULT_GROUPS))
    ceiling: float = 1e3
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        self.injections = [i if isinstance(i, Injection) else Injection(**i) for i in self.injections]
        self.channel_groups = {Level(k): tuple(int(c) for c in v) for k, v in self.channel_groups.items()}
        self.tokens_per_step = tuple(self.tokens_per_step)

    def validate(self) -> None:
        lo, hi = self.tokens_per_step
        if self.n_channels < 1 or self.steps < 1:
            raise ValidationError("n_channels and steps must be positive")
        if not 1 <= lo <= hi:
            raise ValidationError(f"invalid tokens_per_step range {self.tokens_per_step}")
        if self.baseline_mean <= 0 or self.noise_scale <= 0 or self.ceiling <= 0:
            raise ValidationError("baseline_mean, noise_scale and ceiling must be positive")
        if not 0 <= self.ar_coef < 1:
            raise ValidationError("ar_coef must lie in [0, 1)")
        if self.instance not in (None, *INSTANCE_KINDS):
            raise ValidationError(f"instance must be one of {INSTANCE_KINDS} or None")
        if self.instance_decay <= 0:
            raise ValidationError("instance_decay must be positive")
        if not 1 <= self.instance_steps <= self.steps:
            raise ValidationError("instance_steps must lie within the trace")
        for lvl in Level:
            group = self.channel_groups.get(lvl)
            if not group or min(group) < 0 or max(group) >= self.n_channels:
                raise ValidationError(f"channel group for {lvl} is empty or out of range")
        for inj in self.injections:
            if inj.level is Level.INST:
                raise ValidationError("instance patterns are set with `instance`, not injections")
            if inj.magnitude <= 0 or inj.duration < 1 or inj.count < 1 or inj.period <= 1:
                raise ValidationError(f"injection parameters must be positive: {inj}")
            if not 0 <= inj.onset or inj.onset + inj.duration > self.steps:
                raise ValidationError(f"injection {inj} falls outside the {self.steps}-step trace")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_groups"] = {k.value: list(v) for k, v in self.channel_groups.items()}
        d["injections"] = [{**asdict(i), "level": i.level.value} for i in self.injections]
        d["tokens_per_step"] = list(self.tokens_per_step)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown simulation keys: {sorted(unknown)}")
        try:
            spec = cls(**data)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid simulation spec: {exc}") from None
        spec.validate()
        return spec


@dataclass
class EventSpan:
    level: Level
    start_step: int
    end_step: int  # inclusive
    start_t: int
    end_t: int  # inclusive


@dataclass
class LabeledTrace:
    spec: SimSpec
    activations: np.ndarray  # (T, N), signed
    step_of_token: np.ndarray  # (T,)
    step_labels: dict[Level, np.ndarray]  # per-step 0/1
    token_labels: dict[Level, np.ndarray]  # per-token 0/1
    events: list[EventSpan]

    @property
    def n_tokens(self) -> int:
        return self.activations.shape[0]

    @property
    def separators(self) -> np.ndarray:
        last = np.r_[self.step_of_token[1:] != self.step_of_token[:-1], True]
        return last

    def frames(self) -> list[ActivationFrame]:
        sep = self.separators
        return [
            ActivationFrame(self.spec.stream_id, t, self.activations[t], bool(sep[t]))
            for t in range(self.n_tokens)
        ]

    def sidecar(self) -> dict:
        return {
            "stream": self.spec.stream_id,
            "instance": self.spec.instance,
            "steps": {
                str(s): {lvl.value: int(self.step_labels[lvl][s]) for lvl in Level}
                for s in range(self.spec.steps)
            },
            "events": [
                {"level": e.level.value, "start_step": e.start_step, "end_step": e.end_step,
                 "start_t": e.start_t, "end_t": e.end_t}
                for e in self.events
            ],
            "spec": self.spec.to_dict(),
        }


def _ar1(rng: np.random.Generator, n: int, channels: int, phi: float) -> np.ndarray:
    z = np.empty((n, channels))
    z[0] = rng.standard_normal(channels)
    innov = rng.standard_normal((n, channels)) * np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        z[t] = phi * z[t - 1] + innov[t]
    return z


def generate(spec: SimSpec) -> LabeledTrace:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.tokens_per_step
    lengths = rng.integers(lo, hi + 1, size=spec.steps)
    bounds = np.r_[0, np.cumsum(lengths)]
    n_tok = int(bounds[-1])
    step_of_token = np.repeat(np.arange(spec.steps), lengths)
    sigma = spec.baseline_mean * spec.noise_scale

    z = _ar1(rng, n_tok, spec.n_channels, spec.ar_coef)
    x = spec.baseline_mean * np.exp(spec.noise_scale * z - 0.5 * spec.noise_scale**2)

    step_labels = {lvl: np.zeros(spec.steps, dtype=np.int8) for lvl in Level}
    token_labels = {lvl: np.zeros(n_tok, dtype=np.int8) for lvl in Level}
    events: list[EventSpan] = []

    for inj in spec.injections:
        group = np.array(spec.channel_groups[inj.level])
        first, last = inj.onset, inj.onset + inj.duration - 1
        t0, t1 = int(bounds[first]), int(bounds[last + 1])
        if inj.level is Level.INTRA:
            span = np.arange(t0, t1)
            hits = np.sort(rng.choice(span, size=min(inj.count, span.size), replace=False))
            gain = rng.uniform(0.8, 1.2, size=(hits.size, group.size))
            x[np.ix_(hits, group)] += inj.magnitude * sigma * gain
            token_labels[Level.INTRA][hits] = 1
            hit_steps = np.unique(step_of_token[hits])
            step_labels[Level.INTRA][hit_steps] = 1
            events.append(EventSpan(Level.INTRA, int(hit_steps[0]), int(hit_steps[-1]),
                                    int(hits[0]), int(hits[-1])))
        else:
            t = np.arange(t0, t1)[:, None]
            phase = rng.uniform(0, 2 * np.pi, size=group.size)
            gain = rng.uniform(0.8, 1.2, size=group.size)
            x[t0:t1, group] += inj.magnitude * sigma * gain * np.sin(2 * np.pi * (t - t0) / inj.period + phase)
            token_labels[Level.INTER][t0:t1] = 1
            step_labels[Level.INTER][first : last + 1] = 1
            events.append(EventSpan(Level.INTER, first, last, t0, t1 - 1))

    if spec.instance is not None:
        group = np.array(spec.channel_groups[Level.INST])
        # the active phase covers the first half of the prefix, then decays within a few tokens
        active_end = int(bounds[max(spec.instance_steps // 2, 1)])
        envelope = np.ones(n_tok)
        if spec.instance == "easy":
            tail = np.arange(n_tok - active_end)
            envelope[active_end:] = np.exp(-tail / spec.instance_decay)
        burst = np.abs(rng.standard_normal((n_tok, group.size)))
        activity = spec.instance_level + spec.instance_spread * burst
        x[:, group] += sigma * envelope[:, None] * activity
        if spec.instance == "easy":
            k_end = int(bounds[spec.instance_steps])
            step_labels[Level.INST][: spec.instance_steps] = 1
            token_labels[Level.INST][:k_end] = 1
            events.append(EventSpan(Level.INST, 0, spec.instance_steps - 1, 0, k_end - 1))

    np.minimum(x, spec.ceiling, out=x)
    signs = np.where(rng.random(x.shape) < 0.5, -1.0, 1.0)
    return LabeledTrace(spec, x * signs, step_of_token, step_labels, token_labels, events)


def write_labeled_trace(trace: LabeledTrace, path: str | os.PathLike, fmt: str | None = None) -> Path:
    """Write the trace file and its ``<path>.labels.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    sidecar = sidecar_path(path)
    write_trace(path, trace.frames(), fmt)
    atomic_write_bytes(sidecar, json.dumps(trace.sidecar(), indent=1, sort_keys=True).encode())
    return sidecar


def sidecar_path(trace_path: str | os.PathLike) -> Path:
    trace_path = Path(trace_path)
    return trace_path.with_name(trace_path.name + ".labels.json")


def read_sidecar(path: str | os.PathLike) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: label sidecar is not valid JSON ({exc.msg})") from None


def trace_from_sidecar(sidecar: dict, frames: list[ActivationFrame] | None = None) -> LabeledTrace:
    """Regenerate the labeled trace a sidecar describes.

    With ``frames`` given, their magnitudes must match the regenerated
    activations, so labels are never scored against the wrong trace.
    """
    try:
        spec = SimSpec.from_dict(sidecar["spec"])
    except (KeyError, TypeError):
        raise ValidationError("label sidecar carries no simulation spec") from None
    trace = generate(spec)
    if frames is not None:
        got = np.abs(np.array([f.values for f in frames]))
        if got.shape != trace.activations.shape or not np.array_equal(got, np.abs(trace.activations)):
            raise ValidationError("label sidecar does not describe this trace")
    return trace


# ---------------------------------------------------------------------------
# randomized corpora
# ---------------------------------------------------------------------------


def random_spec(
    rng: np.random.Generator,
    stream_id: int = 0,
    steps: int = 32,
    max_events: int = 2,
    gap: int = 10,
    **overrides,
) -> SimSpec:
    """A spec with 0..max_events intra and inter events and a random instance kind.

    Same-level events start at least ``gap`` steps apart and never before the
    instance prefix ends, so each event stands alone in its windows.
    """
    base = SimSpec(steps=steps, seed=int(rng.integers(2**32)), stream_id=stream_id,
                   instance=str(rng.choice(INSTANCE_KINDS)))
    for key, value in overrides.items():
        setattr(base, key, value)
    injections = []
    for lvl, duration in ((Level.INTRA, 1), (Level.INTER, 3)):
        n_events = int(rng.integers(0, max_events + 1))
        first = base.instance_steps
        slots = list(range(first, steps - duration + 1))
        chosen: list[int] = []
        for s in rng.permutation(slots):
            if len(chosen) == n_events:
                break
            if all(abs(int(s) - c) >= gap for c in chosen):
                chosen.append(int(s))
        for onset in sorted(chosen):
            injections.append(Injection(lvl, onset, duration, count=int(rng.integers(1, 3))
                                        if lvl is Level.INTRA else 1))
    base.injections = injections
    base.validate()
    return base


def random_specs(n: int, seed: int = 0, **kwargs) -> list[SimSpec]:
    rng = np.random.default_rng(seed)
    return [random_spec(rng, stream_id=i, **kwargs) for i in range(n)]


def monitor_config_for(spec: SimSpec, **kwargs) -> MonitorConfig:
    """A monitor config whose expert channels match the spec's groups."""
    return MonitorConfig(channels=dict(spec.channel_groups), **kwargs)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

# inter windows with event coverage strictly between 0 and this fraction are
# transitional: their features overlap the clean tail, so they are left out
INTER_MIN_COVERAGE = 0.5


@dataclass
class LevelDataset:
    level: Level
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    train_traces: np.ndarray
    test_traces: np.ndarray
    trace_of_row_train: np.ndarray
    trace_of_row_test: np.ndarray
    n_ambiguous: int = 0

    def to_bytes(self) -> bytes:
        arrays = (self.X_train, self.y_train, self.X_test, self.y_test)
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def window_rows(trace: LabeledTrace, config: MonitorConfig) -> dict[Level, tuple[np.ndarray, np.ndarray, int]]:
    """Per-level (features, labels, n_ambiguous) for every window the monitor would evaluate."""
    tracker = FeatureTracker(config, trace.spec.n_channels)
    cum = {lvl: np.r_[0, np.cumsum(trace.token_labels[lvl])] for lvl in Level}
    rows: dict[Level, list] = {lvl: [] for lvl in Level}
    labels: dict[Level, list] = {lvl: [] for lvl in Level}
    ambiguous = {lvl: 0 for lvl in Level}
    for frame in trace.frames():
        for ev in tracker.update(frame):
            lo, hi = ev.t - ev.length + 1, ev.t + 1
            inside = int(cum[ev.level][hi] - cum[ev.level][lo])
            if ev.level is Level.INTER:
                coverage = inside / ev.length
                if 0 < coverage < INTER_MIN_COVERAGE:
                    ambiguous[ev.level] += 1
                    continue
                label = int(coverage >= INTER_MIN_COVERAGE)
            elif ev.level is Level.INST:
                label = int(trace.spec.instance == "easy")
            else:
                label = int(inside > 0)
            feats = ev.features.mean(axis=0) if config.aggregation == "mean-features" else ev.features
            rows[ev.level].append(np.atleast_2d(feats))
            labels[ev.level].append(np.full(np.atleast_2d(feats).shape[0], label))
    out = {}
    for lvl in Level:
        if rows[lvl]:
            out[lvl] = (np.vstack(rows[lvl]), np.concatenate(labels[lvl]).astype(np.float64), ambiguous[lvl])
        else:
            dim = {Level.INTRA: 3}.get(lvl, 2)
            out[lvl] = (np.zeros((0, dim)), np.zeros(0), ambiguous[lvl])
    return out


def build_dataset(
    specs: list[SimSpec],
    config: MonitorConfig | None = None,
    seed: int = 0,
    train_fraction: float = 0.8,
) -> dict[Level, LevelDataset]:
    """Window-level datasets per level with an 8:2 split by trace."""
    if not specs:
        raise ValidationError("no simulation specs given")
    config = config or monitor_config_for(specs[0])
    per_trace = [window_rows(generate(spec), config) for spec in specs]
    order = np.random.default_rng(seed).permutation(len(specs))
    n_train = int(round(train_fraction * len(specs)))
    train_ids, test_ids = np.sort(order[:n_train]), np.sort(order[n_train:])
    out = {}
    for lvl in Level:
        def gather(ids):
            X = [per_trace[i][lvl][0] for i in ids]
            y = [per_trace[i][lvl][1] for i in ids]
            owner = [np.full(len(yy), i) for i, yy in zip(ids, y)]
            dim = per_trace[0][lvl][0].shape[1]
            return (np.vstack(X) if X else np.zeros((0, dim)),
                    np.concatenate(y) if y else np.zeros(0),
                    np.concatenate(owner) if owner else np.zeros(0, dtype=int))
        X_tr, y_tr, o_tr = gather(train_ids)
        X_te, y_te, o_te = gather(test_ids)
        all_y = np.concatenate([y_tr, y_te])
        if all_y.size == 0 or np.unique(all_y).size < 2:
            raise ValidationError(f"simulated corpus lacks one class for level {lvl}")
        out[lvl] = LevelDataset(lvl, X_tr, y_tr, X_te, y_te, train_ids, test_ids, o_tr, o_te,
                                sum(per_trace[i][lvl][2] for i in range(len(specs))))
    return out


# ---------------------------------------------------------------------------
# event-level scoring
# ---------------------------------------------------------------------------


@dataclass
class EventScore:
    """Event-level tallies for one or more replayed traces.

    An injected intra/inter event counts as detected when the monitor fires
    at that level while the event is still inside the level window, i.e. at a
    token whose step lies in ``[start_step, end_step + k - 1]``. Monitor events
    that match no injected event are false. An instance event is correct when
    the trace is easy, it fires once, at step ``K``, with the configured payload.
    """

    injected: dict = field(default_factory=lambda: {lvl: 0 for lvl in Level})
    detected: dict = field(default_factory=lambda: {lvl: 0 for lvl in Level})
    false_events: dict = field(default_factory=lambda: {lvl: 0 for lvl in Level})
    true_events: dict = field(default_factory=lambda: {lvl: 0 for lvl in Level})
    clean_steps: int = 0
    inst_misplaced: int = 0

    def recall(self, level: Level) -> float:
        level = Level(level)
        n = self.injected[level]
        return 1.0 if n == 0 else self.detected[level] / n

    def precision(self, level: Level) -> float:
        level = Level(level)
        n = self.true_events[level] + self.false_events[level]
        return 1.0 if n == 0 else self.true_events[level] / n

    def false_per_100_clean_steps(self) -> float:
        total = sum(self.false_events.values())
        return 0.0 if self.clean_steps == 0 else 100.0 * total / self.clean_steps

    def merge(self, other: "EventScore") -> "EventScore":
        for lvl in Level:
            self.injected[lvl] += other.injected[lvl]
            self.detected[lvl] += other.detected[lvl]
            self.false_events[lvl] += other.false_events[lvl]
            self.true_events[lvl] += other.true_events[lvl]
        self.clean_steps += other.clean_steps
        self.inst_misplaced += other.inst_misplaced
        return self


def score_events(trace: LabeledTrace, events: list, config: MonitorConfig) -> EventScore:
    score = EventScore()
    step_of = trace.step_of_token
    dirty = np.zeros(trace.spec.steps, dtype=bool)
    for lvl in (Level.INTRA, Level.INTER):
        dirty |= trace.step_labels[lvl].astype(bool)
    score.clean_steps = int((~dirty).sum())
    by_level = {lvl: [e for e in events if Level(e.level) is lvl] for lvl in Level}
    for lvl in (Level.INTRA, Level.INTER):
        k = config.window_steps(lvl)
        spans = [s for s in trace.events if s.level is lvl]
        matched = set()
        for span in spans:
            score.injected[lvl] += 1
            hits = [i for i, e in enumerate(by_level[lvl])
                    if span.start_step <= step_of[e.t] <= span.end_step + k - 1]
            if hits:
                score.detected[lvl] += 1
                matched.update(hits)
        score.false_events[lvl] += len(by_level[lvl]) - len(matched)
        score.true_events[lvl] += len(matched)
    inst = by_level[Level.INST]
    if trace.spec.instance == "easy":
        score.injected[Level.INST] += 1
        good = [e for e in inst
                if e.step == config.k_inst and e.payload == config.payloads[Level.INST]]
        if len(inst) == 1 and good:
            score.detected[Level.INST] += 1
            score.true_events[Level.INST] += 1
        elif inst:
            score.inst_misplaced += 1
            score.false_events[Level.INST] += len(inst)
    else:
        score.false_events[Level.INST] += len(inst)
    return score
