import json

import numpy as np
import pytest

from neuromon.errors import ValidationError
from neuromon.ingest import read_trace
from neuromon.monitor import FeatureTracker, InterventionEvent
from neuromon.sim import (
    Injection,
    SimSpec,
    build_dataset,
    generate,
    monitor_config_for,
    random_specs,
    read_sidecar,
    score_events,
    trace_from_sidecar,
    write_labeled_trace,
)
from neuromon.spectral import Level


def _windows(spec, level):
    trace = generate(spec)
    tracker = FeatureTracker(monitor_config_for(spec), spec.n_channels)
    out = []
    for frame in trace.frames():
        out += [(ev.t, ev.features) for ev in tracker.update(frame) if ev.level is level]
    return trace, out


def _mad(x):
    x = np.asarray(x)
    return np.median(np.abs(x - np.median(x)))


def test_generation_is_deterministic():
    spec = SimSpec(seed=5, injections=[Injection(Level.INTRA, 8)], instance="easy")
    a, b = generate(spec), generate(spec)
    assert np.array_equal(a.activations, b.activations)
    assert np.array_equal(a.step_of_token, b.step_of_token)
    assert not np.array_equal(a.activations, generate(SimSpec(seed=6)).activations)


def test_clean_trace_has_no_labels():
    trace = generate(SimSpec(seed=1))
    assert trace.events == []
    for lvl in Level:
        assert trace.step_labels[lvl].sum() == 0
        assert trace.token_labels[lvl].sum() == 0


def test_clean_windows_have_no_dominant_probe():
    # averaged over the expert channels, as the monitor aggregates them
    for seed in range(10):
        _, rows = _windows(SimSpec(seed=seed), Level.INTER)
        assert max(f[:, 0].mean() for _, f in rows) < 0.5


def test_intra_impulse_raises_high_band_share():
    clean = SimSpec(seed=3)
    spiked = SimSpec(seed=3, injections=[Injection(Level.INTRA, 12, magnitude=10.0)])
    _, clean_rows = _windows(clean, Level.INTRA)
    trace, rows = _windows(spiked, Level.INTRA)
    hit = trace.events[0].start_t
    containing = [f[:, 0].mean() for t, f in rows if t == hit]
    assert containing[0] > np.median([f[:, 0].mean() for _, f in clean_rows])


def test_probe_frequency_oscillation_dominates():
    for seed in range(5):
        spec = SimSpec(seed=seed, injections=[Injection(Level.INTER, 10, 3, magnitude=5.0, period=16.0)])
        trace, rows = _windows(spec, Level.INTER)
        ev = trace.events[0]
        # once the window is mostly inside the event
        vals = [f[:, 0].mean() for t, f in rows if ev.start_t + 30 <= t <= ev.end_t]
        assert min(vals) >= 0.6


def test_injected_windows_are_separable():
    specs = random_specs(30, seed=4)
    data = build_dataset(specs, monitor_config_for(specs[0]))
    for lvl, col in ((Level.INTRA, 0), (Level.INTER, 0)):
        d = data[lvl]
        X = np.vstack([d.X_train, d.X_test])
        y = np.concatenate([d.y_train, d.y_test])
        pos, neg = X[y == 1, col], X[y == 0, col]
        assert abs(np.median(pos) - np.median(neg)) >= 3 * _mad(neg)
    # instance level: the low-band share trajectory separates easy from hard traces
    d = data[Level.INST]
    X = np.vstack([d.X_train, d.X_test])
    y = np.concatenate([d.y_train, d.y_test])
    pos, neg = X[y == 1, 0], X[y == 0, 0]
    assert abs(np.median(pos) - np.median(neg)) >= 3 * max(_mad(pos), _mad(neg))


def test_label_counts_match_injections():
    for spec in random_specs(20, seed=2):
        trace = generate(spec)
        inter_steps = sum(i.duration for i in spec.injections if i.level is Level.INTER)
        assert trace.step_labels[Level.INTER].sum() == inter_steps
        intra_hits = sum(i.count for i in spec.injections if i.level is Level.INTRA)
        assert trace.token_labels[Level.INTRA].sum() == intra_hits
        easy = spec.instance == "easy"
        assert trace.step_labels[Level.INST].sum() == (spec.instance_steps if easy else 0)


def test_dataset_split_is_by_trace_and_deterministic():
    specs = random_specs(20, seed=0)
    cfg = monitor_config_for(specs[0])
    a = build_dataset(specs, cfg, seed=3)
    b = build_dataset(specs, cfg, seed=3)
    for lvl in Level:
        assert a[lvl].to_bytes() == b[lvl].to_bytes()
        assert set(a[lvl].train_traces).isdisjoint(a[lvl].test_traces)
        assert len(a[lvl].train_traces) == 16 and len(a[lvl].test_traces) == 4
        assert set(a[lvl].trace_of_row_train) <= set(a[lvl].train_traces)
        assert set(a[lvl].trace_of_row_test) <= set(a[lvl].test_traces)
    # one instance window per trace
    assert a[Level.INST].y_train.size + a[Level.INST].y_test.size == 20


def test_dataset_rows_match_window_counts():
    specs = random_specs(5, seed=8)
    cfg = monitor_config_for(specs[0])
    data = build_dataset(specs, cfg)
    windows = 0
    for spec in specs:
        tracker = FeatureTracker(cfg, spec.n_channels)
        for frame in generate(spec).frames():
            windows += sum(ev.level is Level.INTRA for ev in tracker.update(frame))
    d = data[Level.INTRA]
    assert d.y_train.size + d.y_test.size == windows


def test_spec_validation():
    with pytest.raises(ValidationError):
        SimSpec(injections=[Injection(Level.INTRA, 40)]).validate()
    with pytest.raises(ValidationError):
        SimSpec(instance="medium").validate()
    with pytest.raises(ValidationError):
        SimSpec.from_dict({"steps": 10, "colour": "red"})
    with pytest.raises(ValidationError):
        SimSpec(tokens_per_step=(5, 2)).validate()


def test_trace_and_sidecar_roundtrip(tmp_path):
    spec = SimSpec(seed=2, injections=[Injection(Level.INTER, 6, 3)], instance="hard")
    trace = generate(spec)
    sidecar = write_labeled_trace(trace, tmp_path / "t.bin")
    frames = list(read_trace(tmp_path / "t.bin"))
    assert len(frames) == trace.n_tokens
    assert sum(f.separator for f in frames) == spec.steps
    data = read_sidecar(sidecar)
    back = trace_from_sidecar(data, frames)
    assert np.array_equal(back.activations, trace.activations)
    data["spec"]["seed"] = 3
    with pytest.raises(ValidationError):
        trace_from_sidecar(data, frames)
    sidecar.write_text("{broken")
    with pytest.raises(ValidationError):
        read_sidecar(sidecar)
    assert json.loads(json.dumps(trace.sidecar()))["events"][0]["level"] == "inter"


def _event(trace, level, t, payload=""):
    step = int(trace.step_of_token[t]) + 1
    return InterventionEvent(0, t, step, level, 0.9, payload, 0)


def test_event_scoring():
    spec = SimSpec(seed=0, injections=[Injection(Level.INTER, 10, 3)], instance="easy")
    trace = generate(spec)
    cfg = monitor_config_for(spec)
    ev = trace.events[0]
    k_inst_token = int(np.flatnonzero(trace.step_of_token == cfg.k_inst - 1)[-1])
    inst = InterventionEvent(0, k_inst_token, cfg.k_inst, Level.INST, 0.9, cfg.payloads[Level.INST], 0)
    good = [_event(trace, Level.INTER, ev.end_t), inst]
    score = score_events(trace, good, cfg)
    assert score.recall(Level.INTER) == 1.0 and score.recall(Level.INST) == 1.0
    assert sum(score.false_events.values()) == 0
    assert score.clean_steps == spec.steps - 3
    late = int(np.flatnonzero(trace.step_of_token == 25)[0])
    score = score_events(trace, [_event(trace, Level.INTER, late)], cfg)
    assert score.recall(Level.INTER) == 0.0 and score.false_events[Level.INTER] == 1
    assert score.recall(Level.INST) == 0.0
