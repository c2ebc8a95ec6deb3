import numpy as np
import pytest

from neuromon.classifier import MlpModel, init_model
from neuromon.errors import ConfigError, ProtocolError
from neuromon.ingest import ActivationFrame, connect_stream, serve_socket, write_trace
from neuromon.monitor import (
    FEATURE_DUMP_COLUMNS,
    NOTHINKING_PROMPT,
    FeatureTracker,
    InterventionEvent,
    Monitor,
    MonitorConfig,
    MonitorSession,
    aggregate,
    decode_constraint,
    read_event_log,
    replay,
    write_event_log,
)
from neuromon.sim import Injection, SimSpec, generate, monitor_config_for
from neuromon.spectral import Level


def _constant_model(level, logit):
    d = {Level.INTRA: 3}.get(level, 2)
    return MlpModel(level, [np.zeros((d, 2)), np.zeros((2, 2)), np.zeros((2, 1))],
                    [np.zeros(2), np.zeros(2), np.array([logit])])


def _first_feature_model(level, scale=10.0, shift=0.0):
    """p = sigmoid(scale * (f0 - shift)) through a GELU chain kept in its linear-ish region."""
    d = {Level.INTRA: 3}.get(level, 2)
    w1 = np.zeros((d, 1))
    w1[0, 0] = 1.0
    # gelu(x + 10) ~ x + 10 for moderate x, keeping the map monotone
    return MlpModel(level, [w1, np.ones((1, 1)), np.array([[scale]])],
                    [np.array([10.0]), np.zeros(1), np.array([-scale * (10.0 + shift)])])


def _frames(steps, tokens_per_step=5, channels=12, seed=0):
    rng = np.random.default_rng(seed)
    out, t = [], 0
    for _ in range(steps):
        for j in range(tokens_per_step):
            out.append(ActivationFrame(0, t, rng.random(channels) + 1, separator=j == tokens_per_step - 1))
            t += 1
    return out


# ---------------------------------------------------------------------------
# aggregation and directives
# ---------------------------------------------------------------------------


def test_single_neuron_aggregation_matches_direct_evaluation():
    model = init_model(Level.INTER, seed=1)
    feats = np.array([[0.3, 0.7]])
    direct = float(model.predict_proba(feats)[0])
    assert aggregate(model, feats, "mean-features") == direct
    assert aggregate(model, feats, "max-probability") == direct


def test_identical_neurons_aggregate_identically():
    model = init_model(Level.INTRA, seed=2)
    feats = np.tile([[0.2, 0.5, -1.0]], (4, 1))
    assert aggregate(model, feats, "mean-features") == pytest.approx(aggregate(model, feats, "max-probability"))


def test_spiking_neuron_dominates_max_probability():
    model = _first_feature_model(Level.INTER, shift=0.5)
    feats = np.array([[0.05, 0.9], [0.95, 0.1]])  # quiet, spiking
    assert aggregate(model, feats, "max-probability") >= aggregate(model, feats, "mean-features")
    with pytest.raises(ConfigError):
        aggregate(model, np.zeros((0, 2)))
    with pytest.raises(ConfigError):
        aggregate(model, feats, "median")


def test_decode_constraint():
    ev = InterventionEvent(3, 41, 6, Level.INTRA, 0.9, "<INTRA>", 0)
    d = decode_constraint(ev)
    assert (d.force, d.at, d.resume_at, d.stream_id) == ("<INTRA>", 42, 43, 3)
    inst = InterventionEvent(3, 10, 4, Level.INST, 0.8, NOTHINKING_PROMPT, 1)
    assert decode_constraint(inst).force == "Okay, I have finished thinking."
    assert decode_constraint(inst).to_message()["at"] == 11
    assert decode_constraint(None) is None


def test_config_validation():
    with pytest.raises(ConfigError):
        MonitorConfig(k_intra=3)
    assert MonitorConfig(k_intra=3, allow_any_k=True).k_intra == 3
    with pytest.raises(ConfigError):
        MonitorConfig(thresholds={"intra": 1.0})
    with pytest.raises(ConfigError):
        MonitorConfig(channels={"inter": []})
    cfg = MonitorConfig(k_inter=8)
    assert cfg.refractory[Level.INTER] == 16 and cfg.refractory[Level.INTRA] == 8


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


def test_windows_hold_the_last_k_steps():
    cfg = MonitorConfig(k_intra=2, k_inter=4)
    rng = np.random.default_rng(0)
    lengths = rng.integers(2, 7, size=12)
    tracker = FeatureTracker(cfg, 3)
    t = 0
    for step, n in enumerate(lengths):
        for j in range(n):
            frame = ActivationFrame(0, t, rng.random(3), separator=j == n - 1)
            evs = {ev.level: ev for ev in tracker.update(frame)}
            for lvl, k in ((Level.INTRA, 2), (Level.INTER, 4)):
                first = max(0, step - k + 1)
                want = int(lengths[first:step].sum()) + j + 1
                if want >= 2:
                    assert evs[lvl].length == want
                    assert evs[lvl].step == step
            t += 1


def test_instance_window_evaluated_once_at_step_k():
    cfg = MonitorConfig(k_inst=4)
    tracker = FeatureTracker(cfg, 12)
    inst = []
    for f in _frames(10):
        inst += [ev for ev in tracker.update(f) if ev.level is Level.INST]
    assert len(inst) == 1
    assert inst[0].step == 4 and inst[0].length == 20 and inst[0].t == 19


def test_channels_beyond_frame_are_rejected():
    cfg = MonitorConfig(channels={"intra": (0, 20)})
    with pytest.raises(ConfigError):
        FeatureTracker(cfg, 12)


# ---------------------------------------------------------------------------
# event emission
# ---------------------------------------------------------------------------


def test_no_event_below_threshold():
    models = {lvl: _constant_model(lvl, -5.0) for lvl in Level}
    result = replay(_frames(20), MonitorConfig(), models)
    assert result.events == []


def test_refractory_span_suppresses_retrigger():
    models = {Level.INTRA: _constant_model(Level.INTRA, 5.0)}
    cfg = MonitorConfig(k_intra=2)
    result = replay(_frames(20), cfg, models)
    steps = [e.step for e in result.events]
    # first evaluation at token 1 of step 0, then muted for 2k = 4 steps; the
    # closing separator of the 20th step already counts 20 completed steps
    assert steps == [0, 4, 8, 12, 16, 20]
    assert all(e.payload == "<INTRA>" for e in result.events)


def test_instance_fires_once_with_nothinking_payload():
    models = {Level.INST: _constant_model(Level.INST, 5.0)}
    result = replay(_frames(20), MonitorConfig(k_inst=4), models)
    assert len(result.events) == 1
    ev = result.events[0]
    assert ev.step == 4 and ev.payload == "Okay, I have finished thinking."
    assert decode_constraint(ev).at == ev.t + 1


def test_instance_level_wins_ties():
    models = {lvl: _constant_model(lvl, 5.0) for lvl in Level}
    cfg = MonitorConfig(k_inst=2, refractory={"intra": 100, "inter": 100})
    result = replay(_frames(6), cfg, models)
    at_k = [e for e in result.events if e.t == 9]
    assert len(at_k) == 1 and at_k[0].level is Level.INST


def test_out_of_order_frames_are_protocol_errors():
    mon = Monitor(MonitorConfig(), {})
    mon.on_frame(ActivationFrame(0, 3, np.ones(12)))
    with pytest.raises(ProtocolError):
        mon.on_frame(ActivationFrame(0, 3, np.ones(12)))
    mon.finish()
    with pytest.raises(ProtocolError):
        mon.on_frame(ActivationFrame(0, 9, np.ones(12)))


# ---------------------------------------------------------------------------
# trained detectors on simulated traces
# ---------------------------------------------------------------------------


def test_clean_trace_raises_no_events(detectors):
    for seed in (500, 501, 502):
        trace = generate(SimSpec(seed=seed, instance="hard"))
        result = replay(trace.frames(), detectors.config, detectors.models)
        assert result.events == []


def test_single_inter_event_detected_once(detectors):
    spec = SimSpec(seed=77, injections=[Injection(Level.INTER, 14, 3)], instance="hard")
    trace = generate(spec)
    result = replay(trace.frames(), detectors.config, detectors.models)
    inter = [e for e in result.events if e.level is Level.INTER]
    assert len(inter) == 1
    span = trace.events[0]
    step = trace.step_of_token[inter[0].t]
    assert span.start_step <= step <= span.end_step + detectors.config.k_inter
    assert [e for e in result.events if e.level is not Level.INTER] == []


def test_easy_instance_switches_off_thinking(detectors):
    trace = generate(SimSpec(seed=78, instance="easy"))
    result = replay(trace.frames(), detectors.config, detectors.models)
    inst = [e for e in result.events if e.level is Level.INST]
    assert len(inst) == 1
    assert inst[0].step == detectors.config.k_inst
    assert inst[0].payload == "Okay, I have finished thinking."


def test_replay_is_deterministic_and_matches_streaming(detectors, tmp_path):
    spec = SimSpec(seed=79, injections=[Injection(Level.INTRA, 10), Injection(Level.INTER, 20, 3)],
                   instance="easy")
    trace = generate(spec)
    path = tmp_path / "t.bin"
    write_trace(path, trace.frames())
    a = replay(path, detectors.config, detectors.models, dump_features=True)
    b = replay(path, detectors.config, detectors.models, dump_features=True)
    assert a.event_records() == b.event_records()
    assert np.array_equal(a.features, b.features, equal_nan=True)
    live = Monitor(detectors.config, detectors.models)
    for frame in trace.frames():
        live.on_frame(frame)
    assert [e.to_record() for e in live.events] == a.event_records()
    # one dump row per evaluated window
    assert a.features.shape == (a.n_evaluations, len(FEATURE_DUMP_COLUMNS))
    assert len(a.events) >= 2


def test_event_log_roundtrip(tmp_path):
    records = [InterventionEvent(0, 5, 1, Level.INTER, 0.75, "<INTER>", 2).to_record()]
    write_event_log(tmp_path / "log.jsonl", records)
    assert read_event_log(tmp_path / "log.jsonl") == records


def test_socket_session_delivers_directives(detectors):
    spec = SimSpec(seed=80, injections=[Injection(Level.INTER, 12, 3)], instance="hard")
    trace = generate(spec)
    log = []
    server = serve_socket(("127.0.0.1", 0), lambda: MonitorSession(detectors.config, detectors.models, log))
    try:
        session = connect_stream(server.address)
        for frame in trace.frames():
            session.send(frame)
        summary = session.end()
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.stop()
    offline = replay(trace.frames(), detectors.config, detectors.models)
    assert [d["at"] for d in session.directives] == [e.t + 1 for e in offline.events]
    assert summary["events"] == len(offline.events) == len(log)
    assert session.directives[0]["force"] == "<INTER>"


def test_models_for_other_probe_sets_are_refused(detectors):
    from neuromon.errors import ProbeMismatchError
    from neuromon.spectral import ProbeSet

    cfg = monitor_config_for(SimSpec(), probes=ProbeSet.uniform(8))
    with pytest.raises(ProbeMismatchError):
        Monitor(cfg, detectors.models)
