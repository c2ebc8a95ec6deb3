import io
import json
import threading

import numpy as np
import pytest

from neuromon import cli
from neuromon.classifier import evaluate, load_model, save_model
from neuromon.ingest import ActivationFrame, connect_stream, encode_end, encode_frame, write_trace
from neuromon.mon import AttributionMatrix, save_attributions
from neuromon.reconstruct import read_corpus, synthetic_samples
from neuromon.sim import Injection, SimSpec, generate, write_labeled_trace
from neuromon.spectral import Level


def run(*argv):
    out = io.StringIO()
    code = cli.main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def model_files(detectors, tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    paths = []
    for level, model in detectors.models.items():
        path = root / f"{level.value}.bin"
        save_model(model, path)
        paths.append(str(path))
    return paths


# ---------------------------------------------------------------------------
# flags, config and environment
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("command", list(cli.COMMANDS))
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit):
        cli.main([command, "--help"])
    text = capsys.readouterr().out
    for opt in cli.COMMANDS[command]:
        assert opt.flag in text


def test_config_keys_and_flags_are_bijective():
    for command, options in cli.COMMANDS.items():
        flags = [o.flag for o in options]
        keys = [(o.section, o.key) for o in options]
        assert len(set(flags)) == len(flags) == len(set(keys))
        assert all(o.flag == "--" + o.key.replace("_", "-") for o in options)
    # every key is accepted by the config loader
    lines = []
    sections = {}
    for options in cli.COMMANDS.values():
        for o in options:
            sections.setdefault(o.section, {})[o.key] = o.default
    for section, keys in sections.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v if not isinstance(v, list) else ','.join(map(str, v))}" for k, v in keys.items()]
    cfg = cli.load_config_file(None)
    cfg.read_string("\n".join(lines))
    assert set(cfg.sections()) == set(sections)


def test_unknown_config_key_is_rejected(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[detector]\nk_intra = 4\nwindow = 3\n")
    code, _ = run("--config", path, "bench")
    assert code == 2


def test_resolution_order(tmp_path, monkeypatch):
    path = tmp_path / "c.ini"
    path.write_text("[detector]\nk_intra = 8\nk_inter = 8\n")
    cfg = cli.load_config_file(path)
    parser = cli.build_parser()
    args = parser.parse_args(["features", "--k-inter", "2"])
    values = cli.resolve("features", args, cfg, environ={"NEUROMON_DETECTOR_K_INTRA": "2",
                                                          "NEUROMON_DETECTOR_K_INST": "8"})
    assert values["k_intra"] == 2  # env beats config file
    assert values["k_inter"] == 2  # flag beats config file
    assert values["k_inst"] == 8  # env beats default
    assert values["stride"] == 1


def test_invalid_window_length_is_rejected(tmp_path):
    code, _ = run("features", "--k-intra", "3", "--sim-traces", "2", "--out", tmp_path / "x.npz")
    assert code == 2
    assert not (tmp_path / "x.npz").exists()


# ---------------------------------------------------------------------------
# simulate and features
# ---------------------------------------------------------------------------


def test_simulate_writes_trace_and_sidecar(tmp_path):
    spec = SimSpec(seed=4, injections=[Injection(Level.INTER, 8, 3)], instance="easy")
    (tmp_path / "spec.json").write_text(json.dumps(spec.to_dict()))
    code, text = run("simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "a.bin")
    assert code == 0
    assert (tmp_path / "a.bin.labels.json").exists()
    run("simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_bad_spec_leaves_no_files(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"steps": 10, "injections": [{"level": "intra", "onset": 50}]}))
    code, _ = run("simulate", "--spec", tmp_path / "spec.json", "--out", tmp_path / "out" / "t.bin")
    assert code == 2
    assert not (tmp_path / "out").exists()
    (tmp_path / "broken.json").write_text("{")
    assert run("simulate", "--spec", tmp_path / "broken.json", "--out", tmp_path / "t.bin")[0] == 2


def test_simulate_random_corpus(tmp_path):
    code, _ = run("simulate", "--count", 3, "--seed", 2, "--format", "text", "--out", tmp_path / "corpus")
    assert code == 0
    assert len(list((tmp_path / "corpus").glob("*.jsonl"))) == 3


def test_feature_table_and_dataset(tmp_path):
    trace = generate(SimSpec(seed=1))
    write_trace(tmp_path / "t.bin", trace.frames())
    code, _ = run("features", "--trace", tmp_path / "t.bin", "--out", tmp_path / "f.tsv", "--level", "inter")
    assert code == 0
    rows = (tmp_path / "f.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["t", "step", "level", "length", "f0", "f1", "f2"]
    assert len(rows) - 1 == trace.n_tokens - 1  # every token after the first
    code, _ = run("features", "--sim-traces", 6, "--out", tmp_path / "d.npz")
    assert code == 0
    with np.load(tmp_path / "d.npz") as data:
        assert data["intra_X_train"].shape[1] == 3


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_small_pipeline(tmp_path):
    out = tmp_path / "m_{level}.bin"
    code, text = run("train", "--sim-traces", 20, "--epochs", 2, "--out", out, "--grad-check")
    assert code == 0
    for level in Level:
        assert f"{level.value}: accuracy=" in text
        metrics = json.loads((tmp_path / f"m_{level.value}.bin.metrics.json").read_text())
        assert metrics["grad_check_max_rel_error"] <= 1e-4
        model = load_model(tmp_path / f"m_{level.value}.bin")
        assert model.level is level
    assert "grad_check=" in text


def test_train_from_dataset_is_reproducible(tmp_path):
    assert run("features", "--sim-traces", 10, "--out", tmp_path / "d.npz")[0] == 0
    args = ("train", "--dataset", tmp_path / "d.npz", "--level", "intra", "--epochs", 3)
    code1, text1 = run(*args, "--out", tmp_path / "a.bin")
    code2, text2 = run(*args, "--out", tmp_path / "b.bin")
    assert code1 == code2 == 0 and text1 == text2
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    # reloading the model reproduces the reported metrics
    metrics = json.loads((tmp_path / "a.bin.metrics.json").read_text())
    with np.load(tmp_path / "d.npz") as data:
        acc, rec = evaluate(load_model(tmp_path / "a.bin"), data["intra_X_test"], data["intra_y_test"])
    assert (acc, rec) == (metrics["accuracy"], metrics["recall"])


def test_training_failure_exit_code(tmp_path):
    X = np.random.default_rng(0).random((10, 3))
    np.savez(tmp_path / "one_class.npz", intra_X_train=X, intra_y_train=np.zeros(10),
             intra_X_test=X, intra_y_test=np.zeros(10))
    code, _ = run("train", "--dataset", tmp_path / "one_class.npz", "--level", "intra", "--out", tmp_path / "m.bin")
    assert code == 3
    assert not (tmp_path / "m.bin").exists()


def test_multi_level_output_needs_placeholder(tmp_path):
    assert run("train", "--out", tmp_path / "m.bin", "--sim-traces", 2)[0] == 2


# ---------------------------------------------------------------------------
# monitor
# ---------------------------------------------------------------------------


def test_replay_summary_with_labels(tmp_path, model_files):
    spec = SimSpec(seed=31, injections=[Injection(Level.INTRA, 10), Injection(Level.INTER, 20, 3)],
                   instance="easy")
    write_labeled_trace(generate(spec), tmp_path / "t.bin")
    code, text = run("monitor", "--replay", tmp_path / "t.bin", "--model", ",".join(model_files),
                     "--events", tmp_path / "ev.jsonl", "--dump-features", tmp_path / "dump.tsv")
    assert code == 0
    assert "intra: precision=" in text and "recall=" in text
    events = [json.loads(line) for line in (tmp_path / "ev.jsonl").read_text().splitlines()]
    assert {e["level"] for e in events} == {"intra", "inter", "inst"}
    dump = (tmp_path / "dump.tsv").read_text().splitlines()
    assert dump[0].split("\t")[:5] == ["t", "step", "level", "length", "probability"]
    # two token levels on every token after the first, plus one instance window
    n = generate(spec).n_tokens
    assert len(dump) - 1 == 2 * (n - 1) + 1


def test_probe_mismatch_exit_code(tmp_path, model_files):
    write_trace(tmp_path / "t.bin", generate(SimSpec(seed=1)).frames())
    code, _ = run("monitor", "--replay", tmp_path / "t.bin", "--model", model_files[0], "--probes", 8)
    assert code == 4


def test_protocol_violation_exit_code(tmp_path, model_files):
    frames = [ActivationFrame(0, t, np.ones(12)) for t in (0, 1, 1)]
    path = tmp_path / "bad.bin"
    with open(path, "wb") as fh:
        for f in frames:
            fh.write(encode_frame(f))
        fh.write(encode_end(0, 3))
    code, _ = run("monitor", "--replay", path, "--model", model_files[0])
    assert code == 5


def test_monitor_needs_a_mode(model_files):
    assert run("monitor", "--model", model_files[0])[0] == 2
    assert run("monitor", "--replay", "x", "--listen", "127.0.0.1:0", "--model", model_files[0])[0] == 2


class _Lines(io.StringIO):
    def __init__(self):
        super().__init__()
        self.ready = threading.Event()

    def write(self, s):
        n = super().write(s)
        if "listening on" in self.getvalue():
            self.ready.set()
        return n


def test_listen_mode_delivers_directives(tmp_path, model_files):
    out = _Lines()
    result = {}
    events = tmp_path / "ev.jsonl"
    argv = ["monitor", "--listen", "127.0.0.1:0", "--sessions", "1", "--events", str(events),
            "--model", ",".join(model_files)]
    thread = threading.Thread(target=lambda: result.setdefault("code", cli.main(argv, out)))
    thread.start()
    assert out.ready.wait(10)
    port = int(out.getvalue().split("listening on ")[1].split()[0].rsplit(":", 1)[1])
    trace = generate(SimSpec(seed=33, injections=[Injection(Level.INTER, 12, 3)], instance="hard"))
    session = connect_stream(("127.0.0.1", port))
    for frame in trace.frames():
        session.send(frame)
    session.end()
    thread.join(10)
    assert result["code"] == 0
    assert session.directives and session.directives[0]["force"] == "<INTER>"
    assert "sessions: 1" in out.getvalue()
    assert len(events.read_text().splitlines()) == len(session.directives)


# ---------------------------------------------------------------------------
# bench, select-mon, reconstruct
# ---------------------------------------------------------------------------


def test_bench_report(tmp_path):
    code, text = run("bench", "--tokens", 200, "--repeats", 1, "--scaling-channels", 0,
                     "--out", tmp_path / "b.json")
    assert code == 0
    report = json.loads((tmp_path / "b.json").read_text())
    assert set(report["median_us_per_token"]) == {"64", "256", "1024", "4096"}
    assert "ratio W=4096 / W=64" in text


def test_bench_channel_scaling(tmp_path):
    code, _ = run("bench", "--lengths", "256", "--tokens", 400, "--repeats", 3, "--scaling-channels", 512,
                  "--out", tmp_path / "b.json")
    assert code == 0
    ratio = json.loads((tmp_path / "b.json").read_text())["channel_scaling"]["ratio_2c_to_c"]
    # doubling the channel count roughly doubles the cost, within a factor of 1.5
    assert 2 / 1.5 <= ratio <= 2 * 1.5


def test_select_mon(tmp_path):
    m = AttributionMatrix.from_names(["n1", "n2", "n3"], [[5, 1], [3, 4], [2, 2]])
    save_attributions(m, tmp_path / "a.tsv")
    code, text = run("select-mon", "--attributions", tmp_path / "a.tsv", "--k", 2)
    assert code == 0 and text == "n2\n"
    code, text = run("select-mon", "--attributions", tmp_path / "a.tsv", "--k", 3, "--out", tmp_path / "s.txt")
    assert (tmp_path / "s.txt").read_text().split() == ["n1", "n2", "n3"]
    assert run("select-mon", "--attributions", tmp_path / "a.tsv", "--k", 4)[0] == 2
    assert run("select-mon", "--attributions", tmp_path / "missing.tsv", "--k", 1)[0] == 2


def _raw_samples(path, n=30):
    lines = [json.dumps({"id": s.sample_id, "input": s.input, "output": s.output})
             for s in synthetic_samples(n, seed=3)]
    path.write_text("\n".join(lines) + "\n")


def test_reconstruct_matches_golden_corpus(tmp_path):
    from pathlib import Path

    _raw_samples(tmp_path / "raw.jsonl", n=8)
    code, text = run("reconstruct", "--input", tmp_path / "raw.jsonl", "--out", tmp_path / "c.jsonl", "--seed", 1)
    assert code == 0
    golden = Path(__file__).parent / "fixtures" / "rule_corpus_golden.jsonl"
    assert (tmp_path / "c.jsonl").read_bytes() == golden.read_bytes()
    assert len(read_corpus(tmp_path / "c.jsonl")) == 8
    assert (tmp_path / "c.jsonl.report.json").exists()


def test_reconstruct_remote_without_endpoint(tmp_path, capsys):
    _raw_samples(tmp_path / "raw.jsonl")
    code, _ = run("reconstruct", "--input", tmp_path / "raw.jsonl", "--out", tmp_path / "c.jsonl",
                  "--rewriter", "remote")
    assert code == 2
    assert "endpoint" in capsys.readouterr().err
    assert not (tmp_path / "c.jsonl").exists()
