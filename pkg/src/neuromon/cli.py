"""``neuromon`` command line.

Every flag has a config-file twin: ``--k-intra`` on any subcommand maps to
key ``k_intra`` in section ``[detector]``, ``--out`` on ``train`` maps to
``out`` in ``[train]``, and so on (see ``neuromon <cmd> --help``). Values are
resolved as flag > environment > config file > built-in default, where the
environment variable is ``NEUROMON_<SECTION>_<KEY>`` in upper case, e.g.
``NEUROMON_DETECTOR_K_INTRA=8``.

Exit codes: 0 success, 2 invalid input or configuration, 3 training failure,
4 probe-set mismatch between a model and the monitor, 5 stream protocol
violation.
"""
from __future__ import annotations

import argparse
import configparser
import io
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .errors import (
    ConfigError, NeuromonError, ProbeMismatchError, ProtocolError, TraceFormatError, TrainingError,
    ValidationError,
)
from .spectral import Level, ProbeSet

log = logging.getLogger("neuromon")

EXIT_OK, EXIT_INPUT, EXIT_TRAINING, EXIT_PROBES, EXIT_PROTOCOL = 0, 2, 3, 4, 5
ENV_PREFIX = "NEUROMON_"


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    type: Callable | str  # a converter, or "flag" for booleans, or "list"
    default: object
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _level_or_all(value: str) -> str:
    if value != "all":
        Level(value)
    return value


def _int_list(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).replace(",", " ").split()]


def _channels(value) -> str:
    value = str(value).strip()
    if value != "all":
        _int_list(value)
    return value


DETECTOR = [
    Option("detector", "probes", int, 16, "number of probe frequencies, omega_k = pi k / P"),
    Option("detector", "k_intra", int, 4, "intra window length in steps"),
    Option("detector", "k_inter", int, 4, "inter window length in steps"),
    Option("detector", "k_inst", int, 4, "instance prefix length K in steps"),
    Option("detector", "threshold_intra", float, 0.5, "intra detector threshold"),
    Option("detector", "threshold_inter", float, 0.5, "inter detector threshold"),
    Option("detector", "threshold_inst", float, 0.5, "instance detector threshold"),
    Option("detector", "aggregation", str, "mean-features", "mean-features or max-probability"),
    Option("detector", "stride", int, 1, "evaluate token windows every STRIDE tokens"),
    Option("detector", "channels_intra", _channels, "0,1,2,3", "intra expert channel indices or 'all'"),
    Option("detector", "channels_inter", _channels, "4,5,6,7", "inter expert channel indices or 'all'"),
    Option("detector", "channels_inst", _channels, "8,9,10,11", "instance expert channel indices or 'all'"),
]

COMMANDS: dict[str, list[Option]] = {
    "simulate": [
        Option("simulate", "spec", str, "", "JSON simulation spec (omit for a random corpus)"),
        Option("simulate", "out", str, "", "trace path, or directory when --count > 1"),
        Option("simulate", "count", int, 1, "number of random traces when no spec is given"),
        Option("simulate", "seed", int, 0, "corpus seed for random traces"),
        Option("simulate", "format", str, "binary", "trace format: binary or text"),
    ],
    "features": DETECTOR + [
        Option("features", "trace", str, "", "trace to extract per-window features from"),
        Option("features", "out", str, "", "output: feature table (.tsv) or dataset (.npz)"),
        Option("features", "sim_traces", int, 0, "build a labeled dataset from this many simulated traces"),
        Option("features", "seed", int, 0, "corpus seed for simulated traces"),
        Option("features", "level", _level_or_all, "all", "level to extract: intra, inter, inst or all"),
    ],
    "train": DETECTOR + [
        Option("train", "level", _level_or_all, "all", "level to train: intra, inter, inst or all"),
        Option("train", "out", str, "", "model path; '{level}' is replaced by the level name"),
        Option("train", "dataset", str, "", "dataset .npz from 'features' (default: simulate)"),
        Option("train", "sim_traces", int, 200, "simulated traces when no dataset is given"),
        Option("train", "seed", int, 0, "corpus and split seed"),
        Option("train", "train_seed", int, 0, "initialization and batching seed"),
        Option("train", "epochs", int, 0, "epochs (0 = level default)"),
        Option("train", "batch_size", int, 0, "batch size (0 = level default)"),
        Option("train", "learning_rate", float, 5e-3, "AdamW learning rate"),
        Option("train", "weight_decay", float, 1e-2, "AdamW decoupled weight decay"),
        Option("train", "grad_check", "flag", False, "check gradients against finite differences"),
    ],
    "monitor": DETECTOR + [
        Option("monitor", "replay", str, "", "trace file to replay"),
        Option("monitor", "listen", str, "", "host:port to accept producer connections on"),
        Option("monitor", "model", "list", [], "detector model files (repeat or comma separate)"),
        Option("monitor", "events", str, "", "event log output (JSON lines)"),
        Option("monitor", "dump_features", str, "", "per-window feature table output"),
        Option("monitor", "sessions", int, 0, "in listen mode, exit after this many sessions (0 = run until interrupted)"),
        Option("monitor", "labels", str, "", "label sidecar (default: <trace>.labels.json if present)"),
    ],
    "bench": [
        Option("bench", "probes", int, 16, "number of probe frequencies"),
        Option("bench", "lengths", _int_list, [64, 256, 1024, 4096], "window lengths in tokens"),
        Option("bench", "channels", int, 32, "channel count for the length sweep"),
        Option("bench", "scaling_channels", int, 512, "channel count C for the C vs 2C scaling check (0 = skip)"),
        Option("bench", "tokens", int, 2000, "timed tokens per measurement"),
        Option("bench", "repeats", int, 3, "interleaved repeats per length"),
        Option("bench", "out", str, "", "JSON report output"),
    ],
    "select-mon": [
        Option("select_mon", "attributions", str, "", "attribution score file"),
        Option("select_mon", "format", str, "auto", "attribution format: auto, text or binary"),
        Option("select_mon", "k", int, 0, "top-k size per time step"),
        Option("select_mon", "level", str, "intra", "level the selection is for"),
        Option("select_mon", "columns", str, "", "time-step columns to intersect (default: all)"),
        Option("select_mon", "out", str, "", "output file, one neuron id per line"),
    ],
    "reconstruct": [
        Option("reconstruct", "input", str, "", "raw samples, JSON lines with input and output"),
        Option("reconstruct", "out", str, "", "corpus output (JSON lines); report goes to <out>.report.json"),
        Option("reconstruct", "rewriter", str, "rule", "rule or remote"),
        Option("reconstruct", "endpoint", str, "", "chat-completion URL for the remote rewriter"),
        Option("reconstruct", "remote_model", str, "rewriter", "model name sent to the remote rewriter"),
        Option("reconstruct", "token_env", str, "NEUROMON_REWRITER_TOKEN", "environment variable holding the bearer token"),
        Option("reconstruct", "retries", int, 2, "remote retries per step"),
        Option("reconstruct", "max_in_flight", int, 4, "concurrent remote requests"),
        Option("reconstruct", "policy", str, "middle", "critical step policy: middle, uniform or explicit"),
        Option("reconstruct", "steps", str, "", "explicit 1-based step indices for the explicit policy"),
        Option("reconstruct", "variants", int, 1, "perturbed variants per raw sample"),
        Option("reconstruct", "mix", str, "1:1", "intra:inter mix weights"),
        Option("reconstruct", "loop_paragraphs", int, 3, "loop paragraphs for inter rewrites (3, 4 or 5)"),
        Option("reconstruct", "seed", int, 0, "reconstruction seed"),
    ],
}


# ---------------------------------------------------------------------------
# configuration resolution
# ---------------------------------------------------------------------------


def _convert(option: Option, raw):
    try:
        if option.type == "flag":
            if isinstance(raw, bool):
                return raw
            value = str(raw).strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off", ""):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if option.type == "list":
            items = raw if isinstance(raw, (list, tuple)) else [raw]
            return [v for item in items for v in str(item).replace(",", " ").split()]
        return option.type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{option.section}] {option.key}: {exc}") from None


def load_config_file(path: str | os.PathLike | None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
    known: dict[str, set] = {}
    for options in COMMANDS.values():
        for opt in options:
            known.setdefault(opt.section, set()).add(opt.key)
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        extra = set(parser[section]) - known[section]
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(extra))}")
    return parser


def resolve(command: str, args: argparse.Namespace, config: configparser.ConfigParser,
            environ=os.environ) -> dict:
    """Merge flag, environment, config file and default values for ``command``."""
    values = {}
    for opt in COMMANDS[command]:
        raw = getattr(args, opt.key, None)
        if raw is None or raw == []:
            env = f"{ENV_PREFIX}{opt.section}_{opt.key}".upper()
            if env in environ:
                raw = environ[env]
            elif config.has_option(opt.section, opt.key):
                raw = config.get(opt.section, opt.key)
            else:
                raw = opt.default
        values[opt.key] = _convert(opt, raw)
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neuromon",
        description="Spectral failure-mode monitoring for reasoning traces.",
        epilog="Exit codes: 2 invalid input, 3 training failure, 4 probe mismatch, 5 protocol violation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI config file; sections per subcommand plus [detector]")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "simulate": "generate labeled synthetic traces",
        "features": "extract window features from a trace or build a labeled dataset",
        "train": "train level detectors",
        "monitor": "replay a trace or serve producers over a socket",
        "bench": "measure per-token update and feature cost",
        "select-mon": "select expert neurons from attribution scores",
        "reconstruct": "build a trigger-conditioned training corpus",
    }
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name].capitalize() + ".")
        for opt in options:
            text = f"{opt.help} [{opt.section}] {opt.key}, default {opt.default!r}"
            if opt.type == "flag":
                p.add_argument(opt.flag, dest=opt.key, action="store_const", const=True, default=None, help=text)
            elif opt.type == "list":
                p.add_argument(opt.flag, dest=opt.key, action="append", default=None, help=text)
            else:
                p.add_argument(opt.flag, dest=opt.key, default=None, help=text)
    return parser


def monitor_config(values: dict):
    from .monitor import MonitorConfig

    channels = {}
    for lvl in Level:
        spec = values[f"channels_{lvl.value}"]
        channels[lvl] = None if spec == "all" else _int_list(spec)
    return MonitorConfig(
        k_intra=values["k_intra"], k_inter=values["k_inter"], k_inst=values["k_inst"],
        thresholds={lvl: values[f"threshold_{lvl.value}"] for lvl in Level},
        aggregation=values["aggregation"], stride=values["stride"], channels=channels,
        probes=ProbeSet.uniform(values["probes"]),
    )


def _levels(value: str) -> list[Level]:
    return list(Level) if value == "all" else [Level(value)]


def _need(values: dict, *keys: str) -> None:
    for key in keys:
        if not values[key]:
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _sim_specs(n: int, seed: int, config):
    from .sim import DEFAULT_GROUPS, random_specs

    specs = random_specs(n, seed=seed, steps=max(32, 4 * max(config.k_intra, config.k_inter, config.k_inst)),
                         instance_steps=config.k_inst)
    for lvl in Level:
        if config.channels.get(lvl, DEFAULT_GROUPS[lvl]) != tuple(DEFAULT_GROUPS[lvl]):
            log.warning("%s expert channels differ from the simulator groups", lvl.value)
    return specs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(v: dict, out=sys.stdout) -> int:
    from .sim import SimSpec, generate, random_specs, write_labeled_trace

    _need(v, "out")
    if v["format"] not in ("binary", "text"):
        raise ConfigError("--format must be binary or text")
    if v["spec"]:
        try:
            data = json.loads(Path(v["spec"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read spec {v['spec']}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"spec {v['spec']} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
        specs = [SimSpec.from_dict(data)]
    else:
        specs = random_specs(v["count"], seed=v["seed"])
    # generate everything first so a bad spec leaves no files behind
    traces = [generate(spec) for spec in specs]
    if v["spec"] or v["count"] == 1:
        sidecar = write_labeled_trace(traces[0], v["out"], v["format"])
        print(f"wrote {v['out']} ({traces[0].n_tokens} tokens) and {sidecar}", file=out)
        return EXIT_OK
    outdir = Path(v["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    suffix = ".jsonl" if v["format"] == "text" else ".bin"
    for i, trace in enumerate(traces):
        write_labeled_trace(trace, outdir / f"trace_{i:04d}{suffix}", v["format"])
    print(f"wrote {len(traces)} traces to {outdir}", file=out)
    return EXIT_OK


def _feature_table(rows: np.ndarray, columns) -> bytes:
    lines = ["\t".join(columns)]
    lines += ["\t".join(repr(float(x)) for x in row) for row in rows]
    return ("\n".join(lines) + "\n").encode()


def cmd_features(v: dict, out=sys.stdout) -> int:
    from .classifier import atomic_write_bytes
    from .ingest import read_trace
    from .monitor import FeatureTracker, _LEVEL_CODE
    from .sim import build_dataset

    _need(v, "out")
    config = monitor_config(v)
    levels = _levels(v["level"])
    if v["sim_traces"]:
        datasets = build_dataset(_sim_specs(v["sim_traces"], v["seed"], config), config, seed=v["seed"])
        arrays = {}
        for lvl in levels:
            d = datasets[lvl]
            for name in ("X_train", "y_train", "X_test", "y_test"):
                arrays[f"{lvl.value}_{name}"] = getattr(d, name)
        arrays["probe_digest"] = np.array(config.probes.digest)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        atomic_write_bytes(v["out"], buf.getvalue())
        sizes = ", ".join(f"{lvl.value} {datasets[lvl].y_train.size}+{datasets[lvl].y_test.size}" for lvl in levels)
        print(f"wrote dataset {v['out']} (train+test rows: {sizes})", file=out)
        return EXIT_OK
    _need(v, "trace")
    tracker = None
    rows = []
    for frame in read_trace(v["trace"]):
        tracker = tracker or FeatureTracker(config, frame.n_channels)
        for ev in tracker.update(frame):
            if ev.level not in levels:
                continue
            feats = ev.features.mean(axis=0)
            rows.append([ev.t, ev.step, _LEVEL_CODE[ev.level], ev.length, *feats, *[np.nan] * (3 - feats.size)])
    table = np.array(rows, dtype=np.float64).reshape(-1, 7)
    atomic_write_bytes(v["out"], _feature_table(table, ("t", "step", "level", "length", "f0", "f1", "f2")))
    print(f"wrote {len(table)} window rows to {v['out']}", file=out)
    return EXIT_OK


def _load_dataset(path: str, level: Level, digest: str):
    try:
        with np.load(path) as data:
            if "probe_digest" in data and str(data["probe_digest"]) != digest:
                raise ProbeMismatchError(f"dataset {path} was built with probe set {data['probe_digest']}, "
                                         f"config uses {digest}")
            return tuple(data[f"{level.value}_{k}"] for k in ("X_train", "y_train", "X_test", "y_test"))
    except KeyError:
        raise ValidationError(f"dataset {path} has no arrays for level {level.value}") from None
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read dataset {path}: {exc}") from None


def cmd_train(v: dict, out=sys.stdout) -> int:
    from .classifier import atomic_write_bytes, default_train_config, evaluate, grad_check, save_model, train
    from .sim import build_dataset

    _need(v, "out")
    config = monitor_config(v)
    levels = _levels(v["level"])
    if len(levels) > 1 and "{level}" not in v["out"]:
        raise ConfigError("--out must contain '{level}' when training several levels")
    datasets = None
    if not v["dataset"]:
        datasets = build_dataset(_sim_specs(v["sim_traces"], v["seed"], config), config, seed=v["seed"])
    overrides = {"seed": v["train_seed"], "learning_rate": v["learning_rate"], "weight_decay": v["weight_decay"]}
    if v["epochs"]:
        overrides["epochs"] = v["epochs"]
    if v["batch_size"]:
        overrides["batch_size"] = v["batch_size"]
    status = EXIT_OK
    for lvl in levels:
        if datasets is not None:
            d = datasets[lvl]
            X_tr, y_tr, X_te, y_te = d.X_train, d.y_train, d.X_test, d.y_test
        else:
            X_tr, y_tr, X_te, y_te = _load_dataset(v["dataset"], lvl, config.probes.digest)
        model, report = train(X_tr, y_tr, lvl, default_train_config(lvl, **overrides),
                              probe_digest=config.probes.digest)
        accuracy, recall = evaluate(model, X_te, y_te)
        path = v["out"].replace("{level}", lvl.value)
        save_model(model, path)
        metrics = {"level": lvl.value, "accuracy": accuracy, "recall": recall,
                   "train_rows": int(y_tr.size), "test_rows": int(y_te.size), "final_loss": report.losses[-1]}
        line = f"{lvl.value}: accuracy={accuracy:.4f} recall={recall:.4f} train_rows={y_tr.size} test_rows={y_te.size}"
        if v["grad_check"]:
            rng = np.random.default_rng(v["train_seed"])
            idx = rng.choice(y_tr.size, size=min(64, y_tr.size), replace=False)
            err = grad_check(model, X_tr[idx], y_tr[idx])
            metrics["grad_check_max_rel_error"] = err
            line += f" grad_check={err:.2e}"
            if err > 1e-4:
                log.error("%s gradient check failed: max relative error %.3e", lvl.value, err)
                status = EXIT_TRAINING
        atomic_write_bytes(path + ".metrics.json", (json.dumps(metrics, indent=2) + "\n").encode())
        print(line, file=out)
    return status


def _load_models(paths: list[str], config) -> dict:
    from .classifier import load_model

    models = {}
    for path in paths:
        try:
            model = load_model(path, expected_probe_digest=config.probes.digest)
        except OSError as exc:
            raise ConfigError(f"cannot read model {path}: {exc.strerror}") from None
        if model.level in models:
            raise ConfigError(f"two models given for level {model.level.value}")
        models[model.level] = model
    if not models:
        raise ConfigError("at least one --model is required")
    return models


def _summary(events, n_frames: int, score=None) -> list[str]:
    counts = {lvl: sum(1 for e in events if Level(e.level) is lvl) for lvl in Level}
    lines = [f"frames: {n_frames}  events: {len(events)} "
             + " ".join(f"{lvl.value}={counts[lvl]}" for lvl in Level)]
    if score is not None:
        for lvl in Level:
            lines.append(f"{lvl.value}: precision={score.precision(lvl):.3f} recall={score.recall(lvl):.3f} "
                         f"(detected {score.detected[lvl]}/{score.injected[lvl]}, false {score.false_events[lvl]})")
        lines.append(f"false events per 100 clean steps: {score.false_per_100_clean_steps():.3f}")
    return lines


def cmd_monitor(v: dict, out=sys.stdout) -> int:
    from .classifier import atomic_write_bytes
    from .ingest import read_trace, serve_socket
    from .monitor import FEATURE_DUMP_COLUMNS, MonitorSession, replay, write_event_log
    from .sim import read_sidecar, score_events, sidecar_path, trace_from_sidecar

    config = monitor_config(v)
    if bool(v["replay"]) == bool(v["listen"]):
        raise ConfigError("give exactly one of --replay or --listen")
    models = _load_models(v["model"], config)
    if v["replay"]:
        frames = list(read_trace(v["replay"]))
        result = replay(frames, config, models, dump_features=bool(v["dump_features"]))
        score = None
        labels = v["labels"] or (str(sidecar_path(v["replay"])) if sidecar_path(v["replay"]).exists() else "")
        if labels:
            trace = trace_from_sidecar(read_sidecar(labels), frames)
            score = score_events(trace, result.events, config)
        if v["events"]:
            write_event_log(v["events"], result.event_records())
        if v["dump_features"]:
            atomic_write_bytes(v["dump_features"], _feature_table(result.features, FEATURE_DUMP_COLUMNS))
        for line in _summary(result.events, result.n_frames, score):
            print(line, file=out)
        return EXIT_OK

    records: list[dict] = []

    class _Logged(MonitorSession):
        def __init__(self):
            super().__init__(config, models, log=records)

    server = serve_socket(v["listen"], _Logged)
    host, port = server.address
    print(f"listening on {host}:{port}", file=out, flush=True)
    stop = threading.Event()
    previous = signal.signal(signal.SIGTERM, lambda *_: stop.set()) \
        if threading.current_thread() is threading.main_thread() else None
    try:
        done = 0
        while not stop.is_set() and (v["sessions"] == 0 or done < v["sessions"]):
            if server.wait_sessions(1, timeout=0.2):
                done += 1
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    # the server has stopped, so no handler thread appends to records any more
    if v["events"]:
        write_event_log(v["events"], records)
    n_events = sum(1 for r in records if "level" in r)
    n_trunc = sum(1 for r in records if r.get("kind") == "truncated")
    print(f"sessions: {done}  events: {n_events}  truncated streams: {n_trunc}", file=out)
    return EXIT_OK


def cmd_bench(v: dict, out=sys.stdout) -> int:
    from .bench import run_bench, time_per_token
    from .classifier import atomic_write_bytes

    probes = ProbeSet.uniform(v["probes"])
    result = run_bench(v["lengths"], v["channels"], v["tokens"], v["repeats"], probes)
    report = result.to_dict()
    for w in result.lengths:
        print(f"W={w:5d}  {1e6 * result.median_seconds[w]:9.2f} us/token", file=out)
    print(f"ratio W={max(result.lengths)} / W={min(result.lengths)}: {result.ratio():.3f}", file=out)
    c = v["scaling_channels"]
    if c:
        w = min(result.lengths)
        base = np.median([time_per_token(w, c, v["tokens"], probes=probes, seed=r) for r in range(v["repeats"])])
        double = np.median([time_per_token(w, 2 * c, v["tokens"], probes=probes, seed=r) for r in range(v["repeats"])])
        report["channel_scaling"] = {"channels": c, "ratio_2c_to_c": float(double / base)}
        print(f"channels {c} -> {2 * c}: cost ratio {double / base:.3f}", file=out)
    if v["out"]:
        atomic_write_bytes(v["out"], (json.dumps(report, indent=2) + "\n").encode())
    return EXIT_OK


def cmd_select_mon(v: dict, out=sys.stdout) -> int:
    from .classifier import atomic_write_bytes
    from .mon import load_attributions, select_mon

    _need(v, "attributions", "k")
    fmt = None if v["format"] == "auto" else v["format"]
    try:
        matrix = load_attributions(v["attributions"], fmt)
    except OSError as exc:
        raise ConfigError(f"cannot read {v['attributions']}: {exc.strerror}") from None
    columns = _int_list(v["columns"]) if v["columns"] else None
    if columns is not None and (min(columns) < 0 or max(columns) >= matrix.shape[1]):
        raise ValidationError(f"columns must lie in 0..{matrix.shape[1] - 1}")
    selection = select_mon(matrix, v["k"], v["level"], columns)
    names = selection.sorted_names()
    text = "".join(n + "\n" for n in names)
    if v["out"]:
        atomic_write_bytes(v["out"], text.encode("utf-8"))
    else:
        out.write(text)
    if selection.empty_warning:
        print(f"warning: empty expert set for {selection.level.value} at k={selection.k}", file=sys.stderr)
    print(f"{selection.level.value}: {len(names)} neurons selected at k={selection.k}", file=sys.stderr)
    return EXIT_OK


def cmd_reconstruct(v: dict, out=sys.stdout) -> int:
    from .reconstruct import (
        ReconstructConfig, RemoteRewriter, RuleRewriter, emit_corpus, read_raw_samples,
        reconstruct_corpus, report_path,
    )

    _need(v, "input", "out")
    if v["rewriter"] == "rule":
        rewriter = RuleRewriter(loop_paragraphs=v["loop_paragraphs"])
    elif v["rewriter"] == "remote":
        if not v["endpoint"]:
            raise ConfigError("remote rewriter needs an endpoint: pass --endpoint or set [reconstruct] endpoint")
        rewriter = RemoteRewriter(v["endpoint"], model=v["remote_model"], token_env=v["token_env"],
                                  retries=v["retries"], max_in_flight=v["max_in_flight"],
                                  loop_paragraphs=v["loop_paragraphs"])
    else:
        raise ConfigError("--rewriter must be rule or remote")
    try:
        mix = tuple(float(x) for x in v["mix"].split(":"))
    except ValueError:
        raise ConfigError(f"--mix must look like 1:1, got {v['mix']!r}") from None
    explicit = tuple(_int_list(v["steps"])) if v["steps"] else None
    config = ReconstructConfig(policy=v["policy"], variants=v["variants"], mix=mix, seed=v["seed"],
                               explicit=explicit)
    try:
        samples = read_raw_samples(v["input"])
    except OSError as exc:
        raise ConfigError(f"cannot read {v['input']}: {exc.strerror}") from None
    corpus, report = reconstruct_corpus(samples, rewriter, config)
    if not corpus:
        raise ValidationError(f"no sample could be reconstructed (skipped: {dict(report.skipped)})")
    emit_corpus(corpus, v["out"], report)
    counts = ", ".join(f"{k}={n}" for k, n in sorted(report.per_level.items()))
    skipped = ", ".join(f"{k}={n}" for k, n in sorted(report.skipped.items())) or "none"
    print(f"wrote {len(corpus)} samples ({counts}) to {v['out']}; skipped: {skipped}", file=out)
    print(f"report: {report_path(v['out'])}", file=out)
    if not report.deterministic:
        print("note: remote rewriting is not deterministic", file=out)
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate, "features": cmd_features, "train": cmd_train, "monitor": cmd_monitor,
    "bench": cmd_bench, "select-mon": cmd_select_mon, "reconstruct": cmd_reconstruct,
}


def exit_code(exc: BaseException, command: str) -> int:
    if isinstance(exc, ProbeMismatchError):
        return EXIT_PROBES
    if isinstance(exc, ProtocolError) or (command == "monitor" and isinstance(exc, TraceFormatError)):
        return EXIT_PROTOCOL
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_INPUT


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args, load_config_file(args.config))
        return HANDLERS[args.command](values, out)
    except (NeuromonError, ValueError, OSError) as exc:
        # ValidationError and friends are ValueErrors too; anything else is a bug and propagates
        print(f"neuromon {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc, args.command)


if __name__ == "__main__":
    sys.exit(main())
