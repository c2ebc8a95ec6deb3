"""Simulate, train, then monitor a live stream over a socket.

1. Generate labeled activation traces with injected failures.
2. Train one detector per failure level on windows cut from them.
3. Start a monitor server and stream a fresh trace into it, token by token,
   the way a decoding loop would. Directives come back as soon as a window
   looks like a failure.

    python3 demos/detect_end_to_end.py
"""
import time

from neuromon.classifier import default_train_config, evaluate, train
from neuromon.ingest import connect_stream, serve_socket
from neuromon.monitor import MonitorSession
from neuromon.sim import Injection, SimSpec, build_dataset, generate, monitor_config_for, random_specs
from neuromon.spectral import Level

start = time.perf_counter()
specs = random_specs(80, seed=1)
config = monitor_config_for(specs[0])
datasets = build_dataset(specs, config, seed=1)
models = {}
for level, d in datasets.items():
    models[level], _ = train(d.X_train, d.y_train, level, default_train_config(level),
                             probe_digest=config.probes.digest)
    acc, rec = evaluate(models[level], d.X_test, d.y_test)
    print(f"{level.value:>5}: {d.y_train.size} training windows, held-out accuracy {acc:.3f}, recall {rec:.3f}")
print(f"trained in {time.perf_counter() - start:.1f} s\n")

# An easy problem that also loops between steps 14 and 16 and slips once at step 24.
spec = SimSpec(seed=2024, instance="easy",
               injections=[Injection(Level.INTER, 14, 3), Injection(Level.INTRA, 24)])
trace = generate(spec)
for ev in trace.events:
    print(f"injected {ev.level.value:>5} failure: steps {ev.start_step}..{ev.end_step}")

log = []
server = serve_socket(("127.0.0.1", 0), lambda: MonitorSession(config, models, log))
with server:
    producer = connect_stream(server.address)
    for frame in trace.frames():
        for d in producer.send(frame):
            tau = d["at"] - 1
            print(f"  detection at token {tau:4d} (step {trace.step_of_token[tau]:2d}):"
                  f" force {d['force']!r} as token {d['at']}")
    summary = producer.end()
    server.wait_sessions(1, timeout=10)
print(f"\nstream closed after {summary['frames']} frames with {summary['events']} interventions")
