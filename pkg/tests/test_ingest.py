import threading

import numpy as np
import pytest

from neuromon.errors import ProtocolError, TraceFormatError
from neuromon.ingest import (
    ActivationFrame,
    EndOfStream,
    StepSplitter,
    connect_stream,
    decode_record,
    derive_step_flags,
    encode_end,
    encode_frame,
    frame_from_json,
    frame_to_json,
    read_trace,
    serve_socket,
    write_trace,
)


def _frames(n, channels=4, seed=0, stream=7):
    rng = np.random.default_rng(seed)
    return [
        ActivationFrame(stream, t, rng.standard_normal(channels), separator=(t % 10 == 9),
                        text="tok" if t % 3 == 0 else None)
        for t in range(n)
    ]


@pytest.mark.parametrize("fmt,suffix", [("binary", ".bin"), ("text", ".jsonl")])
def test_roundtrip(tmp_path, fmt, suffix):
    frames = _frames(100)
    path = tmp_path / f"trace{suffix}"
    assert write_trace(path, frames) == 100
    back = list(read_trace(path))
    assert back == frames


def test_record_roundtrip_with_unicode_text():
    frame = ActivationFrame(1, 5, [1.5, -2.0], True, "é\n\n")
    record, used = decode_record(encode_frame(frame))
    assert record == frame
    assert used == len(encode_frame(frame))
    end, _ = decode_record(encode_end(1, 6))
    assert end == EndOfStream(1, 6)
    assert frame_from_json(frame_to_json(frame)) == frame


def test_truncation_reports_offset(tmp_path):
    frames = _frames(10, channels=3)
    path = tmp_path / "t.bin"
    write_trace(path, frames)
    data = path.read_bytes()
    record_size = len(encode_frame(frames[0]))
    offsets = np.cumsum([0] + [len(encode_frame(f)) for f in frames])
    cut = int(offsets[4]) + record_size // 2
    path.write_bytes(data[:cut])
    with pytest.raises(TraceFormatError) as info:
        list(read_trace(path))
    assert info.value.offset == offsets[4]


def test_missing_end_marker(tmp_path):
    frames = _frames(5)
    path = tmp_path / "t.bin"
    path.write_bytes(b"".join(encode_frame(f) for f in frames))
    with pytest.raises(TraceFormatError):
        list(read_trace(path))
    assert len(list(read_trace(path, require_end=False))) == 5


def test_mixed_channel_counts_rejected_at_first_offender(tmp_path):
    frames = _frames(6, channels=3)
    frames[4] = ActivationFrame(7, 4, [1.0, 2.0])
    path = tmp_path / "t.bin"
    write_trace(path, frames)
    offsets = np.cumsum([0] + [len(encode_frame(f)) for f in frames])
    seen = []
    with pytest.raises(TraceFormatError) as info:
        for f in read_trace(path):
            seen.append(f)
    assert len(seen) == 4
    assert info.value.offset == offsets[4]


def test_text_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "t.jsonl"
    write_trace(path, _frames(3))
    lines = path.read_text().splitlines(keepends=True)
    lines[1] = lines[1].replace('"t": 1', '"t": 0')
    path.write_text("".join(lines))
    with pytest.raises(TraceFormatError) as info:
        list(read_trace(path))
    assert info.value.offset == 2
    path.write_text('{"stream": 0, "t": 0, "values": [NaN]}\n')
    with pytest.raises(TraceFormatError):
        list(read_trace(path))


def test_failed_write_leaves_no_file(tmp_path):
    path = tmp_path / "t.bin"

    def frames():
        yield ActivationFrame(0, 0, [1.0])
        raise RuntimeError("producer crashed")

    with pytest.raises(RuntimeError):
        write_trace(path, frames())
    assert list(tmp_path.iterdir()) == []


def test_step_flags():
    assert derive_step_flags(["a", "\n\n", "b"]) == [False, True, False]
    assert derive_step_flags(["a\n", "\nb"]) == [False, True]
    assert derive_step_flags(["a", "b", "c\n"]) == [False, False, False]


def test_step_flags_agree_with_string_scan():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tokens = ["".join(rng.choice(["a", "\n", "b"], size=rng.integers(1, 4))) for _ in range(12)]
        flags = derive_step_flags(tokens)
        # oracle: non-overlapping "\n\n" matches in the concatenation, mapped to the token holding the second char
        text = "".join(tokens)
        ends = []
        i = 0
        while True:
            j = text.find("\n\n", i)
            if j < 0:
                break
            ends.append(j + 1)
            i = j + 2
        owner = np.repeat(np.arange(len(tokens)), [len(t) for t in tokens])
        want = [False] * len(tokens)
        for e in ends:
            want[owner[e]] = True
        assert flags == want


def test_splitter_state_persists():
    s = StepSplitter()
    assert not s.feed("x\n")
    assert s.feed("\n")
    assert not s.feed("\n")


class _Echo:
    """Session handler that records frames and asks for a directive at one token."""

    def __init__(self, store, directive_at=None):
        self.store = store
        self.directive_at = directive_at

    def on_frame(self, frame):
        self.store.setdefault("frames", []).append(frame.t)
        if frame.t == self.directive_at:
            return {"at": frame.t + 1, "force": "<X>"}
        return None

    def on_end(self):
        self.store["ended"] = True
        return {"frames": len(self.store["frames"])}

    def on_truncated(self):
        self.store["truncated"] = True


def test_loopback_ordering_and_directive():
    store = {}
    server = serve_socket(("127.0.0.1", 0), lambda: _Echo(store, directive_at=500))
    try:
        session = connect_stream(server.address, stream_id=3)
        got_at = None
        for t in range(2000):
            directives = session.send(ActivationFrame(3, t, [float(t)], separator=(t % 50 == 49)))
            if directives and got_at is None:
                got_at = t
        summary = session.end()
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.stop()
    assert store["frames"] == list(range(2000))
    assert store["ended"] and summary["frames"] == 2000
    # the answer to frame 500 arrives no later than the send of frame 502
    assert got_at is not None and got_at <= 502
    assert session.directives[0]["at"] == 501


def test_abrupt_disconnect_marks_truncation():
    store = {}
    server = serve_socket(("127.0.0.1", 0), lambda: _Echo(store))
    try:
        session = connect_stream(server.address)
        for t in range(20):
            session.send(ActivationFrame(0, t, [1.0]))
        session.close()
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.stop()
    assert store.get("truncated") and not store.get("ended")


def test_protocol_violation_is_reported_to_producer():
    store = {}
    server = serve_socket(("127.0.0.1", 0), lambda: _Echo(store))
    try:
        session = connect_stream(server.address, frame_budget=1)
        session.send(ActivationFrame(0, 5, [1.0]))
        with pytest.raises(ProtocolError):
            session.send(ActivationFrame(0, 4, [1.0]))
            session.drain()
        session.close()
        assert server.wait_sessions(1, timeout=10)
    finally:
        server.stop()
    assert store.get("truncated")


def test_concurrent_sessions_are_independent():
    stores = []
    lock = threading.Lock()

    def factory():
        s = {}
        with lock:
            stores.append(s)
        return _Echo(s)

    server = serve_socket(("127.0.0.1", 0), factory)
    try:
        def produce(stream):
            sess = connect_stream(server.address, stream_id=stream)
            for t in range(300):
                sess.send(ActivationFrame(stream, t, [float(stream)]))
            sess.end()

        threads = [threading.Thread(target=produce, args=(i,)) for i in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert server.wait_sessions(4, timeout=10)
    finally:
        server.stop()
    assert len(stores) == 4
    assert all(s["frames"] == list(range(300)) and s["ended"] for s in stores)
