"""Activation-frame file/wire formats and frame sources.

Binary frame record (little-endian)::

    magic   4s   b"NRMN"
    version u16  1
    stream  u64
    t       u64  token index, strictly increasing per stream
    flags   u8   bit0 step separator, bit1 text present, bit2 end of stream
    n       u32  channel count
    values  f64 * n
    [text_len u32, text utf-8]   only when bit1 is set

A stream ends with an end-of-stream sentinel record (bit2 set, n = 0,
t = number of frames sent). The text variant stores one JSON object per
line with the same fields.

On a socket every message is ``u32 length`` + payload. Producer-to-monitor
payloads are binary frame records; monitor-to-producer payloads are UTF-8
JSON objects (``ack``, ``directive``, ``end`` or ``error``). The monitor
answers every frame with exactly one message.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Protocol

import numpy as np

from .errors import ProtocolError, TraceFormatError

log = logging.getLogger(__name__)

FRAME_MAGIC = b"NRMN"
FRAME_VERSION = 1
FLAG_SEPARATOR = 0x01
FLAG_TEXT = 0x02
FLAG_END = 0x04
STEP_DELIMITER = "\n\n"
MAX_MESSAGE_SIZE = 16 * 1024 * 1024

_RECORD = struct.Struct("<4sHQQBI")
_U32 = struct.Struct("<I")


@dataclass(eq=False)
class ActivationFrame:
    stream_id: int
    t: int
    values: np.ndarray
    separator: bool = False
    text: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ActivationFrame):
            return NotImplemented
        return (
            self.stream_id == other.stream_id
            and self.t == other.t
            and self.separator == other.separator
            and self.text == other.text
            and self.values.astype("<f8").tobytes() == other.values.astype("<f8").tobytes()
        )

    def __repr__(self) -> str:
        return (
            f"ActivationFrame(stream_id={self.stream_id}, t={self.t}, "
            f"n_channels={self.n_channels}, separator={self.separator}, text={self.text!r})"
        )


@dataclass(frozen=True)
class EndOfStream:
    stream_id: int
    n_frames: int


# ---------------------------------------------------------------------------
# binary records
# ---------------------------------------------------------------------------


def encode_frame(frame: ActivationFrame) -> bytes:
    flags = FLAG_SEPARATOR if frame.separator else 0
    text = b""
    if frame.text is not None:
        flags |= FLAG_TEXT
        raw = frame.text.encode("utf-8")
        text = _U32.pack(len(raw)) + raw
    head = _RECORD.pack(FRAME_MAGIC, FRAME_VERSION, frame.stream_id, frame.t, flags, frame.n_channels)
    return head + frame.values.astype("<f8").tobytes() + text


def encode_end(stream_id: int, n_frames: int) -> bytes:
    return _RECORD.pack(FRAME_MAGIC, FRAME_VERSION, stream_id, n_frames, FLAG_END, 0)


def decode_record(data: bytes | memoryview, offset: int = 0) -> tuple[ActivationFrame | EndOfStream, int]:
    """Decode one record at ``offset``; returns the record and the next offset."""
    if len(data) - offset < _RECORD.size:
        raise TraceFormatError("truncated record header", offset)
    magic, version, stream, t, flags, n = _RECORD.unpack_from(data, offset)
    if magic != FRAME_MAGIC:
        raise TraceFormatError(f"bad record magic {bytes(magic)!r}", offset)
    if version != FRAME_VERSION:
        raise TraceFormatError(f"unsupported frame version {version}", offset)
    pos = offset + _RECORD.size
    if flags & FLAG_END:
        return EndOfStream(stream, t), pos
    if len(data) - pos < 8 * n:
        raise TraceFormatError("truncated record: channel values cut short", offset)
    values = np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64)
    pos += 8 * n
    text = None
    if flags & FLAG_TEXT:
        if len(data) - pos < 4:
            raise TraceFormatError("truncated record: text length cut short", offset)
        (size,) = _U32.unpack_from(data, pos)
        pos += 4
        if len(data) - pos < size:
            raise TraceFormatError("truncated record: token text cut short", offset)
        try:
            text = bytes(data[pos : pos + size]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceFormatError(f"token text is not UTF-8: {exc}", offset) from None
        pos += size
    return ActivationFrame(stream, t, values, bool(flags & FLAG_SEPARATOR), text), pos


# ---------------------------------------------------------------------------
# text records
# ---------------------------------------------------------------------------


def frame_to_json(frame: ActivationFrame) -> str:
    record = {
        "stream": frame.stream_id,
        "t": frame.t,
        "sep": frame.separator,
        "values": [float(v) for v in frame.values],
    }
    if frame.text is not None:
        record["text"] = frame.text
    return json.dumps(record, allow_nan=False)


def frame_from_json(line: str, lineno: int | None = None) -> ActivationFrame | EndOfStream:
    try:
        record = json.loads(line, parse_constant=_reject_constant)
        if record.get("end"):
            return EndOfStream(int(record["stream"]), int(record["frames"]))
        return ActivationFrame(
            int(record["stream"]),
            int(record["t"]),
            np.array(record["values"], dtype=np.float64),
            bool(record.get("sep", False)),
            record.get("text"),
        )
    except TraceFormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise TraceFormatError(f"malformed text record: {exc}", lineno) from None


def _reject_constant(name: str):
    raise TraceFormatError(f"non-finite constant {name} in text record")


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------


class FrameValidator:
    """Checks per-stream invariants on a sequence of frames."""

    def __init__(self):
        self.stream_id: int | None = None
        self.n_channels: int | None = None
        self.last_t: int | None = None
        self.count = 0
        self.ended = False

    def check(self, frame: ActivationFrame, where: int | None = None) -> None:
        if self.ended:
            raise ProtocolError("frame received after end of stream")
        if self.stream_id is None:
            self.stream_id, self.n_channels = frame.stream_id, frame.n_channels
        elif frame.stream_id != self.stream_id:
            raise TraceFormatError(
                f"stream id changed from {self.stream_id} to {frame.stream_id}", where
            )
        elif frame.n_channels != self.n_channels:
            raise TraceFormatError(
                f"channel count changed from {self.n_channels} to {frame.n_channels}", where
            )
        if self.last_t is not None and frame.t <= self.last_t:
            raise TraceFormatError(f"token index {frame.t} does not follow {self.last_t}", where)
        if not np.isfinite(frame.values).all():
            raise TraceFormatError(f"non-finite activation in frame t={frame.t}", where)
        self.last_t = frame.t
        self.count += 1

    def end(self, marker: EndOfStream, where: int | None = None) -> None:
        if self.ended:
            raise ProtocolError("duplicate end-of-stream marker")
        if marker.n_frames != self.count:
            raise TraceFormatError(
                f"end marker announces {marker.n_frames} frames, stream had {self.count}", where
            )
        self.ended = True


def _atomic_writer(path: Path, mode: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    return os.fdopen(fd, mode), tmp


def write_trace(path: str | os.PathLike, frames: Iterable[ActivationFrame], fmt: str | None = None) -> int:
    """Write frames plus the end sentinel; ``fmt`` is "binary" or "text".

    The format defaults to text for ``.jsonl`` paths and binary otherwise.
    Output is written to a temporary file and renamed on success.
    """
    path = Path(path)
    fmt = fmt or ("text" if path.suffix == ".jsonl" else "binary")
    if fmt not in ("binary", "text"):
        raise ValueError(f"unknown trace format {fmt!r}")
    fh, tmp = _atomic_writer(path, "wb")
    count, stream_id = 0, 0
    try:
        with fh:
            for frame in frames:
                stream_id = frame.stream_id
                if fmt == "binary":
                    fh.write(encode_frame(frame))
                else:
                    fh.write(frame_to_json(frame).encode("utf-8") + b"\n")
                count += 1
            if fmt == "binary":
                fh.write(encode_end(stream_id, count))
            else:
                end = {"end": True, "stream": stream_id, "frames": count}
                fh.write(json.dumps(end).encode("utf-8") + b"\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return count


def read_trace(path: str | os.PathLike, require_end: bool = True) -> Iterator[ActivationFrame]:
    """Yield validated frames from a binary or text trace file.

    The format is sniffed from the first bytes. Errors carry the byte offset
    (binary) or line number (text) of the first offending record.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(FRAME_MAGIC))
    if head == FRAME_MAGIC:
        yield from _read_binary(path, require_end)
    else:
        yield from _read_text(path, require_end)


def _read_binary(path: Path, require_end: bool) -> Iterator[ActivationFrame]:
    validator = FrameValidator()
    with open(path, "rb") as fh:
        buf = b""
        base = 0  # file offset of buf[0]
        while True:
            chunk = fh.read(1 << 16)
            buf += chunk
            pos = 0
            while pos < len(buf):
                try:
                    record, nxt = decode_record(buf, pos)
                except TraceFormatError as exc:
                    if chunk and "truncated" in str(exc):
                        break  # need more bytes
                    raise TraceFormatError(str(exc).rsplit(" (at offset", 1)[0], base + pos) from None
                if isinstance(record, EndOfStream):
                    validator.end(record, base + pos)
                    if nxt != len(buf) or fh.read(1):
                        raise TraceFormatError("data after end-of-stream marker", base + nxt)
                    return
                validator.check(record, base + pos)
                yield record
                pos = nxt
            buf = buf[pos:]
            base += pos
            if not chunk:
                break
    if buf:
        raise TraceFormatError("truncated record", base)
    if require_end:
        raise TraceFormatError("missing end-of-stream marker", base)


def _read_text(path: Path, require_end: bool) -> Iterator[ActivationFrame]:
    validator = FrameValidator()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise TraceFormatError("truncated text record (no line terminator)", lineno)
            record = frame_from_json(line, lineno)
            if isinstance(record, EndOfStream):
                validator.end(record, lineno)
                return
            validator.check(record, lineno)
            yield record
    if require_end:
        raise TraceFormatError("missing end-of-stream marker")


# ---------------------------------------------------------------------------
# step separators
# ---------------------------------------------------------------------------


class StepSplitter:
    """Incremental detector of the paragraph delimiter across token boundaries.

    Occurrences are matched left to right without overlap, so "\\n\\n\\n\\n"
    holds two separators and "\\n\\n\\n" one.
    """

    def __init__(self):
        self._pending_newline = False

    def feed(self, text: str) -> bool:
        completed = False
        for ch in text:
            if ch == "\n":
                if self._pending_newline:
                    completed = True
                    self._pending_newline = False
                else:
                    self._pending_newline = True
            else:
                self._pending_newline = False
        return completed


def derive_step_flags(tokens: Iterable[str]) -> list[bool]:
    splitter = StepSplitter()
    return [splitter.feed(tok) for tok in tokens]


# ---------------------------------------------------------------------------
# socket sessions
# ---------------------------------------------------------------------------


class SessionHandler(Protocol):
    def on_frame(self, frame: ActivationFrame) -> dict | None: ...

    def on_end(self) -> dict | None: ...

    def on_truncated(self) -> None: ...


def _parse_address(address) -> tuple[str, int]:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        return host or "127.0.0.1", int(port)
    return address[0], int(address[1])


def send_message(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(_U32.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, size: int) -> bytes | None:
    chunks, remaining = [], size
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket) -> bytes | None:
    """Next length-prefixed payload, or None if the peer closed cleanly between messages."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (size,) = _U32.unpack(head)
    if size > MAX_MESSAGE_SIZE:
        raise ProtocolError(f"message of {size} bytes exceeds the {MAX_MESSAGE_SIZE} byte limit")
    body = _recv_exact(sock, size)
    if body is None:
        raise ProtocolError("connection closed mid-message")
    return body


def _json_message(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


class _SessionRequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: MonitorServer = self.server  # type: ignore[assignment]
        handler = server.handler_factory()
        validator = FrameValidator()
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            while True:
                try:
                    payload = recv_message(sock)
                except (ProtocolError, OSError) as exc:
                    log.warning("session aborted: %s", exc)
                    handler.on_truncated()
                    return
                if payload is None:
                    handler.on_truncated()
                    return
                try:
                    record, used = decode_record(payload)
                    if used != len(payload):
                        raise TraceFormatError("trailing bytes after frame record")
                    if isinstance(record, EndOfStream):
                        validator.end(record)
                        summary = handler.on_end() or {}
                        send_message(sock, _json_message({"type": "end", **summary}))
                        return
                    validator.check(record)
                except (TraceFormatError, ProtocolError) as exc:
                    send_message(sock, _json_message({"type": "error", "message": str(exc)}))
                    handler.on_truncated()
                    return
                directive = handler.on_frame(record)
                if directive is None:
                    reply = {"type": "ack", "t": record.t}
                else:
                    reply = {"type": "directive", **directive}
                try:
                    send_message(sock, _json_message(reply))
                except OSError as exc:
                    log.warning("session aborted: %s", exc)
                    handler.on_truncated()
                    return
        finally:
            server.sessions_done.release()


class MonitorServer(socketserver.ThreadingTCPServer):
    """TCP server running one handler per session, each in its own thread."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, handler_factory: Callable[[], SessionHandler]):
        self.handler_factory = handler_factory
        self.sessions_done = threading.Semaphore(0)
        super().__init__(_parse_address(address), _SessionRequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "MonitorServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def wait_sessions(self, count: int = 1, timeout: float | None = None) -> bool:
        """Block until ``count`` more sessions have finished."""
        return all(self.sessions_done.acquire(timeout=timeout) for _ in range(count))

    def stop(self) -> None:
        self.shutdown()
        self.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve_socket(address, handler_factory: Callable[[], SessionHandler]) -> MonitorServer:
    """Start a background monitor server; use port 0 for an ephemeral port."""
    return MonitorServer(address, handler_factory).start()


class ProducerSession:
    """Producer side of a frame session.

    At most ``frame_budget`` frames may be unanswered; :meth:`send` blocks
    until the monitor catches up (backpressure). With the default budget of 2,
    the answer to frame τ has been received before frame τ+2 leaves. After a
    step-separator frame the producer waits for every outstanding answer.
    """

    def __init__(self, sock: socket.socket, stream_id: int = 0, frame_budget: int = 2):
        if frame_budget < 1:
            raise ValueError("frame_budget must be at least 1")
        self.sock = sock
        self.stream_id = stream_id
        self.frame_budget = frame_budget
        self.outstanding = 0
        self.sent = 0
        self.directives: list[dict] = []
        self.acks = 0
        self.closed = False

    def _receive_one(self) -> dict:
        payload = recv_message(self.sock)
        if payload is None:
            raise ProtocolError("monitor closed the session")
        message = json.loads(payload.decode("utf-8"))
        kind = message.get("type")
        if kind == "error":
            raise ProtocolError(f"monitor rejected the stream: {message.get('message')}")
        if kind in ("ack", "directive"):
            self.outstanding -= 1
            if kind == "directive":
                self.directives.append(message)
            else:
                self.acks += 1
        return message

    def drain(self) -> None:
        while self.outstanding:
            self._receive_one()

    def send(self, frame: ActivationFrame) -> list[dict]:
        """Send one frame; returns directives that arrived while sending it."""
        if self.closed:
            raise ProtocolError("session already ended")
        before = len(self.directives)
        while self.outstanding >= self.frame_budget:
            self._receive_one()
        send_message(self.sock, encode_frame(frame))
        self.outstanding += 1
        self.sent += 1
        if frame.separator:
            self.drain()
        return self.directives[before:]

    def end(self) -> dict:
        """Send the end sentinel and wait for the monitor's summary."""
        self.drain()
        send_message(self.sock, encode_end(self.stream_id, self.sent))
        while True:
            message = self._receive_one()
            if message.get("type") == "end":
                break
        self.close()
        return message

    def close(self) -> None:
        """Close the connection; without :meth:`end` the monitor sees a truncated stream."""
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect_stream(address, stream_id: int = 0, frame_budget: int = 2, timeout: float | None = 30.0) -> ProducerSession:
    sock = socket.create_connection(_parse_address(address), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return ProducerSession(sock, stream_id, frame_budget)
