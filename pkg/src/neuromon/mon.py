"""Expert neuron selection by Top-K intersection of attribution scores.

Attribution scores come from an external tool as a (neurons x steps) matrix.
For a level, the caller picks the step columns that matter (erroneous-step
tokens, initial-attempt tokens, the first K steps) and :func:`select_mon`
keeps the neurons that rank in the top ``k`` at every one of those steps.

Two file formats are supported. The text form is tab separated, one neuron
per line::

    # id	kind	layer	score_0	score_1	...
    L14.ffn.2231	ffn	14	0.53	0.11	...

The binary form starts with a 16-byte magic, followed by little-endian
``u32 n_neurons, u32 n_steps``, the neuron records (``u16`` id length, utf-8
id, ``u8`` kind code, ``u32`` layer) and the score matrix in row-major
float64.
"""
from __future__ import annotations

import io
import logging
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TraceFormatError, ValidationError
from .spectral import Level

log = logging.getLogger(__name__)

NEURON_KINDS = ("ffn", "attention_head")
MON_MAGIC = b"NRMN-ATTRIB-v01\0"
assert len(MON_MAGIC) == 16
_COUNTS = struct.Struct("<II")
_ID_LEN = struct.Struct("<H")
_NEURON_TAIL = struct.Struct("<BI")


@dataclass(frozen=True)
class NeuronId:
    name: str
    kind: str
    layer: int

    def __post_init__(self):
        if self.kind not in NEURON_KINDS:
            raise ValidationError(f"neuron kind must be one of {NEURON_KINDS}, got {self.kind!r}")
        if not self.name or any(c in self.name for c in "\t\r\n"):
            raise ValidationError(f"invalid neuron id {self.name!r}")
        if self.layer < 0:
            raise ValidationError(f"layer index must be non-negative, got {self.layer}")


class AttributionMatrix:
    """Attribution scores, one row per neuron and one column per time step."""

    def __init__(self, neurons: Sequence[NeuronId], scores):
        scores = np.array(scores, dtype=np.float64)
        neurons = tuple(neurons)
        if scores.ndim != 2:
            raise ValidationError(f"scores must be a 2-d matrix, got shape {scores.shape}")
        if scores.shape[0] != len(neurons):
            raise ValidationError(f"{len(neurons)} neuron ids for {scores.shape[0]} score rows")
        if not np.isfinite(scores).all():
            row = int(np.argwhere(~np.isfinite(scores))[0][0])
            raise ValidationError(f"non-finite attribution score for neuron {neurons[row].name!r}")
        names = [n.name for n in neurons]
        if len(set(names)) != len(names):
            raise ValidationError("neuron ids must be unique")
        scores.setflags(write=False)
        self.neurons = neurons
        self.scores = scores

    @classmethod
    def from_names(cls, names: Sequence[str], scores, kind: str = "ffn", layer: int = 0) -> "AttributionMatrix":
        return cls([NeuronId(n, kind, layer) for n in names], scores)

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.neurons]

    def columns(self, cols) -> "AttributionMatrix":
        return AttributionMatrix(self.neurons, self.scores[:, cols])

    def __eq__(self, other):
        if not isinstance(other, AttributionMatrix):
            return NotImplemented
        return self.neurons == other.neurons and self.scores.tobytes() == other.scores.tobytes() \
            and self.shape == other.shape


@dataclass(frozen=True)
class MonSelection:
    level: Level
    neurons: frozenset
    k: int
    empty_warning: bool = False

    def sorted_names(self) -> list[str]:
        return sorted(self.neurons)


def top_k_sets(matrix: AttributionMatrix, k: int) -> list[set[str]]:
    """Per-column top-k neuron names; ties go to the smaller id."""
    names = np.array(matrix.names, dtype=object)
    # lexsort uses the last key as primary: descending score, then ascending id
    id_rank = np.argsort(np.argsort(names, kind="stable"), kind="stable")
    out = []
    for col in matrix.scores.T:
        order = np.lexsort((id_rank, -col))
        out.append(set(names[order[:k]]))
    return out


def select_mon(matrix: AttributionMatrix, k: int, level: Level | str,
               columns: Sequence[int] | None = None) -> MonSelection:
    """Neurons in the top ``k`` at every selected time step."""
    level = Level(level)
    if columns is not None:
        matrix = matrix.columns(list(columns))
    n, steps = matrix.shape
    if n == 0 or steps == 0:
        raise ValidationError("attribution matrix is empty")
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}], got {k!r}")
    chosen = set.intersection(*top_k_sets(matrix, int(k)))
    if not chosen:
        log.warning("empty expert set for %s at k=%d over %d steps", level.value, k, steps)
    return MonSelection(level, frozenset(chosen), int(k), empty_warning=not chosen)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _format_float(x: float) -> str:
    return repr(float(x))


def attributions_to_text(matrix: AttributionMatrix) -> str:
    lines = ["# id\tkind\tlayer\tscores..."]
    for neuron, row in zip(matrix.neurons, matrix.scores):
        fields = [neuron.name, neuron.kind, str(neuron.layer)] + [_format_float(x) for x in row]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def attributions_from_text(text: str) -> AttributionMatrix:
    neurons, rows = [], []
    width = None
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 4:
            raise TraceFormatError(f"line {lineno}: expected id, kind, layer and at least one score")
        name, kind, layer = fields[:3]
        try:
            neuron = NeuronId(name, kind, int(layer))
            row = [float(x) for x in fields[3:]]
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        if not all(math.isfinite(x) for x in row):
            raise TraceFormatError(f"line {lineno}: non-finite score")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise TraceFormatError(f"line {lineno}: {len(row)} scores, earlier rows have {width}")
        neurons.append(neuron)
        rows.append(row)
    if not rows:
        raise TraceFormatError("attribution file holds no neurons")
    try:
        return AttributionMatrix(neurons, rows)
    except ValidationError as exc:
        raise TraceFormatError(str(exc)) from None


def attributions_to_bytes(matrix: AttributionMatrix) -> bytes:
    parts = [MON_MAGIC, _COUNTS.pack(*matrix.shape)]
    for neuron in matrix.neurons:
        raw = neuron.name.encode("utf-8")
        parts += [_ID_LEN.pack(len(raw)), raw, _NEURON_TAIL.pack(NEURON_KINDS.index(neuron.kind), neuron.layer)]
    parts.append(np.ascontiguousarray(matrix.scores, dtype="<f8").tobytes())
    return b"".join(parts)


def attributions_from_bytes(data: bytes) -> AttributionMatrix:
    if data[:16] != MON_MAGIC:
        raise TraceFormatError("bad attribution magic", 0)
    offset = 16
    if len(data) < offset + _COUNTS.size:
        raise TraceFormatError("truncated header", offset)
    n, steps = _COUNTS.unpack_from(data, offset)
    offset += _COUNTS.size
    neurons = []
    for _ in range(n):
        if len(data) < offset + _ID_LEN.size:
            raise TraceFormatError("truncated neuron record", offset)
        (size,) = _ID_LEN.unpack_from(data, offset)
        start = offset
        offset += _ID_LEN.size
        if len(data) < offset + size + _NEURON_TAIL.size:
            raise TraceFormatError("truncated neuron record", start)
        try:
            name = data[offset:offset + size].decode("utf-8")
            code, layer = _NEURON_TAIL.unpack_from(data, offset + size)
            if code >= len(NEURON_KINDS):
                raise ValidationError(f"unknown neuron kind code {code}")
            neurons.append(NeuronId(name, NEURON_KINDS[code], layer))
        except (UnicodeDecodeError, ValidationError) as exc:
            raise TraceFormatError(str(exc), start) from None
        offset += size + _NEURON_TAIL.size
    expected = offset + 8 * n * steps
    if len(data) != expected:
        raise TraceFormatError(f"score block should end at byte {expected}, file has {len(data)}", offset)
    scores = np.frombuffer(data, dtype="<f8", count=n * steps, offset=offset).reshape(n, steps)
    if not np.isfinite(scores).all():
        row, col = np.argwhere(~np.isfinite(scores))[0]
        raise TraceFormatError("non-finite score", offset + 8 * int(row * steps + col))
    try:
        return AttributionMatrix(neurons, scores)
    except ValidationError as exc:
        raise TraceFormatError(str(exc), 16) from None


def _sniff(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("text", "binary"):
            raise ValidationError(f"attribution format must be 'text' or 'binary', got {fmt!r}")
        return fmt
    with open(path, "rb") as fh:
        return "binary" if fh.read(16) == MON_MAGIC else "text"


def load_attributions(path: str | os.PathLike, fmt: str | None = None) -> AttributionMatrix:
    path = Path(path)
    if _sniff(path, fmt) == "binary":
        return attributions_from_bytes(path.read_bytes())
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(f"attribution text is not utf-8: {exc.reason}", exc.start) from None
    return attributions_from_text(text)


def save_attributions(matrix: AttributionMatrix, path: str | os.PathLike, fmt: str = "text") -> Path:
    from .classifier import atomic_write_bytes

    if fmt == "text":
        data = attributions_to_text(matrix).encode("utf-8")
    elif fmt == "binary":
        data = attributions_to_bytes(matrix)
    else:
        raise ValidationError(f"attribution format must be 'text' or 'binary', got {fmt!r}")
    atomic_write_bytes(path, data)
    return Path(path)


def random_matrix(rng: np.random.Generator, n: int, steps: int, distinct: int | None = None) -> AttributionMatrix:
    """Seeded random matrix for tests and demos; ``distinct`` limits the score alphabet to force ties."""
    if distinct:
        scores = rng.integers(0, distinct, size=(n, steps)).astype(np.float64)
    else:
        scores = rng.standard_normal((n, steps))
    return AttributionMatrix.from_names([f"n{i:04d}" for i in range(n)], scores)
