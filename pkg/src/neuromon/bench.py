"""Per-token cost of the streaming window at several window lengths."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .spectral import DEFAULT_PROBES, Level, ProbeSet, SpectralWindow

DEFAULT_LENGTHS = (64, 256, 1024, 4096)


@dataclass
class BenchResult:
    lengths: tuple[int, ...]
    channels: int
    median_seconds: dict  # window length -> median per-token seconds

    def ratio(self, long: int | None = None, short: int | None = None) -> float:
        long = long or max(self.lengths)
        short = short or min(self.lengths)
        return self.median_seconds[long] / self.median_seconds[short]

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "median_us_per_token": {str(w): 1e6 * s for w, s in sorted(self.median_seconds.items())},
            "ratio_longest_to_shortest": self.ratio(),
        }


def time_per_token(length: int, channels: int, tokens: int = 2000, batch: int = 100,
                   probes: ProbeSet = DEFAULT_PROBES, level: Level = Level.INTRA,
                   seed: int = 0) -> float:
    """Median seconds per token of push + pop + feature read on a window of ``length`` tokens."""
    if length < 2 or channels < 1 or tokens < batch or batch < 1:
        raise ValidationError("need length >= 2, channels >= 1 and tokens >= batch >= 1")
    rng = np.random.default_rng(seed)
    win = SpectralWindow(channels, probes)
    for row in rng.standard_normal((length, channels)):
        win.push(row)
    data = rng.standard_normal((tokens, channels))
    timings = []
    for start in range(0, tokens - batch + 1, batch):
        t0 = time.perf_counter()
        for row in data[start:start + batch]:
            win.push(row)
            win.pop(1)
            win.features(level)
        timings.append((time.perf_counter() - t0) / batch)
    return float(np.median(timings))


def run_bench(lengths=DEFAULT_LENGTHS, channels: int = 32, tokens: int = 2000, repeats: int = 3,
              probes: ProbeSet = DEFAULT_PROBES, seed: int = 0) -> BenchResult:
    """Medians over ``repeats`` interleaved passes, so drift hits every length alike."""
    lengths = tuple(int(w) for w in lengths)
    if not lengths or repeats < 1:
        raise ValidationError("need at least one window length and one repeat")
    samples = {w: [] for w in lengths}
    # untimed pass so the first length does not pay for cold caches
    time_per_token(min(lengths), channels, min(tokens, 200), batch=min(tokens, 200), probes=probes, seed=seed)
    for r in range(repeats):
        for w in lengths:
            samples[w].append(time_per_token(w, channels, tokens, probes=probes, seed=seed + r))
    return BenchResult(lengths, channels, {w: float(np.median(v)) for w, v in samples.items()})
