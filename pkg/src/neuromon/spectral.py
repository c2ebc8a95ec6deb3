"""Frequency-domain features of activation-magnitude sequences.

Two routes compute the same family of features:

* the exact route (:func:`dft_spectrum` and the ``*_features`` functions) takes a
  whole series, removes its mean and looks at the one-sided DFT power;
* the streaming route (:class:`SpectralWindow`) keeps complex accumulators at a
  fixed set of probe frequencies so that a variable-length window can grow on
  the right and shrink on the left in constant time per token.

Feature layout per level::

    intra : (r_hf, entropy, energy)
    inter : (r_dom, entropy)
    inst  : (r_lf, entropy)
"""
from __future__ import annotations

import enum
import hashlib
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.special import xlogy

from .errors import DegenerateWindowError, ShapeError, ValidationError, WindowUnderflowError

EPSILON = 1e-12
DEFAULT_REBUILD_EVERY = 4096


class Level(str, enum.Enum):
    INTRA = "intra"
    INTER = "inter"
    INST = "inst"

    def __str__(self) -> str:
        return self.value


FEATURE_NAMES: dict[Level, tuple[str, ...]] = {
    Level.INTRA: ("r_hf", "entropy", "energy"),
    Level.INTER: ("r_dom", "entropy"),
    Level.INST: ("r_lf", "entropy"),
}


def feature_dim(level: Level | str) -> int:
    return len(FEATURE_NAMES[Level(level)])


@dataclass(frozen=True)
class FeatureVector:
    level: Level
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != feature_dim(self.level):
            raise ShapeError(
                f"{self.level} features have dimension {feature_dim(self.level)}, "
                f"got {len(self.values)}"
            )

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES[self.level].index(name)]


def as_series(values: Iterable[float]) -> np.ndarray:
    """Validate raw activations and return them as a 1-D float array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"activation series must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DegenerateWindowError("activation series is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("activation series contains NaN or Inf")
    return arr


def centered_magnitudes(values: Iterable[float]) -> np.ndarray:
    x = np.abs(as_series(values))
    return x - x.mean()


# ---------------------------------------------------------------------------
# exact route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Spectrum:
    """One-sided power spectrum of a mean-removed magnitude series.

    ``power[f - 1]`` is P(f) for f = 1..F (index 0 is the DC bin) and
    ``normalized[f - 2]`` is the DC-excluded distribution for f = 2..F.
    """

    power: np.ndarray
    normalized: np.ndarray
    length: int
    epsilon: float

    @property
    def n_bins(self) -> int:
        return self.power.shape[0]


def dft_spectrum(values: Iterable[float], epsilon: float = EPSILON) -> Spectrum:
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    y = centered_magnitudes(values)
    if y.size < 2:
        raise DegenerateWindowError(f"need at least 2 samples, got {y.size}")
    coeffs = np.fft.rfft(y)
    power = coeffs.real**2 + coeffs.imag**2
    non_dc = power[1:]
    return Spectrum(
        power=power,
        normalized=non_dc / (non_dc.sum() + epsilon),
        length=y.size,
        epsilon=epsilon,
    )


def spectral_entropy(spectrum: Spectrum) -> float:
    """Normalized entropy of the non-DC power distribution, in [0, 1].

    Zero when there is a single non-DC bin or no non-DC power at all.
    """
    p = spectrum.normalized
    if p.size < 2 or not np.any(p > 0):
        return 0.0
    h = -xlogy(p, p).sum() / np.log(p.size)
    return float(min(max(h, 0.0), 1.0))


def spectral_energy(spectrum: Spectrum) -> float:
    """Frequency-domain total variation energy, log(sum of non-DC power + eps)."""
    return float(np.log(spectrum.power[1:].sum() + spectrum.epsilon))


def two_sided_energy(values: Iterable[float]) -> float:
    """Sum of |Y(f)|^2 over all T bins of the full DFT of the centered series."""
    coeffs = np.fft.fft(centered_magnitudes(values))
    return float(np.sum(coeffs.real**2 + coeffs.imag**2))


def _checked_spectrum(values, epsilon) -> tuple[Spectrum, np.ndarray]:
    series = as_series(values)
    if series.size < 4:
        raise DegenerateWindowError(f"features need at least 4 samples, got {series.size}")
    return dft_spectrum(series, epsilon), series


def intra_features(values: Iterable[float], epsilon: float = EPSILON) -> FeatureVector:
    spectrum, series = _checked_spectrum(values, epsilon)
    half = spectrum.n_bins // 2
    # high band is f = half+1 .. F, i.e. normalized[half-1:]
    r_hf = spectrum.normalized[half - 1 :].sum()
    y = np.abs(series) - np.abs(series).mean()
    energy = max(float(np.dot(y, y)), 0.0)
    return FeatureVector(
        Level.INTRA,
        (r_hf, spectral_entropy(spectrum), np.log(energy + epsilon)),
    )


def inter_features(values: Iterable[float], epsilon: float = EPSILON) -> FeatureVector:
    spectrum, _ = _checked_spectrum(values, epsilon)
    return FeatureVector(
        Level.INTER, (spectrum.normalized.max(), spectral_entropy(spectrum))
    )


def inst_features(values: Iterable[float], epsilon: float = EPSILON) -> FeatureVector:
    spectrum, _ = _checked_spectrum(values, epsilon)
    half = spectrum.n_bins // 2
    # low band is f = 2 .. half; empty when F <= 3
    r_lf = spectrum.normalized[: max(half - 1, 0)].sum()
    return FeatureVector(Level.INST, (r_lf, spectral_entropy(spectrum)))


EXACT_FEATURES = {
    Level.INTRA: intra_features,
    Level.INTER: inter_features,
    Level.INST: inst_features,
}


# ---------------------------------------------------------------------------
# streaming route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSet:
    """Fixed angular frequencies at which the streaming window is evaluated."""

    omegas: tuple[float, ...]

    def __post_init__(self):
        omegas = tuple(float(w) for w in self.omegas)
        object.__setattr__(self, "omegas", omegas)
        if not omegas:
            raise ValidationError("probe set is empty")
        if any(not (0.0 < w <= np.pi) for w in omegas):
            raise ValidationError("probe frequencies must lie in (0, pi]")
        if len(set(omegas)) != len(omegas):
            raise ValidationError("probe frequencies must be distinct")

    @classmethod
    def uniform(cls, k: int = 16) -> "ProbeSet":
        """``k`` probes at pi*j/k for j = 1..k (DC excluded, Nyquist included)."""
        return cls(tuple(np.pi * j / k for j in range(1, k + 1)))

    def __len__(self) -> int:
        return len(self.omegas)

    @cached_property
    def array(self) -> np.ndarray:
        return np.array(self.omegas, dtype=np.float64)

    @cached_property
    def q(self) -> np.ndarray:
        return np.exp(-1j * self.array)

    @cached_property
    def eta(self) -> np.ndarray:
        return 1.0 / (1.0 - self.q)

    @cached_property
    def digest(self) -> str:
        """Stable hash of the probe frequencies, used to pair models with extractors."""
        return hashlib.sha256(self.array.astype("<f8").tobytes()).hexdigest()[:32]


DEFAULT_PROBES = ProbeSet.uniform(16)


# ---------------------------------------------------------------------------
# error-free transforms for the window energy
# ---------------------------------------------------------------------------

_SPLITTER = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    """s + e == a + b exactly, with s = fl(a + b)."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _two_prod(a, b):
    """p + e == a * b exactly (Dekker), with p = fl(a * b)."""
    p = a * b
    c = _SPLITTER * a
    ah = c - (c - a)
    al = a - ah
    c = _SPLITTER * b
    bh = c - (c - b)
    bl = b - bh
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _dd_sum(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column sums of a 2-D array as (hi, lo) pairs, by pairwise two-sums."""
    hi = np.array(values, dtype=np.float64)
    lo = np.zeros_like(hi)
    while hi.shape[0] > 1:
        if hi.shape[0] % 2:
            hi = np.vstack((hi, np.zeros((1,) + hi.shape[1:])))
            lo = np.vstack((lo, np.zeros((1,) + lo.shape[1:])))
        hi, err = _two_sum(hi[0::2], hi[1::2])
        lo = lo[0::2] + lo[1::2] + err
    return _two_sum(hi[0], lo[0])


class SpectralWindow:
    """Variable-length sliding window with O(1) probe-spectrum updates.

    Tokens are indexed from 1 in push order. For the window holding tokens
    s..t (L = t - s + 1) the state keeps, per channel n and probe k::

        U[n]    = sum y[n, i]
        V[n]    = sum y[n, i]**2
        A[n, k] = sum y[n, i] * q_k**i

    together with the phase registers alpha = q**t, beta = q**s, rho = q**L.
U and V are carried as double-double pairs so that the energy V - U**2 / L
keeps its relative accuracy when the window is nearly constant.
    Every ``rebuild_every`` push/pop operations the accumulators and phases
    are recomputed from the queue to bound floating-point drift; pass
    ``rebuild_every=None`` to disable that.

    Instances are single-owner mutable objects.
    """

    def __init__(
        self,
        n_channels: int,
        probes: ProbeSet = DEFAULT_PROBES,
        epsilon: float = EPSILON,
        rebuild_every: int | None = DEFAULT_REBUILD_EVERY,
    ):
        if n_channels < 1:
            raise ValidationError("n_channels must be positive")
        if not epsilon > 0:
            raise ValidationError("epsilon must be positive")
        if rebuild_every is not None and rebuild_every < 1:
            raise ValidationError("rebuild_every must be positive or None")
        self.n_channels = int(n_channels)
        self.probes = probes
        self.epsilon = float(epsilon)
        self.rebuild_every = rebuild_every
        self._q = probes.q
        self._q_inv = np.conj(probes.q)
        self._eta = probes.eta
        self.clear()

    def clear(self) -> None:
        n, k = self.n_channels, len(self.probes)
        self.queue: deque[np.ndarray] = deque()
        self.t = 0
        self.s = 1
        self.U = np.zeros(n)
        self.V = np.zeros(n)
        self._U_lo = np.zeros(n)
        self._V_lo = np.zeros(n)
        self.A = np.zeros((n, k), dtype=np.complex128)
        self.alpha = np.ones(k, dtype=np.complex128)
        self.beta = self._q.copy()
        self.rho = np.ones(k, dtype=np.complex128)
        self.ops_since_rebuild = 0

    def __len__(self) -> int:
        return len(self.queue)

    @property
    def length(self) -> int:
        return len(self.queue)

    def contents(self) -> np.ndarray:
        """Window magnitudes as an (L, N) array, oldest first."""
        if not self.queue:
            return np.zeros((0, self.n_channels))
        return np.array(self.queue)

    def _tick(self) -> None:
        self.ops_since_rebuild += 1
        if self.rebuild_every is not None and self.ops_since_rebuild >= self.rebuild_every:
            self.rebuild()

    def push(self, activations: Sequence[float] | np.ndarray) -> None:
        y = np.asarray(activations, dtype=np.float64)
        if y.shape != (self.n_channels,):
            raise ShapeError(f"expected {self.n_channels} channels, got shape {y.shape}")
        if not np.isfinite(y).all():
            raise ValidationError("frame contains NaN or Inf")
        y = np.abs(y)
        self.queue.append(y)
        self.t += 1
        self._accumulate(y, 1.0)
        self.alpha *= self._q
        self.rho *= self._q
        self.A += y[:, None] * self.alpha
        self._tick()

    def _accumulate(self, y: np.ndarray, sign: float) -> None:
        """Add (sign +1) or remove (sign -1) ``y`` in U and its square in V."""
        self.U, err = _two_sum(self.U, sign * y)
        self._U_lo += err
        sq, sq_err = _two_prod(y, y)
        self.V, err = _two_sum(self.V, sign * sq)
        self._V_lo += err + sign * sq_err

    def pop(self, count: int = 1) -> None:
        if count < 0:
            raise ValidationError("pop count must be non-negative")
        if count > len(self.queue):
            raise WindowUnderflowError(
                f"cannot pop {count} entries from a window of length {len(self.queue)}"
            )
        for _ in range(count):
            y = self.queue.popleft()
            self._accumulate(y, -1.0)
            self.A -= y[:, None] * self.beta
            self.beta *= self._q
            self.rho *= self._q_inv
            self.s += 1
            if not self.queue:
                # an empty window is exactly zero, whatever the rounding residue
                self.U[:] = 0.0
                self.V[:] = 0.0
                self._U_lo[:] = 0.0
                self._V_lo[:] = 0.0
                self.A[:] = 0.0
            self._tick()

    def rebuild(self) -> None:
        """Recompute accumulators and phase registers from the queue."""
        w = self.probes.array
        length = len(self.queue)
        if length:
            y = np.array(self.queue)
            idx = self.s + np.arange(length, dtype=np.float64)
            phases = np.exp(-1j * np.outer(idx, w))
            self.A = y.T @ phases
            self.U, self._U_lo = _dd_sum(y)
            sq, sq_err = _two_prod(y, y)
            self.V, self._V_lo = _dd_sum(np.vstack((sq, sq_err)))
        else:
            self.A = np.zeros_like(self.A)
            self.U = np.zeros(self.n_channels)
            self.V = np.zeros(self.n_channels)
            self._U_lo = np.zeros(self.n_channels)
            self._V_lo = np.zeros(self.n_channels)
        self.alpha = np.exp(-1j * w * float(self.t))
        self.beta = np.exp(-1j * w * float(self.s))
        self.rho = np.exp(-1j * w * float(length))
        self.ops_since_rebuild = 0

    def energy(self) -> np.ndarray:
        """Sum of squared deviations from the window mean, per channel."""
        length = len(self.queue)
        if length == 0:
            return np.zeros(self.n_channels)
        # L * V - U**2 with every product split exactly, then one division
        lv, lv_err = _two_prod(float(length), self.V)
        uu, uu_err = _two_prod(self.U, self.U)
        diff = (lv - uu) + (lv_err - uu_err) + length * self._V_lo - 2.0 * self.U * self._U_lo
        return np.maximum(diff / length, 0.0)

    def probe_power(self) -> np.ndarray:
        """Mean-removed power at every probe, shape (N, K)."""
        length = len(self.queue)
        if length < 2:
            raise DegenerateWindowError(f"features need a window of at least 2, got {length}")
        b = self.beta * (1.0 - self.rho) * self._eta
        s = self.A - (self.U / length)[:, None] * b
        return s.real**2 + s.imag**2

    def features(self, level: Level | str) -> np.ndarray:
        """Per-channel features for ``level`` as an (N, d) array."""
        level = Level(level)
        k = len(self.probes)
        if k < 2:
            raise DegenerateWindowError("entropy over probes needs at least 2 probes")
        power = self.probe_power()
        dist = power / (power.sum(axis=1, keepdims=True) + self.epsilon)
        entropy = np.clip(-xlogy(dist, dist).sum(axis=1) / np.log(k), 0.0, 1.0)
        half = k // 2
        if level is Level.INTRA:
            energy = self.energy()
            return np.column_stack(
                (dist[:, half:].sum(axis=1), entropy, np.log(energy + self.epsilon))
            )
        if level is Level.INTER:
            return np.column_stack((dist.max(axis=1), entropy))
        return np.column_stack((dist[:, :half].sum(axis=1), entropy))
