"""Sufficient-statistic feature family: streaming aggregators that compress
the phase-likelihood history m_1..m_t into a fixed-size vector s_t.

Three feature kinds, concatenated in the fixed order csl | gabor | hmm:

* CSL: per phase, log(1 + count of past frames whose probability crossed each
  threshold level), plus an is-argmax counter channel.
* Gabor: magnitudes of a causal 1-D Gabor filter bank (10 scales) applied to
  each likelihood channel through a bounded ring buffer.
* HMM: forward-filtered posterior under a row-stochastic transition matrix.

Acausal variants run the same aggregator over the time-reversed stream, so
the value at frame t summarizes frames strictly after t.

Aggregator internals are float64; the model casts to float32 at the input
concat.
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass, field

import numpy as np

from .core import DataValidationError, PhaseTaxonomy, UsageError

FEATURE_ORDER = ("csl", "gabor", "hmm")


# ---------------------------------------------------------------------------
# CSL

class CslAccumulator:
    """Cumulative sum likelihood counters: counts[n][l] of frames with
    m[n] >= level l, plus a trailing is-argmax counter per phase. Argmax ties
    break to the lowest phase id. Feature is log(count + 1), phase-major."""

    def __init__(self, n_phases: int, levels=(0.25, 0.5, 0.75)):
        self.n_phases = n_phases
        self.levels = np.asarray(levels, dtype=np.float64)
        self.counts = np.zeros((n_phases, len(levels) + 1), dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.n_phases * (len(self.levels) + 1)

    def reset(self) -> None:
        self.counts[:] = 0

    def update(self, m: np.ndarray) -> None:
        m = np.asarray(m, dtype=np.float64)
        self.counts[:, :-1] += m[:, None] >= self.levels[None, :]
        self.counts[int(np.argmax(m)), -1] += 1

    def feature(self) -> np.ndarray:
        return np.log1p(self.counts.astype(np.float64)).reshape(-1)


# ---------------------------------------------------------------------------
# Gabor filter bank

def gabor_kernel(sigma: float, causal: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Complex 1-D Gabor kernel sampled at integer lags.

    Gaussian envelope times a carrier of wavelength 4*sigma; support
    [-3*sigma, 0] (causal) or [-3*sigma, 3*sigma]. Normalized so the L1 norm
    of the complex kernel (= the envelope sum) is 1. Returned arrays are
    ordered oldest lag first, lag 0 last (causal) / centered (symmetric).
    """
    half = int(np.floor(3.0 * sigma))
    u = np.arange(-half, 1 if causal else half + 1, dtype=np.float64)
    envelope = np.exp(-(u * u) / (2.0 * sigma * sigma))
    omega = 2.0 * np.pi / (4.0 * sigma)
    norm = envelope.sum()
    return envelope * np.cos(omega * u) / norm, envelope * np.sin(omega * u) / norm


@dataclass(frozen=True)
class GaborBank:
    """Fixed filter bank over `scales`; kernels padded into (K, width)
    matrices aligned so the last column is lag 0 (newest frame)."""

    scales: np.ndarray
    causal: bool
    kernels_real: np.ndarray = field(repr=False)
    kernels_imag: np.ndarray = field(repr=False)
    support_lengths: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, num_scales: int = 10, scale_min: float = 10.0,
              scale_max: float = 30.0, causal: bool = True) -> "GaborBank":
        scales = np.linspace(scale_min, scale_max, num_scales)
        kernels = [gabor_kernel(s, causal=causal) for s in scales]
        lengths = np.array([k[0].shape[0] for k in kernels], dtype=np.int64)
        width = int(lengths.max())
        re = np.zeros((num_scales, width))
        im = np.zeros((num_scales, width))
        for k, (kr, ki) in enumerate(kernels):
            re[k, width - len(kr):] = kr
            im[k, width - len(ki):] = ki
        return cls(scales=scales, causal=causal, kernels_real=re,
                   kernels_imag=im, support_lengths=lengths)

    @property
    def num_scales(self) -> int:
        return self.scales.shape[0]

    @property
    def width(self) -> int:
        return self.kernels_real.shape[1]

    def kernel(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        n = int(self.support_lengths[k])
        return (self.kernels_real[k, self.width - n:],
                self.kernels_imag[k, self.width - n:])


class GaborAccumulator:
    """Streaming causal filtering through a ring buffer of the last `width`
    likelihood frames (zero history before the stream starts). Feature is the
    response magnitude per (phase, scale), phase-major."""

    def __init__(self, n_phases: int, bank: GaborBank):
        if not bank.causal:
            raise UsageError("streaming gabor aggregation requires a causal bank")
        self.n_phases = n_phases
        self.bank = bank
        self.buf = np.zeros((bank.width, n_phases))

    @property
    def dim(self) -> int:
        return self.n_phases * self.bank.num_scales

    def reset(self) -> None:
        self.buf[:] = 0.0

    def update(self, m: np.ndarray) -> None:
        self.buf[:-1] = self.buf[1:]
        self.buf[-1] = np.asarray(m, dtype=np.float64)

    def feature(self) -> np.ndarray:
        re = self.bank.kernels_real @ self.buf    # (K, N)
        im = self.bank.kernels_imag @ self.buf
        return np.hypot(re, im).T.reshape(-1)


def gabor_batch_response(bank: GaborBank, ms: np.ndarray) -> np.ndarray:
    """Direct full-stream convolution: response[t] is anchored at frame t with
    zero-padded history (and future, for symmetric banks). Returns
    (T, N * num_scales), ordered like GaborAccumulator.feature()."""
    ms = np.asarray(ms, dtype=np.float64)
    T, n = ms.shape
    out = np.zeros((T, n * bank.num_scales))
    for k in range(bank.num_scales):
        kr, ki = bank.kernel(k)
        L = kr.shape[0]
        lag0 = L - 1 if bank.causal else (L - 1) // 2
        for t in range(T):
            re = np.zeros(n)
            im = np.zeros(n)
            for j in range(L):
                tt = t + (j - lag0)
                if 0 <= tt < T:
                    re += kr[j] * ms[tt]
                    im += ki[j] * ms[tt]
            out[t].reshape(n, bank.num_scales)[:, k] = np.hypot(re, im)
    return out


# ---------------------------------------------------------------------------
# HMM transition matrix and forward filter

@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic phase transition matrix with estimation metadata."""

    a: np.ndarray
    n_sequences: int = 0
    smoothing: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataValidationError(f"transition matrix must be square, got {a.shape}")
        if (a <= 0).any():
            raise DataValidationError("transition matrix entries must be positive")
        a = a / a.sum(axis=1, keepdims=True)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @property
    def n_phases(self) -> int:
        return self.a.shape[0]

    @classmethod
    def uniform(cls, n_phases: int) -> "TransitionMatrix":
        return cls(np.full((n_phases, n_phases), 1.0 / n_phases))

    def save_csv(self, path, taxonomy: PhaseTaxonomy | None = None) -> None:
        # repr round-trips float64 exactly and stays human-readable
        names = taxonomy.names if taxonomy else [f"phase_{i}" for i in range(self.n_phases)]
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(names)
            for row in self.a:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path) -> "TransitionMatrix":
        with open(path, newline="") as fh:
            rows = list(_csv.reader(fh))
        if not rows:
            raise DataValidationError(f"empty transition matrix file: {path}")
        n = len(rows[0])
        if len(rows) != n + 1:
            raise DataValidationError(
                f"transition matrix file {path}: expected {n} rows, got {len(rows) - 1}")
        a = np.array([[float(v) for v in row] for row in rows[1:]])
        return cls(a)


def estimate_transition_matrix(label_sequences, n_phases: int,
                               smoothing: float = 1e-3) -> TransitionMatrix:
    """Laplace-smoothed successive-frame transition counts, row-normalized.

    Smoothing keeps rare-but-legal transitions possible while still
    penalizing illogical ones.
    """
    label_sequences = list(label_sequences)
    if not label_sequences:
        raise DataValidationError("transition estimation needs at least one sequence")
    if smoothing <= 0:
        raise UsageError("smoothing must be > 0")
    counts = np.zeros((n_phases, n_phases), dtype=np.int64)
    for seq in label_sequences:
        seq = np.asarray(seq)
        if (seq < 0).any() or (seq >= n_phases).any():
            raise DataValidationError("label out of range in transition estimation")
        np.add.at(counts, (seq[:-1], seq[1:]), 1)
    a = counts.astype(np.float64) + smoothing
    return TransitionMatrix(a, n_sequences=len(label_sequences), smoothing=smoothing)


class HmmFilterState:
    """Streaming forward filter: belief' ~ (A^T belief) * m, renormalized.

    Belief starts uniform; the emitted feature is the zero vector before the
    first update. On normalization underflow the belief resets to uniform and
    a diagnostic counter increments.
    """

    def __init__(self, transition: TransitionMatrix):
        self.transition = transition
        n = transition.n_phases
        self.belief = np.full(n, 1.0 / n)
        self.t = 0
        self.underflow_count = 0

    @property
    def dim(self) -> int:
        return self.transition.n_phases

    def reset(self) -> None:
        self.belief[:] = 1.0 / self.transition.n_phases
        self.t = 0
        self.underflow_count = 0

    def update(self, m: np.ndarray) -> None:
        pred = self.transition.a.T @ self.belief
        post = pred * np.asarray(m, dtype=np.float64)
        s = post.sum()
        if s <= 0.0 or not np.isfinite(s):
            self.underflow_count += 1
            self.belief = np.full(self.dim, 1.0 / self.dim)
        else:
            self.belief = post / s
        self.t += 1

    def feature(self) -> np.ndarray:
        if self.t == 0:
            return np.zeros(self.dim)
        return self.belief.copy()


def hmm_forward_marginals(transition: TransitionMatrix, ms: np.ndarray) -> np.ndarray:
    """Filtered posterior at every frame for a complete stream (T, N)."""
    f = HmmFilterState(transition)
    out = np.empty_like(np.asarray(ms, dtype=np.float64))
    for t, m in enumerate(ms):
        f.update(m)
        out[t] = f.belief
    return out


# ---------------------------------------------------------------------------
# Composite extractor and stream helpers

class SsmExtractor:
    """Concatenation of the enabled aggregators in the order csl | gabor | hmm.

    `feature()` returns the statistic for the history consumed so far; it is
    the zero vector before the first update ("history memory initialized with
    zeros"). Total dimension is fixed for the life of the extractor.
    """

    def __init__(self, n_phases: int, enabled=("csl", "gabor", "hmm"),
                 csl_levels=(0.25, 0.5, 0.75), gabor_bank: GaborBank | None = None,
                 transition: TransitionMatrix | None = None):
        unknown = set(enabled) - set(FEATURE_ORDER)
        if unknown:
            raise UsageError(f"unknown ssm features: {sorted(unknown)}")
        self.n_phases = n_phases
        self.enabled = tuple(k for k in FEATURE_ORDER if k in enabled)
        self._parts = []
        if "csl" in self.enabled:
            self._parts.append(CslAccumulator(n_phases, csl_levels))
        if "gabor" in self.enabled:
            bank = gabor_bank if gabor_bank is not None else GaborBank.build()
            self._parts.append(GaborAccumulator(n_phases, bank))
        if "hmm" in self.enabled:
            if transition is None:
                transition = TransitionMatrix.uniform(n_phases)
            self._parts.append(HmmFilterState(transition))
        self._dim = sum(p.dim for p in self._parts)

    @property
    def dim(self) -> int:
        return self._dim

    def reset(self) -> None:
        for p in self._parts:
            p.reset()

    def update(self, m: np.ndarray) -> None:
        for p in self._parts:
            p.update(m)

    def feature(self) -> np.ndarray:
        if not self._parts:
            return np.zeros(0)
        out = np.concatenate([p.feature() for p in self._parts])
        if out.shape[0] != self._dim:
            raise DataValidationError(
                f"ssm feature dimension drift: expected {self._dim}, got {out.shape[0]}")
        return out


def ssm_dim(n_phases: int, enabled, n_levels: int = 3, num_scales: int = 10) -> int:
    """Concatenated feature dimension for one (causal) statistic stream."""
    dim = 0
    if "csl" in enabled:
        dim += n_phases * (n_levels + 1)
    if "gabor" in enabled:
        dim += n_phases * num_scales
    if "hmm" in enabled:
        dim += n_phases
    return dim


def feature_stream(extractor: SsmExtractor, ms) -> np.ndarray:
    """Causal statistic stream: row t is the feature available when frame t is
    processed, i.e. aggregated over m[0..t-1]; row 0 is zeros."""
    extractor.reset()
    rows = []
    for m in ms:
        rows.append(extractor.feature())
        extractor.update(m)
    return np.stack(rows) if rows else np.zeros((0, extractor.dim))


def acausal_feature_stream(extractor: SsmExtractor, ms) -> np.ndarray:
    """Acausal statistic stream: the causal aggregator run over the reversed
    stream and re-reversed, so row t aggregates m[t+1..T-1] and the last row
    is zeros. Requires the complete stream (offline mode only)."""
    ms = np.asarray(ms)
    if ms.ndim != 2:
        raise UsageError("acausal aggregation needs the complete (T, N) stream")
    return feature_stream(extractor, ms[::-1])[::-1].copy()
