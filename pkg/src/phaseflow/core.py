"""Shared domain types: phase taxonomies, feature sequences, probability
vectors and the experiment configuration.

All types are immutable after validation and safe to share across threads.
Phase ids are 0-based everywhere, including on disk.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

MODEL_DTYPE = np.float32

MGH100_PHASES = (
    "Port placement",
    "Fundus retraction",
    "Release GB peritoneum",
    "Dissection of Calot's triangle",
    "Checkpoint 1",
    "Clip Cystic Artery",
    "Divide Cystic Artery",
    "Clip Cystic Duct",
    "Divide Cystic Duct",
    "Checkpoint 2",
    "Remove GB from liver bed",
    "Bagging",
    "Other step",
)

CHOLEC80_PHASES = (
    "Preparation",
    "Calot Triangle Dissection",
    "Clipping and Cutting",
    "Gallbladder Dissection",
    "Gallbladder Packaging",
    "Cleaning and Coagulation",
    "Gallbladder Retraction",
)


class PhaseflowError(Exception):
    """Base class for all package errors."""


class DataValidationError(PhaseflowError):
    """Malformed input data: bad shapes, labels out of range, broken files."""


class NumericError(PhaseflowError):
    """Non-finite values where finite ones are required."""


class UsageError(PhaseflowError):
    """Bad arguments / misuse of an interface."""


@dataclass(frozen=True)
class PhaseTaxonomy:
    """Ordered set of phase labels; index in `names` is the phase id."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise DataValidationError("taxonomy needs at least 2 phases")
        if len(set(self.names)) != len(self.names):
            raise DataValidationError("phase names must be unique")

    @property
    def n_phases(self) -> int:
        return len(self.names)

    @property
    def phases(self) -> tuple[tuple[int, str], ...]:
        return tuple(enumerate(self.names))

    @classmethod
    def mgh100(cls) -> "PhaseTaxonomy":
        return cls(MGH100_PHASES)

    @classmethod
    def cholec80(cls) -> "PhaseTaxonomy":
        return cls(CHOLEC80_PHASES)

    def to_dict(self) -> dict:
        return {str(i): name for i, name in enumerate(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseTaxonomy":
        try:
            ids = sorted(int(k) for k in d)
        except ValueError as e:
            raise DataValidationError(f"taxonomy keys must be integers: {e}") from None
        if ids != list(range(len(ids))):
            raise DataValidationError(f"taxonomy ids not contiguous from 0: {ids}")
        return cls(tuple(d[str(i)] for i in ids))


@dataclass
class FeatureSequence:
    """One video's stream of visual embeddings plus optional per-frame labels.

    `features` is (T, D) float32; `labels` is (T,) int or None at inference.
    """

    video_id: str
    fps: float
    features: np.ndarray
    labels: np.ndarray | None = None
    source_seed: int | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.features.shape[1]


def validate_sequence(seq: FeatureSequence, tax: PhaseTaxonomy) -> FeatureSequence:
    """Check all FeatureSequence invariants; freeze and return the sequence.

    Raises DataValidationError naming the first offending frame.
    """
    feats = np.asarray(seq.features)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise DataValidationError(
            f"{seq.video_id}: features must be (T, D) with T,D >= 1, got {feats.shape}"
        )
    bad = ~np.isfinite(feats)
    if bad.any():
        frame = int(np.argwhere(bad)[0][0])
        raise DataValidationError(
            f"{seq.video_id}: non-finite feature value at frame {frame}"
        )
    if seq.fps <= 0:
        raise DataValidationError(f"{seq.video_id}: fps must be positive")
    if seq.labels is not None:
        labels = np.asarray(seq.labels)
        if labels.shape != (feats.shape[0],):
            raise DataValidationError(
                f"{seq.video_id}: labels shape {labels.shape} does not match "
                f"T={feats.shape[0]}"
            )
        out = (labels < 0) | (labels >= tax.n_phases)
        if out.any():
            frame = int(np.argwhere(out)[0][0])
            raise DataValidationError(
                f"{seq.video_id}: label out of range at frame {frame} "
                f"(got {int(labels[frame])}, valid ids are 0..{tax.n_phases - 1})"
            )
        seq.labels = np.ascontiguousarray(labels, dtype=np.int64)
        seq.labels.setflags(write=False)
    seq.features = np.ascontiguousarray(feats, dtype=MODEL_DTYPE)
    seq.features.setflags(write=False)
    return seq


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis; always a valid simplex."""
    z = np.asarray(logits)
    m = z - z.max(axis=-1, keepdims=True)
    e = np.exp(m)
    return e / e.sum(axis=-1, keepdims=True)


def validate_prob_vector(p: np.ndarray, n_phases: int | None = None, tol: float = 1e-6) -> np.ndarray:
    """Check the simplex invariant: entries in [0, 1], summing to 1 within tol."""
    p = np.asarray(p)
    if p.ndim != 1:
        raise DataValidationError(f"probability vector must be 1-D, got shape {p.shape}")
    if n_phases is not None and p.shape[0] != n_phases:
        raise DataValidationError(f"expected {n_phases} entries, got {p.shape[0]}")
    if not np.isfinite(p).all():
        raise NumericError("probability vector contains non-finite entries")
    if (p < -tol).any() or (p > 1 + tol).any():
        raise DataValidationError("probability entries outside [0, 1]")
    s = float(p.sum())
    if abs(s - 1.0) > tol:
        raise DataValidationError(f"probabilities sum to {s}, not 1")
    return p


SSM_FEATURE_KINDS = ("csl", "gabor", "hmm")


@dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of a training/inference run. Defaults follow the reference
    protocol: 64-d hidden state, length-8 truncated BPTT windows, batch 32,
    Adam at 0.0025 for 20 epochs."""

    hidden_dim: int = 64
    seq_len_bptt: int = 8
    batch_size: int = 32
    learning_rate: float = 0.0025
    epochs: int = 20
    embed_dim: int = 128
    enabled_ssm_features: tuple[str, ...] = ("csl", "gabor", "hmm")
    acausal: bool = False
    proximal_weight: float = 0.1
    rng_seed: int = 0
    csl_levels: tuple[float, ...] = (0.25, 0.5, 0.75)
    gabor_num_scales: int = 10
    gabor_scale_min: float = 10.0
    gabor_scale_max: float = 30.0
    hmm_smoothing: float = 1e-3
    grad_clip: float = 5.0

    def __post_init__(self):
        object.__setattr__(
            self, "enabled_ssm_features", tuple(self.enabled_ssm_features)
        )
        object.__setattr__(self, "csl_levels", tuple(float(v) for v in self.csl_levels))
        for name in (
            "hidden_dim", "seq_len_bptt", "batch_size", "learning_rate",
            "epochs", "embed_dim", "gabor_num_scales", "gabor_scale_min",
            "gabor_scale_max", "hmm_smoothing", "grad_clip",
        ):
            if getattr(self, name) <= 0 and not (name == "epochs" and self.epochs == 0):
                raise UsageError(f"config field {name} must be positive")
        if self.proximal_weight < 0:
            raise UsageError("proximal_weight must be >= 0")
        unknown = set(self.enabled_ssm_features) - set(SSM_FEATURE_KINDS)
        if unknown:
            raise UsageError(f"unknown ssm features: {sorted(unknown)}")
        if len(set(self.enabled_ssm_features)) != len(self.enabled_ssm_features):
            raise UsageError("enabled_ssm_features contains duplicates")
        if self.gabor_scale_max < self.gabor_scale_min:
            raise UsageError("gabor_scale_max must be >= gabor_scale_min")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "enabled_ssm_features":
                v = tuple(v)
            elif f.name == "csl_levels":
                v = tuple(float(x) for x in v)
            elif f.name == "acausal":
                v = bool(v)
            elif f.name in ("learning_rate", "proximal_weight", "gabor_scale_min",
                            "gabor_scale_max", "hmm_smoothing", "grad_clip"):
                v = float(v)
            else:
                v = int(v)
            kwargs[f.name] = v
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Named RNG sub-stream so one seed drives generator/init/batching
    independently and reproducibly."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
