"""Entropy, mutual information and KL for categorical distributions.

All functions work on the last axis, so they take a single distribution
``[C]`` or any stack ``[..., C]``. Logs are natural (nats).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError

RENORM_TOL = 1e-3
KL_FLOOR = 1e-12


@dataclass(frozen=True)
class ProbDist:
    """A validated categorical distribution.

    Sums within 1e-3 of one are renormalized; anything further off is a bug
    upstream and raises.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ShapeError(f"ProbDist needs a 1-D vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise InputError(f"ProbDist entries must be finite and >= 0: {p}")
        s = p.sum()
        if abs(s - 1.0) > RENORM_TOL:
            raise InputError(f"ProbDist sums to {s}, not 1")
        p = p / s
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self):
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    @classmethod
    def uniform(cls, n_classes: int) -> "ProbDist":
        return cls(np.full(n_classes, 1.0 / n_classes))


def _arr(p) -> np.ndarray:
    if isinstance(p, ProbDist):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def _xlogx(p: np.ndarray) -> np.ndarray:
    # 0 * log 0 := 0
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def entropy(p) -> np.ndarray | float:
    """Shannon entropy -sum p ln p over the last axis."""
    p = _arr(p)
    h = -_xlogx(p).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def mean_dist(samples) -> np.ndarray:
    """Arithmetic mean of K distributions. ``samples`` is [..., K, C] or a list of ProbDist."""
    s = _stack(samples)
    return s.mean(axis=-2)


def mutual_information(samples) -> np.ndarray | float:
    """H(mean) - mean_k H(p_k), clamped at zero against rounding."""
    s = _stack(samples)
    mi = np.maximum(entropy(s.mean(axis=-2)) - np.mean(entropy(s), axis=-1), 0.0)
    return float(mi) if np.ndim(mi) == 0 else mi


def kl_divergence(p, q) -> np.ndarray | float:
    """sum p ln(p / q); q is floored at 1e-12 inside the log."""
    p, q = _arr(p), _arr(q)
    if p.shape[-1] != q.shape[-1]:
        raise ShapeError(f"class-count mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    q = np.maximum(q, KL_FLOOR)
    safe_p = np.where(p > 0, p, 1.0)
    kl = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0).sum(axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def _stack(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        s = samples.astype(np.float64, copy=False)
    else:
        rows = [_arr(p) for p in samples]
        if not rows:
            raise ShapeError("need at least one sample")
        if len({r.shape for r in rows}) != 1:
            raise ShapeError("samples have different class counts")
        s = np.stack(rows)
    if s.ndim < 2 or s.shape[-2] < 1:
        raise ShapeError(f"samples must be [..., K, C] with K >= 1, got {s.shape}")
    return s


@dataclass(frozen=True)
class TeacherSampleSet:
    """K stochastic predictions from one teacher for one input."""

    samples: np.ndarray  # [K, C]
    mean: ProbDist
    mutual_info: float

    @classmethod
    def from_samples(cls, samples) -> "TeacherSampleSet":
        s = _stack(samples)
        if s.ndim != 2:
            raise ShapeError(f"expected [K, C] samples, got {s.shape}")
        s = s.copy()
        s.setflags(write=False)
        return cls(s, ProbDist(s.mean(axis=0)), mutual_information(s))

    @property
    def k(self) -> int:
        return self.samples.shape[0]

    @property
    def n_classes(self) -> int:
        return self.samples.shape[1]
