"""Fuse the classifier teacher and the LALM teacher into one soft label.

The default strategy weights each teacher's mean distribution by
``exp(-mutual_information)``; the alternatives (entropy / equal weights,
a KL similarity gate, or picking the more confident teacher) cover the
ablation grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError, ValidationError
from .uncertainty import ProbDist, TeacherSampleSet, entropy, kl_divergence

GENERATIONS = ("multi", "single")
GATES = ("direct", "kl", "nofusion")
WEIGHTINGS = ("mi", "entropy", "equal")
PAPER_TAUS = (0.4, 0.6, 0.8)
TIE_TOL = 1e-12

# source codes for FusedLabel / fuse_batch
FUSED, CLS_ONLY, LM_ONLY = 0, 1, 2
SOURCE_NAMES = {FUSED: "fused", CLS_ONLY: "cls_only", LM_ONLY: "lm_only"}


@dataclass(frozen=True)
class FusionConfig:
    generation: str = "multi"
    gate: str = "direct"
    weighting: Optional[str] = "mi"
    tau: Optional[float] = None
    allow_free_tau: bool = False

    def __post_init__(self):
        if self.generation not in GENERATIONS:
            raise ValidationError(f"generation must be one of {GENERATIONS}, got {self.generation!r}")
        if self.gate not in GATES:
            raise ValidationError(f"gate must be one of {GATES}, got {self.gate!r}")
        if self.gate == "nofusion":
            # weighting never applies when nothing is fused
            object.__setattr__(self, "weighting", None)
        elif self.weighting not in WEIGHTINGS:
            raise ValidationError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.generation == "single" and self.weighting == "mi":
            raise ValidationError(
                "single generation with mi weighting is vacuous: one LALM sample has zero MI"
            )
        if self.gate == "kl":
            if self.tau is None or not self.tau > 0:
                raise ValidationError(f"kl gate needs tau > 0, got {self.tau!r}")
            if not self.allow_free_tau and not any(np.isclose(self.tau, t) for t in PAPER_TAUS):
                raise ValidationError(
                    f"tau {self.tau} is outside {PAPER_TAUS}; pass allow_free_tau=True to override"
                )
        elif self.tau is not None:
            object.__setattr__(self, "tau", None)

    @property
    def label(self) -> str:
        parts = [self.generation, self.gate]
        if self.weighting:
            parts.append(self.weighting)
        if self.tau is not None:
            parts.append(f"tau={self.tau:g}")
        return "/".join(parts)

    def to_dict(self) -> dict:
        return {
            "generation": self.generation,
            "gate": self.gate,
            "weighting": self.weighting,
            "tau": self.tau,
            "allow_free_tau": self.allow_free_tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**{k: d[k] for k in ("generation", "gate", "weighting", "tau", "allow_free_tau") if k in d})


def ablation_cells():
    """The 12 (generation, gate, weighting) cells of the ablation table.

    KL cells come back with ``tau=None``; the caller picks tau per cell.
    """
    cells = []
    for generation, weightings in (("multi", WEIGHTINGS), ("single", ("entropy", "equal"))):
        for gate in ("direct", "kl"):
            for w in weightings:
                cells.append((generation, gate, w))
        cells.append((generation, "nofusion", None))
    return cells


@dataclass(frozen=True)
class FusedLabel:
    dist: ProbDist
    source: str  # "fused" | "cls_only" | "lm_only"
    weights: Optional[Tuple[float, float]] = None  # (w_cls, w_lm) when fused


def teacher_weights(cls_mean, cls_mi, lm_mean, lm_mi, weighting: str) -> np.ndarray:
    """Normalized (w_cls, w_lm) along the last axis, shape [..., 2]."""
    if weighting == "equal":
        shape = np.broadcast(np.asarray(cls_mi), np.asarray(lm_mi)).shape
        return np.full(shape + (2,), 0.5)
    if weighting == "mi":
        u = np.stack(np.broadcast_arrays(np.asarray(cls_mi, float), np.asarray(lm_mi, float)), axis=-1)
    elif weighting == "entropy":
        u = np.stack([np.asarray(entropy(cls_mean)), np.asarray(entropy(lm_mean))], axis=-1)
    else:
        raise ValidationError(f"unknown weighting {weighting!r}")
    # softmax over -u: shift-invariant in u
    z = -u
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_batch(cls_mean, cls_mi, lm_mean, lm_mi, config: FusionConfig):
    """Vectorized fusion over a batch of B inputs.

    ``cls_mean``/``lm_mean`` are [B, C]; ``cls_mi``/``lm_mi`` are [B].
    Returns ``(dist [B, C], source [B] int codes, weights [B, 2])``; rows
    that were not fused carry weights of NaN.
    """
    cls_mean = np.asarray(cls_mean, dtype=np.float64)
    lm_mean = np.asarray(lm_mean, dtype=np.float64)
    if cls_mean.shape != lm_mean.shape:
        raise ShapeError(f"teacher means disagree in shape: {cls_mean.shape} vs {lm_mean.shape}")
    b = cls_mean.shape[0]

    h_cls = entropy(cls_mean)
    h_lm = entropy(lm_mean)
    pick_lm = h_lm < h_cls - TIE_TOL
    selected = np.where(pick_lm[:, None], lm_mean, cls_mean)
    selected_src = np.where(pick_lm, LM_ONLY, CLS_ONLY)

    if config.gate == "nofusion":
        return selected, selected_src, np.full((b, 2), np.nan)

    w = teacher_weights(cls_mean, cls_mi, lm_mean, lm_mi, config.weighting)
    fused = w[:, :1] * cls_mean + w[:, 1:] * lm_mean
    if config.gate == "direct":
        return fused, np.full(b, FUSED), w

    passes = kl_divergence(cls_mean, lm_mean) <= config.tau
    dist = np.where(passes[:, None], fused, selected)
    src = np.where(passes, FUSED, selected_src)
    w = np.where(passes[:, None], w, np.nan)
    return dist, src, w


def fuse(cls: TeacherSampleSet, lm: TeacherSampleSet, config: FusionConfig) -> FusedLabel:
    """Fuse one input's two teacher sample sets."""
    if cls.n_classes != lm.n_classes:
        raise ShapeError(f"class-count mismatch: {cls.n_classes} vs {lm.n_classes}")
    dist, src, w = fuse_batch(
        cls.mean.probs[None], [cls.mutual_info], lm.mean.probs[None], [lm.mutual_info], config
    )
    source = SOURCE_NAMES[int(src[0])]
    weights = (float(w[0, 0]), float(w[0, 1])) if source == "fused" else None
    return FusedLabel(ProbDist(dist[0]), source, weights)


def select_lower_entropy(a: TeacherSampleSet, b: TeacherSampleSet) -> FusedLabel:
    """Pick the teacher whose mean has lower entropy; ties go to ``a``.

    ``a`` is the classifier teacher and ``b`` the LALM, matching ``fuse``.
    """
    if a.n_classes != b.n_classes:
        raise ShapeError(f"class-count mismatch: {a.n_classes} vs {b.n_classes}")
    if entropy(b.mean) < entropy(a.mean) - TIE_TOL:
        return FusedLabel(b.mean, "lm_only")
    return FusedLabel(a.mean, "cls_only")
