"""Feature datasets on disk, stratified splits, and a synthetic shift benchmark.

File format (UTF-8, LF): the first line is ``{"manifest": {...}}`` with
``class_names``, ``feature_dim`` and ``layer_count``; each following line is
one record ``{"id": ..., "features": [...], "label": k}`` with ``label``
omitted for unlabeled records. Features are a flat ``[D]`` list when
``layer_count == 1`` and ``[L][D]`` otherwise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DatasetError, ValidationError

DEFAULT_EMOTIONS = ("happy", "sad", "angry", "neutral")
UNLABELED = -1


@dataclass
class FeatureDataset:
    class_names: Tuple[str, ...]
    ids: list
    features: np.ndarray  # [N, D] or [N, L, D]
    labels: np.ndarray  # [N] int, -1 where unlabeled
    layer_count: int = 1

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        self.ids = [str(i) for i in self.ids]
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = len(self.ids)
        if len(self.class_names) < 2:
            raise DatasetError("need at least two classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be unique")
        want_ndim = 2 if self.layer_count == 1 else 3
        if n and self.features.ndim != want_ndim:
            raise DatasetError(f"features must be {want_ndim}-D for layer_count={self.layer_count}")
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise DatasetError("ids, features and labels disagree in length")
        if self.layer_count > 1 and n and self.features.shape[1] != self.layer_count:
            raise DatasetError(f"features have {self.features.shape[1]} layers, manifest says {self.layer_count}")
        seen = set()
        for i in self.ids:
            if i in seen:
                raise DatasetError(f"duplicate id {i!r}")
            seen.add(i)
        bad = (self.labels < UNLABELED) | (self.labels >= len(self.class_names))
        if np.any(bad):
            raise DatasetError(f"label out of range for id {self.ids[int(np.argmax(bad))]!r}")

    def __len__(self):
        return len(self.ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[-1]

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.labels >= 0))

    def label_map(self) -> dict:
        return {i: int(y) for i, y in zip(self.ids, self.labels) if y >= 0}

    def subset(self, indices) -> "FeatureDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureDataset(
            self.class_names,
            [self.ids[i] for i in idx],
            self.features[idx],
            self.labels[idx],
            self.layer_count,
        )

    def unlabeled(self) -> "FeatureDataset":
        return FeatureDataset(
            self.class_names, list(self.ids), self.features.copy(),
            np.full(len(self), UNLABELED), self.layer_count,
        )

    def require_labeled(self, what="dataset"):
        if not self.labeled:
            raise ValidationError(f"{what} must be nonempty and fully labeled")


def save_dataset(ds: FeatureDataset, path) -> Path:
    path = Path(path)
    manifest = {
        "class_names": list(ds.class_names),
        "feature_dim": int(ds.features.shape[-1]),
        "layer_count": ds.layer_count,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"manifest": manifest}) + "\n")
        for uid, feats, y in zip(ds.ids, ds.features, ds.labels):
            rec = {"id": uid, "features": feats.tolist()}
            if y >= 0:
                rec["label"] = int(y)
            fh.write(json.dumps(rec) + "\n")
    return path


def load_dataset(path) -> FeatureDataset:
    """Read and validate a dataset file; errors name the offending line or id."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise DatasetError("missing manifest line", line=1)
    try:
        manifest = json.loads(lines[0])["manifest"]
        class_names = [str(c) for c in manifest["class_names"]]
        dim = int(manifest["feature_dim"])
        n_layers = int(manifest.get("layer_count", 1))
    except Exception as exc:
        raise DatasetError(f"bad manifest ({exc})", line=1) from exc
    shape = (dim,) if n_layers == 1 else (n_layers, dim)
    ids, feats, labels, seen = [], [], [], set()
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            uid = str(rec["id"])
            x = np.asarray(rec["features"], dtype=np.float64)
        except Exception as exc:
            raise DatasetError(f"bad record ({exc})", line=lineno) from exc
        if uid in seen:
            raise DatasetError(f"duplicate id {uid!r}", line=lineno)
        if x.shape != shape:
            raise DatasetError(f"id {uid!r}: features have shape {x.shape}, expected {shape}", line=lineno)
        y = rec.get("label")
        if y is None:
            y = UNLABELED
        elif isinstance(y, bool) or not isinstance(y, int) or not 0 <= y < len(class_names):
            raise DatasetError(f"id {uid!r}: label {y!r} out of range", line=lineno)
        seen.add(uid)
        ids.append(uid)
        feats.append(x)
        labels.append(y)
    features = np.stack(feats) if feats else np.zeros((0,) + shape)
    return FeatureDataset(class_names, ids, features, np.asarray(labels, dtype=np.int64), n_layers)


def split(ds: FeatureDataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Seeded (train, dev, test) partition, stratified by label when labels exist.

    Per stratum, counts follow largest-remainder rounding of the fractions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    strata = [np.flatnonzero(ds.labels == k) for k in np.unique(ds.labels)] if len(ds) else []
    parts = [[], [], []]
    for idx in strata:
        idx = rng.permutation(idx)
        raw = np.asarray(fractions) * len(idx)
        counts = np.floor(raw).astype(int)
        short = len(idx) - counts.sum()
        for j in np.argsort(-(raw - counts), kind="stable")[:short]:
            counts[j] += 1
        bounds = np.cumsum(counts)[:-1]
        for part, chunk in zip(parts, np.split(idx, bounds)):
            part.extend(chunk.tolist())
    return tuple(ds.subset(sorted(p)) for p in parts)


# ----------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SynthShiftSpec:
    """Gaussian class blobs in a source domain and a shifted target domain.

    Class means sit on a random orthonormal frame, centred, with pairwise
    distance ``separation``; noise is unit isotropic. The target applies
    ``noise_scale`` to the noise, rotates by ``rotation_deg`` inside a random
    2-D plane and adds ``mean_offset`` (a magnitude along a random unit vector,
    or an explicit vector).
    """

    n_classes: int = 4
    feature_dim: int = 16
    samples_per_class: int = 500
    separation: float = 3.0
    mean_offset: object = 1.5
    rotation_deg: float = 25.0
    noise_scale: float = 1.3
    layer_count: int = 1
    seed: int = 0
    class_names: Optional[Sequence[str]] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if self.feature_dim < max(2, self.n_classes):
            raise ValidationError("feature_dim too small for the class frame")
        if not self.separation > 0:
            raise ValidationError("separation must be > 0")
        if self.samples_per_class < 8:
            raise ValidationError("samples_per_class must be >= 8")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if self.layer_count < 1:
            raise ValidationError("layer_count must be >= 1")
        if not np.isscalar(self.mean_offset):
            off = np.asarray(self.mean_offset, dtype=np.float64)
            if off.shape != (self.feature_dim,):
                raise ValidationError(f"mean_offset vector must have length {self.feature_dim}")
        if self.class_names is None:
            self.class_names = (
                DEFAULT_EMOTIONS if self.n_classes == 4 else tuple(f"class_{k}" for k in range(self.n_classes))
            )
        elif len(self.class_names) != self.n_classes:
            raise ValidationError("class_names length must equal n_classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        if not np.isscalar(self.mean_offset):
            d["mean_offset"] = list(map(float, self.mean_offset))
        d["class_names"] = list(self.class_names)
        return d


def _orthonormal(rng, d, k):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return q[:, :k]


def generate_synth_shift(spec: SynthShiftSpec):
    """Build (source labeled, target labeled, target unlabeled) datasets."""
    rng = np.random.default_rng(spec.seed)
    c, d, n = spec.n_classes, spec.feature_dim, spec.samples_per_class
    frame = _orthonormal(rng, d, c)
    means = (spec.separation / math.sqrt(2.0)) * frame.T
    means = means - means.mean(axis=0)

    plane = _orthonormal(rng, d, 2)
    u, v = plane[:, 0], plane[:, 1]
    theta = math.radians(spec.rotation_deg)
    rot = (
        np.eye(d)
        + (math.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + math.sin(theta) * (np.outer(v, u) - np.outer(u, v))
    )
    if np.isscalar(spec.mean_offset):
        direction = rng.standard_normal(d)
        offset = float(spec.mean_offset) * direction / np.linalg.norm(direction)
    else:
        offset = np.asarray(spec.mean_offset, dtype=np.float64)

    def draw(prefix, transform):
        labels = np.repeat(np.arange(c), n)
        if spec.layer_count == 1:
            x = transform(means[labels], rng.standard_normal((c * n, d)))
        else:
            x = np.stack(
                [transform(means[labels], rng.standard_normal((c * n, d))) for _ in range(spec.layer_count)],
                axis=1,
            )
        order = rng.permutation(c * n)
        ids = [f"{prefix}-{i:05d}" for i in range(c * n)]
        return FeatureDataset(spec.class_names, ids, x[order], labels[order], spec.layer_count)

    source = draw("src", lambda mu, z: mu + z)
    target = draw("tgt", lambda mu, z: (mu + spec.noise_scale * z) @ rot.T + offset)
    return source, target, target.unlabeled()


def write_synth_shift(spec: SynthShiftSpec, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target, target_unl = generate_synth_shift(spec)
    return {
        "source": save_dataset(source, out_dir / "source.jsonl"),
        "target_labeled": save_dataset(target, out_dir / "target_labeled.jsonl"),
        "target_unlabeled": save_dataset(target_unl, out_dir / "target_unlabeled.jsonl"),
    }
