"""The two teachers: an MC-dropout classifier (EMA-tracked) and a black-box LALM.

LALM access goes through a provider object with a single ``sample`` method.
Three providers ship here: an HTTP client for the JSON wire protocol, a
cache-only replayer, and a synthetic noisy oracle for offline runs.
Every LALM answer is written to an append-only :class:`TeacherCache`.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import ContractError, MissingCacheEntry, ShapeError, TransportError, ValidationError
from .numkit import MlpClassifier, forward_batch, softmax
from .uncertainty import ProbDist, TeacherSampleSet

log = logging.getLogger(__name__)

_SAMPLE_TAG, _UTTERANCE_TAG, _PROJECTION_TAG = 1, 2, 3


class LalmProvider(Protocol):
    calls: int

    def sample(self, utterance_id: str, class_names: Sequence[str], temperature: float,
               sample_index: int) -> ProbDist:
        ...


# ----------------------------------------------------------------------------
# response parsing


@dataclass
class ParseStats:
    parsed: int = 0
    failures: int = 0


def parse_lalm_response(payload, class_names: Sequence[str], stats: Optional[ParseStats] = None) -> ProbDist:
    """Turn a ``{"probs": {class: number}}`` payload into a ProbDist.

    Never raises. Negative numbers clip to 0, missing classes count as 0,
    and anything unusable (bad JSON, no positive mass) falls back to uniform
    with a warning; ``stats.failures`` counts those fallbacks.
    """
    c = len(class_names)
    try:
        obj = json.loads(payload) if isinstance(payload, (str, bytes)) else payload
        table = obj["probs"]
        if not isinstance(table, dict):
            raise TypeError("probs is not an object")
        vals = np.zeros(c)
        for i, name in enumerate(class_names):
            v = table.get(name, 0.0)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeError(f"non-numeric probability for {name!r}")
            vals[i] = v
        vals = np.where(np.isfinite(vals), vals, 0.0)
        vals = np.clip(vals, 0.0, None)
        total = vals.sum()
        if not total > 0:
            raise ValueError("no positive probability mass")
    except Exception as exc:  # any malformed payload degrades to uniform
        if stats is not None:
            stats.failures += 1
        snippet = str(payload)[:80]
        log.warning("unparseable LALM response (%s): %r", exc, snippet)
        return ProbDist.uniform(c)
    if stats is not None:
        stats.parsed += 1
    return ProbDist(vals / total)


# ----------------------------------------------------------------------------
# cache


class TeacherCache:
    """Append-only map (utterance_id, sample_index) -> ProbDist.

    With a path, existing records are loaded on construction and every new
    entry is appended as one JSON line. Reads are lock-free; appends are
    serialized.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._data: dict = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                        key = (str(rec["utterance_id"]), int(rec["sample_index"]))
                        probs = ProbDist(rec["probs"])
                    except Exception as exc:
                        raise ValidationError(f"{self.path}:{lineno}: bad cache record ({exc})") from exc
                    self._data[key] = probs

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, utterance_id: str, sample_index: int) -> Optional[ProbDist]:
        return self._data.get((utterance_id, sample_index))

    def put(self, utterance_id: str, sample_index: int, dist: ProbDist) -> None:
        key = (utterance_id, int(sample_index))
        with self._lock:
            if key in self._data:
                raise ContractError(f"cache key {key} already written")
            self._data[key] = dist
            if self.path is not None:
                rec = {"utterance_id": key[0], "sample_index": key[1], "probs": dist.probs.tolist()}
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps(rec) + "\n")

    def keys(self):
        return self._data.keys()


# ----------------------------------------------------------------------------
# providers


class CacheOnlyProvider:
    """Provider that knows nothing; any call means the cache was incomplete."""

    def __init__(self):
        self.calls = 0

    def sample(self, utterance_id, class_names, temperature, sample_index):
        self.calls += 1
        raise MissingCacheEntry(utterance_id, sample_index)


@dataclass(frozen=True)
class NoisyOracleConfig:
    accuracy: float = 0.7
    concentration: float = 5.0
    seed: int = 0
    persistence: float = 0.8
    error_model: str = "feature"  # "feature" | "independent"

    def __post_init__(self):
        if not 0.0 < self.accuracy <= 1.0:
            raise ValidationError(f"oracle accuracy must be in (0, 1], got {self.accuracy}")
        if not self.concentration > 0:
            raise ValidationError(f"oracle concentration must be > 0, got {self.concentration}")
        if not 0.0 <= self.persistence <= 1.0:
            raise ValidationError(f"oracle persistence must be in [0, 1], got {self.persistence}")
        if self.error_model not in ("feature", "independent"):
            raise ValidationError(f"error_model must be 'feature' or 'independent', got {self.error_model!r}")


class NoisyOracle:
    """Synthetic LALM stand-in that knows the true labels.

    Every utterance has a persistent mode. Each sample uses it with
    probability ``persistence`` and otherwise draws a fresh mode: the true
    label with probability ``accuracy``, else a uniformly chosen wrong class.

    The persistent mode comes from the error model:

    * ``"independent"``: a fresh-style draw per utterance, so mistakes are
      unrelated to the input.
    * ``"feature"``: needs ``features``. Within each class, the ``1 - accuracy``
      fraction of utterances scoring lowest on a seeded random projection get
      the next class (cyclically) as a systematic confusion. Errors then
      cluster in feature space, which a student cannot average away.

    Either way the per-sample accuracy is ``accuracy`` up to rounding.

    The emitted distribution is a flat Dirichlet draw raised to the power
    ``concentration`` and renormalized, with its largest entry swapped onto
    the mode, so the argmax is always the mode. ``concentration=inf`` emits
    one-hots. Draws are keyed by (seed, utterance_id, sample_index), so a key
    always gets the same answer. Temperature is not modelled.
    """

    def __init__(self, config: NoisyOracleConfig, labels: Mapping[str, int],
                 features: Optional[Mapping[str, np.ndarray]] = None):
        self.config = config
        self.labels = dict(labels)
        self.calls = 0
        self._modes = None
        if config.error_model == "feature":
            if features is None:
                raise ValidationError("the feature error model needs per-utterance features")
            self._modes = self._feature_modes(features)

    @classmethod
    def from_dataset(cls, config: NoisyOracleConfig, data) -> "NoisyOracle":
        data.require_labeled("oracle dataset")
        feats = data.features.reshape(len(data), -1)
        return cls(config, data.label_map(), dict(zip(data.ids, feats)))

    def _feature_modes(self, features) -> dict:
        ids = sorted(self.labels)
        missing = [i for i in ids if i not in features]
        if missing:
            raise ValidationError(f"no features for utterance {missing[0]!r}")
        x = np.stack([np.asarray(features[i], dtype=np.float64).ravel() for i in ids])
        direction = np.random.default_rng([self.config.seed, _PROJECTION_TAG]).standard_normal(x.shape[1])
        score = x @ direction
        y = np.array([self.labels[i] for i in ids])
        modes = {}  # wrong modes are stored as k + 1 and wrapped by the class count in sample()
        for k in np.unique(y):
            idx = np.flatnonzero(y == k)
            order = idx[np.argsort(score[idx], kind="stable")]
            n_wrong = int(round((1.0 - self.config.accuracy) * len(idx)))
            for j, i in enumerate(order):
                modes[ids[i]] = int(k) + 1 if j < n_wrong else int(k)
        return modes

    def sample(self, utterance_id, class_names, temperature, sample_index):
        self.calls += 1
        c = len(class_names)
        y = int(self.labels[utterance_id])
        key = zlib.crc32(utterance_id.encode())
        # streams end in a non-zero tag: SeedSequence ignores trailing zeros,
        # so [seed, key, 0] would otherwise alias [seed, key]
        rng = np.random.default_rng([self.config.seed, key, int(sample_index), _SAMPLE_TAG])
        if rng.random() < self.config.persistence:
            if self._modes is not None:
                mode = self._modes[utterance_id] % c
            else:
                mode = self._draw_mode(np.random.default_rng([self.config.seed, key, _UTTERANCE_TAG]), y, c)
        else:
            mode = self._draw_mode(rng, y, c)
        if math.isinf(self.config.concentration):
            p = np.zeros(c)
            p[mode] = 1.0
            return ProbDist(p)
        # flat Dirichlet via unit gammas, sharpened in log space
        p = softmax(self.config.concentration * np.log(rng.standard_gamma(1.0, c)))
        top = int(np.argmax(p))
        p[[top, mode]] = p[[mode, top]]
        return ProbDist(p)

    def _draw_mode(self, rng, y, c):
        if rng.random() < self.config.accuracy:
            return y
        others = [k for k in range(c) if k != y]
        return others[int(rng.integers(len(others)))]


class HttpLalmProvider:
    """Client for ``POST {base_url}/v1/predict``.

    Non-200 answers and connection errors are retried ``max_retries`` times
    with exponential backoff starting at ``backoff`` seconds, then surface as
    :class:`TransportError`. Bodies that arrive but do not parse fall back to
    uniform via :func:`parse_lalm_response`.
    """

    def __init__(self, base_url: str, token: Optional[str] = None, max_retries: int = 3,
                 backoff: float = 1.0, timeout: float = 30.0, session=None, sleep=time.sleep):
        import requests

        self.url = base_url.rstrip("/") + "/v1/predict"
        self.token = token
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self.sleep = sleep
        self.stats = ParseStats()
        self.calls = 0
        self._exc = requests.RequestException

    def sample(self, utterance_id, class_names, temperature, sample_index):
        self.calls += 1
        body = {
            "utterance_id": utterance_id,
            "classes": list(class_names),
            "temperature": float(temperature),
            "sample_index": int(sample_index),
        }
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
            except self._exc as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 200:
                return parse_lalm_response(resp.text, class_names, self.stats)
            last = f"HTTP {resp.status_code}"
        raise TransportError(
            f"LALM request for ({utterance_id!r}, {sample_index}) failed after "
            f"{self.max_retries + 1} attempts: {last}"
        )


# ----------------------------------------------------------------------------
# teacher predictions


def lalm_predict(provider: LalmProvider, cache: TeacherCache, utterance_id: str,
                 class_names: Sequence[str], n_samples: int = 5, temperature: float = 0.6) -> TeacherSampleSet:
    """Cache-first LALM sample set for one utterance.

    Temperature 0 means a single deterministic generation (sample_index 0).
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if temperature < 0:
        raise ValidationError("temperature must be >= 0")
    if temperature == 0:
        n_samples = 1
    rows = []
    for idx in range(n_samples):
        dist = cache.get(utterance_id, idx)
        if dist is None:
            dist = provider.sample(utterance_id, class_names, temperature, idx)
            if len(dist) != len(class_names):
                raise ShapeError(f"provider returned {len(dist)} classes, expected {len(class_names)}")
            cache.put(utterance_id, idx, dist)
        rows.append(dist.probs)
    return TeacherSampleSet.from_samples(np.stack(rows))


def lalm_sample_matrix(provider: LalmProvider, cache: TeacherCache, utterance_ids: Sequence[str],
                       class_names: Sequence[str], n_samples: int = 5, temperature: float = 0.6,
                       max_workers: int = 1) -> np.ndarray:
    """LALM samples for many utterances as an array [N, K, C].

    With ``max_workers > 1`` uncached utterances are queried concurrently.
    Results do not depend on the worker count.
    """

    def one(uid):
        return lalm_predict(provider, cache, uid, class_names, n_samples, temperature).samples

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            out = list(pool.map(one, utterance_ids))
    else:
        out = [one(uid) for uid in utterance_ids]
    k = 1 if temperature == 0 else n_samples
    if not out:
        return np.zeros((0, k, len(class_names)))
    return np.stack(out)


def mc_dropout_samples(teacher: MlpClassifier, x, n_passes: int, rng, return_cache=False):
    """Train-mode passes for a batch: returns probabilities [B, n_passes, C].

    Masks are drawn in one block ordered (input, pass).
    """
    if n_passes < 1:
        raise ValidationError("n_passes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    rep = np.repeat(x, n_passes, axis=0)
    logits, cache = forward_batch(teacher, rep, mode="train", rng=rng)
    probs = softmax(logits).reshape(b, n_passes, -1)
    return (probs, cache) if return_cache else probs


def mc_dropout_predict(teacher: MlpClassifier, x, n_passes: int = 8, rng=None,
                       return_masks=False) -> TeacherSampleSet:
    """MC-dropout sample set for one input ``x`` ([D] or [L, D])."""
    if n_passes > 1 and teacher.dropout_rate == 0:
        warnings.warn("dropout_rate is 0: MC-dropout passes are identical and MI is 0", stacklevel=2)
    if rng is None and teacher.dropout_rate > 0:
        raise ContractError("mc_dropout_predict needs an rng")
    x = np.asarray(x, dtype=np.float64)
    probs, cache = mc_dropout_samples(teacher, x[None], n_passes, rng, return_cache=True)
    sset = TeacherSampleSet.from_samples(probs[0])
    return (sset, cache.dropout_mask) if return_masks else sset


# ----------------------------------------------------------------------------
# EMA teacher


@dataclass
class EmaState:
    teacher: MlpClassifier
    alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValidationError(f"EMA alpha must be in [0, 1), got {self.alpha}")


def ema_update(ema: EmaState, student) -> EmaState:
    """teacher <- alpha * teacher + (1 - alpha) * student, per parameter."""
    s_params = student.params() if isinstance(student, MlpClassifier) else student
    t_params = ema.teacher.params()
    if set(s_params) != set(t_params):
        raise ContractError(f"parameter sets differ: {sorted(s_params)} vs {sorted(t_params)}")
    a = ema.alpha
    new = {}
    for k, t in t_params.items():
        s = np.asarray(s_params[k])
        if s.shape != t.shape:
            raise ContractError(f"shape mismatch for {k}: teacher {t.shape}, student {s.shape}")
        # clip only absorbs last-ulp rounding so the result stays between t and s
        new[k] = np.clip(a * t + (1.0 - a) * s, np.minimum(t, s), np.maximum(t, s))
    return EmaState(ema.teacher.with_params(new), a)
