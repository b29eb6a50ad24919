"""Source training and teacher-student adaptation on unlabeled target data.

One adaptation step: draw a batch, run MC-dropout passes of the EMA teacher,
look up the cached LALM samples, fuse the two into soft targets, take an
AdamW step on soft cross-entropy plus the batch diversity term, then move
the EMA teacher toward the updated student. Training stops once the step
loss has not reached a new strict minimum for ``plateau_patience_steps``
steps, and the parameters from the best-loss step are returned.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import FeatureDataset
from .errors import ContractError, ValidationError
from .evalkit import report_from_predictions, unweighted_accuracy
from .fusion import PAPER_TAUS, FusionConfig, ablation_cells, fuse_batch
from .numkit import (
    AdamWState,
    MlpClassifier,
    adamw_step,
    backward,
    forward_batch,
    init_classifier,
    log_softmax,
    softmax,
)
from .teachers import (
    CacheOnlyProvider, EmaState, TeacherCache, ema_update, lalm_sample_matrix, mc_dropout_samples,
)
from .uncertainty import entropy, mutual_information

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TEACHER_MODES = ("both", "cls", "lm")
STOP_METRICS = ("train_loss", "dev_loss", "dev_ua")


@dataclass
class AdaptConfig:
    batch_size: int = 32
    dropout: float = 0.4
    weight_decay: float = 0.1
    teacher_lr: float = 5e-4
    student_lr: float = 5e-4
    student_lr_grid: tuple = (7.5e-4, 5e-4, 1e-4, 5e-5, 1e-6)
    plateau_patience_steps: int = 1000
    max_steps: int = 20000
    alpha_ema: float = 0.999
    lambda_div: float = 1.0
    n_lm: int = 5
    n_cls: int = 8
    lalm_temperature: float = 0.6
    hidden_dim: int = 256
    dev_every: int = 100
    checkpoint_every: int = 500
    stop_metric: str = "train_loss"  # or "dev_loss" / "dev_ua" (needs dev data)
    seed: int = 0

    def __post_init__(self):
        self.student_lr_grid = tuple(float(x) for x in self.student_lr_grid)
        positive = ("batch_size", "teacher_lr", "student_lr", "plateau_patience_steps", "max_steps",
                    "n_lm", "n_cls", "hidden_dim", "dev_every", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.weight_decay < 0 or self.lambda_div < 0 or self.lalm_temperature < 0:
            raise ValidationError("weight_decay, lambda_div and lalm_temperature must be >= 0")
        if not 0.0 <= self.alpha_ema < 1.0:
            raise ValidationError(f"alpha_ema must be in [0, 1), got {self.alpha_ema}")
        if self.stop_metric not in STOP_METRICS:
            raise ValidationError(f"stop_metric must be one of {STOP_METRICS}, got {self.stop_metric!r}")
        if self.stop_metric != "train_loss" and self.plateau_patience_steps % self.dev_every:
            raise ValidationError("plateau_patience_steps must be a multiple of dev_every when stopping on dev")
        if not self.student_lr_grid or any(x <= 0 for x in self.student_lr_grid):
            raise ValidationError("student_lr_grid must be nonempty and positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["student_lr_grid"] = list(self.student_lr_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown adapt config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# losses


def soft_cross_entropy(logits, target):
    """-sum target * log softmax(logits) and its gradient softmax - target.

    Works on the last axis; batched inputs give per-row losses.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    loss = -(target * log_softmax(logits)).sum(axis=-1)
    grad = softmax(logits) - target
    return (float(loss) if loss.ndim == 0 else loss), grad


def diversity_loss(batch_probs):
    """Negative entropy of the batch-mean prediction, with d/dp of each entry.

    Returns ``(loss, grad)`` where ``grad[i, c] = (ln pbar_c + 1) / B``.
    """
    p = np.asarray(batch_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValidationError(f"batch_probs must be [B, C] with B >= 1, got {p.shape}")
    b = p.shape[0]
    pbar = p.mean(axis=0)
    loss = -entropy(pbar)
    g = (np.log(np.maximum(pbar, np.finfo(float).tiny)) + 1.0) / b
    return float(loss), np.broadcast_to(g, p.shape).copy()


def adaptation_objective(logits, targets, lambda_div: float):
    """Mean soft CE over the batch plus ``lambda_div`` times the diversity loss.

    Returns ``(total, ce, div, grad_logits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    b = logits.shape[0]
    ce, g_ce = soft_cross_entropy(logits, targets)
    probs = softmax(logits)
    div, g_p = diversity_loss(probs)
    # chain through softmax: J^T g = p * (g - <p, g>)
    g_div = probs * (g_p - (probs * g_p).sum(axis=1, keepdims=True))
    grad = g_ce / b + lambda_div * g_div
    ce = float(np.mean(ce))
    return ce + lambda_div * div, ce, div, grad


# ----------------------------------------------------------------------------
# bookkeeping


@dataclass
class PlateauTracker:
    """Strict-new-minimum patience counter."""

    patience: int
    best_loss: float = math.inf
    best_step: int = -1
    steps_since_best: int = 0

    def update(self, step: int, loss: float) -> bool:
        """Record ``loss`` at ``step``; True once patience is exhausted."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_step = step
            self.steps_since_best = 0
        else:
            self.steps_since_best = step - self.best_step
        return self.steps_since_best >= self.patience

    @property
    def improved(self) -> bool:
        return self.steps_since_best == 0


class BatchSampler:
    """Shuffled passes over ``n`` items; the last batch of a pass may be short."""

    def __init__(self, n: int, batch_size: int, perm=None, pos: int = 0):
        self.n = n
        self.batch_size = batch_size
        self.perm = None if perm is None else np.asarray(perm, dtype=np.int64)
        self.pos = pos

    def next(self, rng) -> np.ndarray:
        if self.perm is None or self.pos >= self.n:
            self.perm = rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += len(idx)
        return idx

    def state(self) -> dict:
        return {"perm": None if self.perm is None else self.perm.tolist(), "pos": self.pos}


def _check_class_cover(data: FeatureDataset):
    data.require_labeled("training data")
    missing = sorted(set(range(data.n_classes)) - set(np.unique(data.labels).tolist()))
    if missing:
        names = [data.class_names[k] for k in missing]
        log.warning("training data has no samples for classes %s", names)


def train_source(data: FeatureDataset, config: AdaptConfig, rng=None,
                 callback: Optional[Callable[[int, float], None]] = None) -> MlpClassifier:
    """Fit a classifier on labeled source data with hard-label cross-entropy.

    Uses ``teacher_lr`` and the same plateau rule as adaptation; returns the
    parameters at the best-loss step.
    """
    _check_class_cover(data)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    model = init_classifier(data.feature_dim, config.hidden_dim, data.n_classes, rng,
                            n_layers=data.layer_count, dropout_rate=config.dropout)
    opt = AdamWState.zeros_like(model.params(), weight_decay=config.weight_decay)
    onehot = np.eye(data.n_classes)[data.labels]
    sampler = BatchSampler(len(data), config.batch_size)
    tracker = PlateauTracker(config.plateau_patience_steps)
    best = model
    for step in range(config.max_steps):
        idx = sampler.next(rng)
        logits, cache = forward_batch(model, data.features[idx], mode="train", rng=rng)
        losses, grad = soft_cross_entropy(logits, onehot[idx])
        loss = float(np.mean(losses))
        if callback is not None:
            callback(step, loss)
        stop = tracker.update(step, loss)
        if tracker.improved:
            best = model
        if stop:
            break
        params, opt = adamw_step(opt, model.params(), backward(model, cache, grad / len(idx)), config.teacher_lr)
        model = model.with_params(params)
    log.info("source training stopped at step %d (best %.4f at %d)", step, tracker.best_loss, tracker.best_step)
    return best


# ----------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptState:
    student: MlpClassifier
    ema_teacher: EmaState
    optimizer: AdamWState
    step: int
    tracker: PlateauTracker
    best_student: MlpClassifier
    metric_log: list = field(default_factory=list)  # (step, loss, dev_ua, dev_loss); dev values None off-schedule
    rng: np.random.Generator = None
    sampler: BatchSampler = None
    lr: float = 0.0
    done: bool = False

    @property
    def best_loss(self) -> float:
        return self.tracker.best_loss

    @property
    def steps_since_best(self) -> int:
        return self.tracker.steps_since_best

    def to_dict(self, extra: Optional[dict] = None) -> dict:
        doc = {
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "lr": self.lr,
            "done": self.done,
            "student": self.student.to_dict(),
            "best_student": self.best_student.to_dict(),
            "ema": {"alpha": self.ema_teacher.alpha, "teacher": self.ema_teacher.teacher.to_dict()},
            "optimizer": self.optimizer.to_dict(),
            "tracker": asdict(self.tracker),
            "metric_log": [list(e) for e in self.metric_log],
            "rng": self.rng.bit_generator.state,
            "sampler": self.sampler.state(),
        }
        if extra:
            doc.update(extra)
        return doc

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptState":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {d.get('version')!r}")
        rng = np.random.default_rng()
        rng.bit_generator.state = d["rng"]
        tracker = PlateauTracker(**d["tracker"])
        if tracker.best_loss is None:
            tracker.best_loss = math.inf
        sampler_state = d["sampler"]
        return cls(
            student=MlpClassifier.from_dict(d["student"]),
            ema_teacher=EmaState(MlpClassifier.from_dict(d["ema"]["teacher"]), d["ema"]["alpha"]),
            optimizer=AdamWState.from_dict(d["optimizer"]),
            step=int(d["step"]),
            tracker=tracker,
            best_student=MlpClassifier.from_dict(d["best_student"]),
            metric_log=[tuple(e) for e in d["metric_log"]],
            rng=rng,
            sampler=None if sampler_state is None else BatchSampler(0, 0, sampler_state["perm"], sampler_state["pos"]),
            lr=float(d["lr"]),
            done=bool(d["done"]),
        )


def save_checkpoint(state: AdaptState, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    doc = state.to_dict(extra)
    if math.isinf(doc["tracker"]["best_loss"]):
        doc["tracker"]["best_loss"] = None
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> AdaptState:
    return AdaptState.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_metrics(path, metric_log) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for step, loss, ua, dev_loss in metric_log:
            fh.write(json.dumps({"step": step, "loss": loss, "dev_ua": ua, "dev_loss": dev_loss}) + "\n")
    return path


def _dev_metrics(model: MlpClassifier, dev: FeatureDataset):
    """(unweighted accuracy, mean hard-label cross-entropy) in eval mode."""
    logits, _ = forward_batch(model, dev.features, mode="eval")
    ce = -log_softmax(logits)[np.arange(len(dev)), dev.labels]
    ua = report_from_predictions(dev.labels, np.argmax(logits, axis=1), dev.n_classes).unweighted_accuracy
    return ua, float(np.mean(ce))


def lalm_teacher_table(target: FeatureDataset, provider, cache: TeacherCache, fusion: FusionConfig,
                       config: AdaptConfig, max_workers: int = 1):
    """Per-utterance LALM (mean [N, C], MI [N]) under the fusion's generation mode."""
    single = fusion.generation == "single"
    samples = lalm_sample_matrix(
        provider, cache, target.ids, target.class_names,
        n_samples=1 if single else config.n_lm,
        temperature=0.0 if single else config.lalm_temperature,
        max_workers=max_workers,
    )
    return samples.mean(axis=1), mutual_information(samples)


def adapt_student(target_data: FeatureDataset, source_model: MlpClassifier, provider, cache: TeacherCache,
                  fusion: FusionConfig, config: AdaptConfig, dev_data: Optional[FeatureDataset] = None,
                  lr: Optional[float] = None, teachers: str = "both", checkpoint_dir=None,
                  resume: bool = False, trace: Optional[Callable] = None, max_workers: int = 1):
    """Adapt a copy of ``source_model`` to ``target_data``.

    ``teachers`` selects the supervision: ``"both"`` fuses per ``fusion``,
    ``"cls"`` uses only the MC-dropout EMA teacher, ``"lm"`` only the LALM.
    With ``checkpoint_dir`` the state is saved every ``checkpoint_every``
    steps (``checkpoint.json``), a ``final.json`` and ``metrics.jsonl`` are
    written at the end, and ``resume=True`` continues from the last
    checkpoint. ``trace(state)`` is called after every update.

    Returns ``(best_student, state)``.
    """
    if len(target_data) == 0:
        raise ValidationError("target data is empty")
    if teachers not in TEACHER_MODES:
        raise ValidationError(f"teachers must be one of {TEACHER_MODES}")
    if target_data.n_classes != source_model.n_classes:
        raise ValidationError(
            f"source model has {source_model.n_classes} classes, target manifest has {target_data.n_classes}"
        )
    if dev_data is not None:
        dev_data.require_labeled("dev data")
        if dev_data.class_names != target_data.class_names:
            raise ValidationError("dev and target class names differ")
    lr = config.student_lr if lr is None else lr
    n = len(target_data)
    x_all = target_data.features

    if teachers != "cls":
        lm_mean, lm_mi = lalm_teacher_table(target_data, provider, cache, fusion, config, max_workers)
    ckpt_path = final_path = None
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = checkpoint_dir / "checkpoint.json"
        final_path = checkpoint_dir / "final.json"

    if resume and ckpt_path is not None and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        state.sampler.n, state.sampler.batch_size = n, config.batch_size
        log.info("resumed adaptation at step %d", state.step)
    else:
        student = source_model.copy()
        student = MlpClassifier(student.w1, student.b1, student.w2, student.b2, config.dropout, student.layer_weights)
        state = AdaptState(
            student=student,
            ema_teacher=EmaState(student.copy(), config.alpha_ema),
            optimizer=AdamWState.zeros_like(student.params(), weight_decay=config.weight_decay),
            step=0,
            tracker=PlateauTracker(config.plateau_patience_steps),
            best_student=student,
            rng=np.random.default_rng(config.seed),
            sampler=BatchSampler(n, config.batch_size),
            lr=lr,
        )
    extra = {"fusion": fusion.to_dict(), "config": config.to_dict(), "teachers": teachers}
    watch_dev = dev_data is not None and config.stop_metric != "train_loss"

    while not state.done and state.step < config.max_steps:
        if ckpt_path is not None and state.step % config.checkpoint_every == 0 and state.step > 0:
            save_checkpoint(state, ckpt_path, extra)
        rng = state.rng
        idx = state.sampler.next(rng)
        x = x_all[idx]
        if teachers != "lm":
            cls_samples = mc_dropout_samples(state.ema_teacher.teacher, x, config.n_cls, rng)
            cls_mean = cls_samples.mean(axis=1)
        if teachers == "both":
            targets, _, _ = fuse_batch(cls_mean, mutual_information(cls_samples), lm_mean[idx], lm_mi[idx], fusion)
        elif teachers == "cls":
            targets = cls_mean
        else:
            targets = lm_mean[idx]

        student = state.student
        logits, cache_f = forward_batch(student, x, mode="train", rng=rng)
        loss, _, _, grad = adaptation_objective(logits, targets, config.lambda_div)

        dev_ua = dev_loss = None
        eval_step = dev_data is not None and state.step % config.dev_every == 0
        if eval_step:
            dev_ua, dev_loss = _dev_metrics(student, dev_data)
        state.metric_log.append((state.step, loss, dev_ua, dev_loss))
        if not watch_dev:
            stop = state.tracker.update(state.step, loss)
        elif eval_step:
            stop = state.tracker.update(state.step, dev_loss if config.stop_metric == "dev_loss" else -dev_ua)
        else:
            stop = False
        if state.tracker.improved and (eval_step or not watch_dev):
            state.best_student = student
        if stop:
            state.done = True
            break

        params, state.optimizer = adamw_step(state.optimizer, student.params(), backward(student, cache_f, grad), lr)
        state.student = student.with_params(params)
        state.ema_teacher = ema_update(state.ema_teacher, state.student)
        state.step += 1
        if trace is not None:
            trace(state)
    else:
        state.done = True

    if checkpoint_dir is not None:
        save_checkpoint(state, ckpt_path, extra)
        save_checkpoint(state, final_path, extra)
        write_metrics(checkpoint_dir / "metrics.jsonl", state.metric_log)
    log.info("adaptation stopped at step %d (best loss %.4f at %d)",
             state.step, state.tracker.best_loss, state.tracker.best_step)
    return state.best_student, state


def lr_scan(grid: Sequence[float], target_data, source_model, provider, cache, fusion, config,
            dev_data=None, **kwargs):
    """Run :func:`adapt_student` per learning rate and keep the best on dev UA.

    Ties go to the smaller learning rate. Returns ``(best_lr, best_student, runs)``
    where ``runs`` lists ``{"lr", "dev_ua", "steps"}`` per grid point.
    """
    if dev_data is None:
        raise ValidationError("lr_scan needs a labeled dev set")
    if not grid:
        raise ValidationError("learning-rate grid is empty")
    runs, best = [], None
    for lr in grid:
        student, state = adapt_student(target_data, source_model, provider, cache, fusion, config,
                                       dev_data=dev_data, lr=lr, **kwargs)
        ua = unweighted_accuracy(student, dev_data)
        runs.append({"lr": float(lr), "dev_ua": ua, "steps": state.step})
        if best is None or ua > best[0] or (ua == best[0] and lr < best[1]):
            best = (ua, lr, student)
    return best[1], best[2], runs


def run_ablation(target_data, source_model, cache: TeacherCache, config: AdaptConfig, dev_data,
                 eval_data=None, out_dir=None, taus: Sequence[float] = PAPER_TAUS, progress=None):
    """Adapt once per fusion cell of the ablation grid, from the cache only.

    KL cells are run once per ``tau`` and keep the tau with the best dev UA
    (ties go to the smaller tau). A missing cache entry raises
    :class:`MissingCacheEntry` instead of reaching any provider. Returns
    one dict per cell with ``generation``, ``gate``, ``weighting``, ``tau``,
    ``dev_ua`` and, when ``eval_data`` is given, ``target_ua``.
    """
    if dev_data is None:
        raise ValidationError("the ablation needs a labeled dev set to choose tau")
    provider = CacheOnlyProvider()
    rows = []
    for generation, gate, weighting in ablation_cells():
        best = None
        for tau in (taus if gate == "kl" else (None,)):
            fusion = FusionConfig(generation, gate, weighting, tau, allow_free_tau=True)
            cell_dir = None
            if out_dir is not None:
                cell_dir = Path(out_dir) / fusion.label.replace("/", "_").replace("=", "")
            student, state = adapt_student(target_data, source_model, provider, cache, fusion, config,
                                           dev_data=dev_data, checkpoint_dir=cell_dir)
            row = {"generation": generation, "gate": gate, "weighting": weighting, "tau": tau,
                   "dev_ua": unweighted_accuracy(student, dev_data), "steps": state.step,
                   "best_step": state.tracker.best_step}
            if eval_data is not None:
                row["target_ua"] = unweighted_accuracy(student, eval_data)
            if progress is not None:
                progress(row)
            if best is None or row["dev_ua"] > best["dev_ua"]:
                best = row
        rows.append(best)
    return rows
