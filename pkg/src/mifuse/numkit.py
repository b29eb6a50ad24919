"""Small dense classifier with hand-written backprop and AdamW.

The classifier is fixed: an optional softmax-weighted sum over stacked
input layers, one hidden affine + relu + inverted dropout, and an output
affine. Everything is float64 numpy. Parameters are treated as immutable
values: optimizer and EMA updates build new arrays, which is what lets
``backward`` detect a cache produced against older parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContractError, InputError, ShapeError, TrainingAborted

Params = Dict[str, np.ndarray]

PARAM_NAMES = ("layer_weights", "w1", "b1", "w2", "b2")


@dataclass
class MlpClassifier:
    w1: np.ndarray  # [H, D]
    b1: np.ndarray  # [H]
    w2: np.ndarray  # [C, H]
    b2: np.ndarray  # [C]
    dropout_rate: float = 0.4
    layer_weights: Optional[np.ndarray] = None  # [L] aggregation logits, None when L == 1

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.layer_weights is not None:
            self.layer_weights = np.asarray(self.layer_weights, dtype=np.float64)
            if self.layer_weights.ndim != 1 or self.layer_weights.size < 2:
                raise ShapeError("layer_weights must be a vector of length L >= 2")
        h, d = self.w1.shape
        c = self.w2.shape[0]
        if self.b1.shape != (h,) or self.w2.shape != (c, h) or self.b2.shape != (c,):
            raise ShapeError(
                f"inconsistent parameter shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        if c < 2 or h < 1 or d < 1:
            raise ShapeError(f"need C >= 2, H >= 1, D >= 1 (got C={c}, H={h}, D={d})")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InputError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise InputError(f"parameter {name} has non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def n_layers(self) -> int:
        return 1 if self.layer_weights is None else self.layer_weights.size

    def params(self) -> Params:
        out = {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}
        if self.layer_weights is not None:
            out["layer_weights"] = self.layer_weights
        return out

    def with_params(self, params: Params) -> "MlpClassifier":
        return MlpClassifier(
            w1=params["w1"],
            b1=params["b1"],
            w2=params["w2"],
            b2=params["b2"],
            dropout_rate=self.dropout_rate,
            layer_weights=params.get("layer_weights"),
        )

    def copy(self) -> "MlpClassifier":
        return self.with_params({k: v.copy() for k, v in self.params().items()})

    def to_dict(self) -> dict:
        out = {k: v.tolist() for k, v in self.params().items()}
        out["dropout_rate"] = self.dropout_rate
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MlpClassifier":
        return cls(
            w1=d["w1"],
            b1=d["b1"],
            w2=d["w2"],
            b2=d["b2"],
            dropout_rate=float(d["dropout_rate"]),
            layer_weights=d.get("layer_weights"),
        )


def init_classifier(input_dim, hidden_dim, n_classes, rng, n_layers=1, dropout_rate=0.4):
    """Glorot-uniform weights, zero biases, uniform layer aggregation."""

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return MlpClassifier(
        w1=glorot(hidden_dim, input_dim),
        b1=np.zeros(hidden_dim),
        w2=glorot(n_classes, hidden_dim),
        b2=np.zeros(n_classes),
        dropout_rate=dropout_rate,
        layer_weights=np.zeros(n_layers) if n_layers > 1 else None,
    )


def softmax(logits):
    """Max-shifted softmax over the last axis. Returns a plain array."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ForwardCache:
    """Activations from one (batched) forward pass, kept for ``backward``."""

    inputs: np.ndarray  # [B, D] or [B, L, D]
    layer_probs: Optional[np.ndarray]  # [L]
    aggregated_input: np.ndarray  # [B, D]
    pre_activation: np.ndarray  # [B, H]
    post_activation: np.ndarray  # [B, H] after relu and dropout
    dropout_mask: np.ndarray  # [B, H], 0 or 1/(1-rate)
    logits: np.ndarray  # [B, C]
    single: bool = False
    _param_refs: tuple = field(default=(), repr=False)


def _check_batch(model: MlpClassifier, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (model.input_dim,) if model.n_layers == 1 else (model.n_layers, model.input_dim)
    if x.ndim != len(want) + 1 or x.shape[1:] != want:
        raise ShapeError(f"expected input of shape [B, {', '.join(map(str, want))}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("input features contain non-finite values")
    return x


def forward_batch(model: MlpClassifier, x, mode="eval", rng=None, mask=None):
    """Forward a batch. ``x`` is [B, D] (L == 1) or [B, L, D].

    In train mode a fresh inverted-dropout mask is drawn from ``rng`` unless
    ``mask`` is given explicitly.
    """
    x = _check_batch(model, x)
    if model.layer_weights is None:
        layer_probs = None
        agg = x
    else:
        layer_probs = softmax(model.layer_weights)
        agg = np.einsum("l,bld->bd", layer_probs, x)
    pre = agg @ model.w1.T + model.b1
    hidden = np.maximum(pre, 0.0)
    if mask is None:
        if mode == "train" and model.dropout_rate > 0.0:
            if rng is None:
                raise ContractError("train-mode forward needs an rng")
            keep = 1.0 - model.dropout_rate
            mask = (rng.random(hidden.shape) < keep) / keep
        elif mode in ("train", "eval"):
            mask = np.ones_like(hidden)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != hidden.shape:
            raise ShapeError(f"dropout mask shape {mask.shape} != hidden shape {hidden.shape}")
    post = hidden * mask
    logits = post @ model.w2.T + model.b2
    refs = tuple(model.params()[k] for k in sorted(model.params()))
    cache = ForwardCache(x, layer_probs, agg, pre, post, mask, logits, _param_refs=refs)
    return logits, cache


def forward(model: MlpClassifier, x, mode="eval", rng=None, mask=None):
    """Forward a single example ``x`` ([D] or [L, D]); returns (logits [C], cache)."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)[None]
    logits, cache = forward_batch(model, x[None], mode=mode, rng=rng, mask=mask)
    cache.single = True
    return logits[0], cache


def backward(model: MlpClassifier, cache: ForwardCache, grad_logits) -> Params:
    """Gradients of a scalar loss w.r.t. every parameter.

    ``grad_logits`` is dLoss/dlogits, shaped like the cached logits ([C] for a
    single-example cache, [B, C] for a batch). Batch gradients are summed.
    """
    refs = tuple(model.params()[k] for k in sorted(model.params()))
    if len(refs) != len(cache._param_refs) or any(a is not b for a, b in zip(refs, cache._param_refs)):
        raise ContractError("forward cache was produced with different parameters")
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.single:
        g = g[None]
    if g.shape != cache.logits.shape:
        raise ShapeError(f"grad_logits shape {g.shape} != logits shape {cache.logits.shape}")

    grads = {
        "w2": g.T @ cache.post_activation,
        "b2": g.sum(axis=0),
    }
    g_pre = (g @ model.w2) * cache.dropout_mask * (cache.pre_activation > 0.0)
    grads["w1"] = g_pre.T @ cache.aggregated_input
    grads["b1"] = g_pre.sum(axis=0)
    if model.layer_weights is not None:
        g_agg = g_pre @ model.w1  # [B, D]
        s = np.einsum("bd,bld->bl", g_agg, cache.inputs)
        a = cache.layer_probs
        grads["layer_weights"] = (a * (s - (s @ a)[:, None])).sum(axis=0)
    return grads


def predict_proba(model: MlpClassifier, x) -> np.ndarray:
    """Eval-mode class probabilities for a batch."""
    logits, _ = forward_batch(model, x, mode="eval")
    return softmax(logits)


@dataclass
class AdamWState:
    m: Params
    v: Params
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.1

    @classmethod
    def zeros_like(cls, params: Params, **kwargs) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )

    def to_dict(self) -> dict:
        return {
            "m": {k: a.tolist() for k, a in self.m.items()},
            "v": {k: a.tolist() for k, a in self.v.items()},
            "step_count": self.step_count,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamWState":
        return cls(
            m={k: np.asarray(a, dtype=np.float64) for k, a in d["m"].items()},
            v={k: np.asarray(a, dtype=np.float64) for k, a in d["v"].items()},
            step_count=int(d["step_count"]),
            beta1=d["beta1"],
            beta2=d["beta2"],
            epsilon=d["epsilon"],
            weight_decay=d["weight_decay"],
        )


def adamw_step(state: AdamWState, params: Params, grads: Params, lr: float):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are untouched.

    Decoupled decay is applied to the post-Adam value: theta -= lr * wd * theta.
    """
    if lr <= 0:
        raise InputError(f"learning rate must be positive, got {lr}")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and optimizer state have different keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"grad {k} has shape {g.shape}, param has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingAborted(
                f"non-finite gradient for {k!r} at optimizer step {state.step_count + 1} "
                f"({bad} bad entries, max |finite| = {np.nanmax(np.abs(np.where(np.isfinite(g), g, 0.0))):.3g})"
            )
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p = p - lr * state.weight_decay * p
        new_params[k], new_m[k], new_v[k] = p, m, v
    new_state = AdamWState(
        new_m, new_v, t, state.beta1, state.beta2, state.epsilon, state.weight_decay
    )
    return new_params, new_state
