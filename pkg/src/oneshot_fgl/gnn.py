"""Two-layer GCN and SGC with hand-written backward passes, losses and Adam.

All arithmetic is float64.  ``a_norm`` is always the augmented normalised
adjacency (scipy sparse or dense ndarray).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

ARCHS = ("gcn2", "sgc")


class TrainingError(FloatingPointError):
    """Raised when a gradient or loss becomes non-finite."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "gcn2"
    hidden: int = 64
    k: int = 2

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.hidden < 1 or self.k < 0:
            raise ValueError("hidden must be >= 1 and k >= 0")


@dataclass
class GnnModel:
    spec: ModelSpec
    in_dim: int
    num_classes: int
    params: dict[str, np.ndarray]

    @property
    def arch(self) -> str:
        return self.spec.arch

    def copy(self) -> "GnnModel":
        return GnnModel(self.spec, self.in_dim, self.num_classes,
                        {k: v.copy() for k, v in self.params.items()})


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(spec: ModelSpec, in_dim: int, num_classes: int, seed: int) -> GnnModel:
    rng = np.random.default_rng(seed)
    if spec.arch == "gcn2":
        params = {
            "W1": _glorot(rng, in_dim, spec.hidden),
            "b1": np.zeros(spec.hidden),
            "W2": _glorot(rng, spec.hidden, num_classes),
            "b2": np.zeros(num_classes),
        }
    else:
        params = {"W": _glorot(rng, in_dim, num_classes), "b": np.zeros(num_classes)}
    return GnnModel(spec, in_dim, num_classes, params)


def propagate_input(m: GnnModel, a_norm, x) -> np.ndarray:
    """The parameter-free part of the forward pass: ÃX for gcn2, Ã^K X for sgc."""
    out = np.asarray(x, dtype=np.float64)
    steps = 1 if m.arch == "gcn2" else m.spec.k
    for _ in range(steps):
        out = a_norm @ out
    return np.asarray(out)


def forward_propagated(m: GnnModel, a_norm, ax: np.ndarray):
    """Forward from precomputed ``propagate_input``; returns (logits, cache)."""
    p = m.params
    if m.arch == "sgc":
        return ax @ p["W"] + p["b"], {"ax": ax}
    z1 = ax @ p["W1"] + p["b1"]
    h = np.maximum(z1, 0.0)
    hw = h @ p["W2"]
    logits = np.asarray(a_norm @ hw) + p["b2"]
    return logits, {"ax": ax, "z1": z1, "h": h, "a_norm": a_norm}


def model_forward(m: GnnModel, a_norm, x):
    if x.shape[1] != m.in_dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match model input {m.in_dim}")
    return forward_propagated(m, a_norm, propagate_input(m, a_norm, x))


def model_backward(m: GnnModel, cache: dict, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    p = m.params
    if m.arch == "sgc":
        return {"W": cache["ax"].T @ grad_logits, "b": grad_logits.sum(axis=0)}
    g_hw = np.asarray(cache["a_norm"].T @ grad_logits)
    g_h = g_hw @ p["W2"].T
    g_z1 = g_h * (cache["z1"] > 0)
    return {
        "W1": cache["ax"].T @ g_z1,
        "b1": g_z1.sum(axis=0),
        "W2": cache["h"].T @ g_hw,
        "b2": grad_logits.sum(axis=0),
    }


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_loss(logits, labels, mask) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over masked nodes and its logit gradient."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("cross-entropy mask selects no nodes")
    logp = log_softmax(logits[idx])
    y = np.asarray(labels)[idx]
    loss = -float(np.mean(logp[np.arange(len(idx)), y]))
    grad = np.zeros_like(logits, dtype=np.float64)
    g = np.exp(logp)
    g[np.arange(len(idx)), y] -= 1.0
    grad[idx] = g / len(idx)
    return loss, grad


def kl_divergence_loss(student_logits, teacher_logits, weights,
                       direction: str = "teacher_student") -> tuple[float, np.ndarray]:
    """sum_i w_i KL(teacher_i || student_i) (or the reverse direction).

    The teacher is a constant; only the student gradient is returned.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (student_logits.shape[0],))
    log_q = log_softmax(student_logits)
    log_p = log_softmax(teacher_logits)
    q, p = np.exp(log_q), np.exp(log_p)
    if direction == "teacher_student":
        per_node = np.sum(p * (log_p - log_q), axis=1)
        grad = q - p
    elif direction == "student_teacher":
        a = log_q - log_p
        per_node = np.sum(q * a, axis=1)
        grad = q * (a - per_node[:, None])
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return float(np.dot(w, per_node)), grad * w[:, None]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place Adam update; weight decay enters as an L2 gradient term."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def accuracy(logits, labels, mask) -> float:
    """Fraction correct over masked nodes that carry a label (0 if none)."""
    labels = np.asarray(labels)
    idx = np.flatnonzero(np.asarray(mask) & (labels >= 0))
    if idx.size == 0:
        return 0.0
    return float(np.mean(logits[idx].argmax(axis=1) == labels[idx]))


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def fit(m: GnnModel, a_norm, x, loss_fn: LossFn, cfg: TrainConfig,
        evaluate: Callable[[GnnModel], float] | None = None) -> tuple[GnnModel, list[dict]]:
    """Full-batch Adam on ``loss_fn(logits)``.

    With ``evaluate`` the returned model is the snapshot with the best
    validation score (ties keep the earlier one) among snapshots whose training
    loss does not exceed the initial loss; training stops after ``patience``
    epochs without improvement.  Without it the final parameters are returned.
    """
    m = m.copy()
    ax = propagate_input(m, a_norm, x)
    state = AdamState()
    history: list[dict] = []
    best, best_score, initial_loss, stale = None, -np.inf, None, 0
    for epoch in range(cfg.epochs):
        logits, cache = forward_propagated(m, a_norm, ax)
        loss, g_logits = loss_fn(logits)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        if initial_loss is None:
            initial_loss = loss
        record = {"epoch": epoch, "loss": loss}
        if evaluate is not None:
            score = evaluate(m)
            record["val"] = score
            if score > best_score and loss <= initial_loss:
                best, best_score, stale = m.copy(), score, 0
            else:
                stale += 1
                if stale > cfg.patience:
                    history.append(record)
                    break
        history.append(record)
        adam_step(m.params, model_backward(m, cache, g_logits), state, cfg.lr,
                  cfg.weight_decay)
    if evaluate is not None and best is not None:
        return best, history
    return m, history


def train_supervised(m: GnnModel, a_norm, x, labels, train_mask, val_mask,
                     cfg: TrainConfig) -> tuple[GnnModel, list[dict]]:
    """Cross-entropy training on ``train_mask`` with validation-accuracy selection."""
    labels = np.asarray(labels)

    def loss_fn(logits):
        return cross_entropy_loss(logits, labels, train_mask)

    evaluate = None
    if val_mask is not None and np.any(np.asarray(val_mask) & (labels >= 0)):
        ax_cache = {}

        def evaluate(model):
            if "ax" not in ax_cache:
                ax_cache["ax"] = propagate_input(model, a_norm, x)
            logits, _ = forward_propagated(model, a_norm, ax_cache["ax"])
            return accuracy(logits, labels, val_mask)

    return fit(m, a_norm, x, loss_fn, cfg, evaluate)


def predict(m: GnnModel, a_norm, x) -> np.ndarray:
    logits, _ = model_forward(m, a_norm, np.asarray(x, dtype=np.float64))
    return logits.argmax(axis=1)


def save_checkpoint(m: GnnModel, path) -> None:
    """Write ``<path>.json`` (architecture and shapes) and ``<path>.bin``
    (little-endian float64 parameters in declaration order)."""
    path = Path(path)
    meta = {
        "arch": m.arch,
        "hidden": m.spec.hidden,
        "k": m.spec.k,
        "in_dim": m.in_dim,
        "num_classes": m.num_classes,
        "params": [[name, list(v.shape)] for name, v in m.params.items()],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in m.params.values())
    path.with_suffix(".bin").write_bytes(blob)


def load_checkpoint(path) -> GnnModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    params, offset = {}, 0
    for name, shape in meta["params"]:
        size = int(np.prod(shape)) if shape else 1
        params[name] = flat[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != len(flat):
        raise ValueError("checkpoint parameter blob has trailing data")
    spec = ModelSpec(arch=meta["arch"], hidden=meta["hidden"], k=meta["k"])
    return GnnModel(spec, meta["in_dim"], meta["num_classes"], params)


def clone(m: GnnModel) -> GnnModel:
    return copy.deepcopy(m)
