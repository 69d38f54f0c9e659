"""Two-stage personalised training: a global model on the surrogate graph,
then local fine-tuning with node-adaptive distillation from that model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .client_stats import HomophilyProfile
from .gnn import (
    GnnModel, ModelSpec, TrainConfig, accuracy, cross_entropy_loss, fit, forward_propagated,
    init_model, kl_divergence_loss, model_forward, propagate_input, train_supervised,
)
from .graph import ClientGraph, DatasetBundle, normalized_adjacency

ABLATIONS = ("full", "ft_only", "fixed_gamma")


@dataclass(frozen=True)
class PersonalizeConfig:
    """``fixed_gamma=None`` in fixed_gamma mode uses the client's mean adaptive
    gamma, so the ablation spends the same total distillation weight.
    ``init_from_surrogate=False`` starts stage 2 from a fresh initialisation
    instead of the surrogate-trained model (the teacher is unchanged)."""

    beta: float = 0.5
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage2: TrainConfig = field(default_factory=TrainConfig)
    ablation: str = "full"
    fixed_gamma: float | None = None
    kl_direction: str = "teacher_student"
    kl_reduction: str = "sum"
    stage1_select: str = "final"
    init_from_surrogate: bool = True

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.fixed_gamma is not None and self.fixed_gamma < 0:
            raise ValueError("fixed_gamma must be >= 0")
        if self.kl_reduction not in ("sum", "mean"):
            raise ValueError("kl_reduction must be 'sum' or 'mean'")
        if self.stage1_select not in ("final", "local_val"):
            raise ValueError("stage1_select must be 'final' or 'local_val'")


def compute_w_dist(prof: HomophilyProfile | np.ndarray) -> np.ndarray:
    """1 / (1 + ln(H(c) + 1)) per class."""
    h = prof.per_class if isinstance(prof, HomophilyProfile) else np.asarray(prof, dtype=float)
    if np.any(h < 0):
        raise ValueError("class homophily must be non-negative")
    return 1.0 / (1.0 + np.log1p(h))


def compute_gamma(soft: np.ndarray, w_dist: np.ndarray, beta: float) -> np.ndarray:
    """beta * <soft_i, w_dist>; all-zero rows get beta * max(w_dist)."""
    soft = np.asarray(soft, dtype=np.float64)
    gamma = beta * (soft @ w_dist)
    gamma[~np.any(soft > 0, axis=1)] = beta * float(np.max(w_dist))
    return gamma


def gamma_for_ablation(gamma: np.ndarray, cfg: PersonalizeConfig) -> np.ndarray:
    if cfg.ablation == "ft_only":
        return np.zeros_like(gamma)
    if cfg.ablation == "fixed_gamma":
        g0 = float(np.mean(gamma)) if cfg.fixed_gamma is None else cfg.fixed_gamma
        return np.full_like(gamma, g0)
    return gamma


def stage1_train_global(surrogate: DatasetBundle, spec: ModelSpec, cfg: PersonalizeConfig,
                        local: ClientGraph | None = None) -> tuple[GnnModel, GnnModel, list]:
    """Train M_G on every surrogate node; return (teacher, init, history).

    With ``stage1_select="local_val"`` and a client graph holding validation
    nodes, the snapshot with the best local validation accuracy is kept.
    """
    a_norm = normalized_adjacency(surrogate.graph)
    x = surrogate.features.astype(np.float64)
    model = init_model(spec, x.shape[1], surrogate.num_classes, cfg.stage1.seed)
    labels = surrogate.labels
    everyone = np.ones(len(labels), dtype=bool)

    if (cfg.stage1_select == "local_val" and local is not None
            and np.any(local.val_mask & (local.labels >= 0))):
        a_loc = normalized_adjacency(local.graph)
        x_loc = local.features.astype(np.float64)
        cache = {}

        def evaluate(m):
            if "ax" not in cache:
                cache["ax"] = propagate_input(m, a_loc, x_loc)
            logits, _ = forward_propagated(m, a_loc, cache["ax"])
            return accuracy(logits, local.labels, local.val_mask)

        trained, history = fit(
            model, a_norm, x, lambda lo: cross_entropy_loss(lo, labels, everyone),
            cfg.stage1, evaluate,
        )
    else:
        trained, history = train_supervised(model, a_norm, x, labels, everyone, None, cfg.stage1)
    return trained.copy(), trained.copy(), history


def stage2_finetune(init: GnnModel, teacher: GnnModel | None, cg: ClientGraph,
                    gamma: np.ndarray, cfg: PersonalizeConfig) -> tuple[GnnModel, list]:
    """Fine-tune on local train labels plus gamma-weighted distillation on every node."""
    a_norm = normalized_adjacency(cg.graph)
    x = cg.features.astype(np.float64)
    labels, train, val = cg.labels, cg.train_mask, cg.val_mask
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise ValueError("gamma must be non-negative")
    distill = teacher is not None and np.any(gamma > 0)
    if not distill:
        return train_supervised(init, a_norm, x, labels, train, val, cfg.stage2)

    teacher_logits, _ = model_forward(teacher, a_norm, x)
    weights = gamma / len(gamma) if cfg.kl_reduction == "mean" else gamma

    def loss_fn(logits):
        ce, g_ce = cross_entropy_loss(logits, labels, train)
        kl, g_kl = kl_divergence_loss(logits, teacher_logits, weights, cfg.kl_direction)
        return ce + kl, g_ce + g_kl

    evaluate = None
    if np.any(val & (labels >= 0)):
        cache = {}

        def evaluate(m):
            if "ax" not in cache:
                cache["ax"] = propagate_input(m, a_norm, x)
            logits, _ = forward_propagated(m, a_norm, cache["ax"])
            return accuracy(logits, labels, val)

    return fit(init, a_norm, x, loss_fn, cfg.stage2, evaluate)


@dataclass
class PersonalizedResult:
    model: GnnModel
    teacher: GnnModel | None
    gamma: np.ndarray
    stage1_history: list
    stage2_history: list


def personalize_client(cg: ClientGraph, surrogate: DatasetBundle | None, spec: ModelSpec,
                       cfg: PersonalizeConfig, profile: HomophilyProfile,
                       soft_labels: np.ndarray) -> PersonalizedResult:
    """Stage 1 + stage 2 for one client.  Without a surrogate this is the
    Standalone baseline (local training from a fresh initialisation)."""
    if surrogate is None:
        init = init_model(spec, cg.features.shape[1], cg.num_classes, cfg.stage2.seed)
        model, hist = stage2_finetune(init, None, cg, np.zeros(cg.num_nodes), cfg)
        return PersonalizedResult(model, None, np.zeros(cg.num_nodes), [], hist)
    teacher, init, hist1 = stage1_train_global(surrogate, spec, cfg, cg)
    if not cfg.init_from_surrogate:
        init = init_model(spec, cg.features.shape[1], cg.num_classes, cfg.stage2.seed)
    gamma = gamma_for_ablation(compute_gamma(soft_labels, compute_w_dist(profile), cfg.beta), cfg)
    model, hist2 = stage2_finetune(init, teacher, cg, gamma, cfg)
    return PersonalizedResult(model, teacher, gamma, hist1, hist2)
