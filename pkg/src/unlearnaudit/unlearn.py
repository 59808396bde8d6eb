"""Exact retraining and four simplified approximate unlearning methods.

The approximate methods are small stand-ins, not reproductions of the
published algorithms they are named after:

* ``finetune`` - keep training on the retained set only.
* ``grad_ascent`` - ascend the forget-set loss, then repair on the retain set.
* ``fisher_dampen`` - shrink parameters whose diagonal Fisher information is
  much larger on the forget set than on the whole training set (after SSD).
* ``saliency`` - fine-tune only the parameters most salient for the forget
  loss, on forget samples relabelled at random (after SalUn).
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .data import Dataset
from .errors import ArgumentError
from .model import (
    DpConfig,
    ModelState,
    Recipe,
    TrainConfig,
    init_model,
    loss_gradient,
    per_sample_gradients,
    run_sgd,
    step_schedule,
    train,
    train_dp,
    weight_mask,
)

METHODS = ("retrain", "finetune", "grad_ascent", "fisher_dampen", "saliency")


@dataclasses.dataclass(frozen=True)
class UnlearnConfig:
    method: str = "finetune"
    steps: int = 50
    learning_rate: float = 0.05
    batch_size: int = 32
    alpha: float = 10.0
    beta: float = 1.0
    gamma: float = 0.5
    repair_steps: int | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ArgumentError(f"unknown unlearning method {self.method!r}")
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if not self.alpha > 0:
            raise ArgumentError("alpha must be > 0")
        if not 0 < self.beta <= 1:
            raise ArgumentError("beta must lie in (0, 1]")
        if not 0 < self.gamma <= 1:
            raise ArgumentError("gamma must lie in (0, 1]")


def _rows(mask, n, what):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ArgumentError(f"{what} mask length must equal dataset size")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ArgumentError(f"{what} set is empty")
    return rows


def retrain_exact(dataset: Dataset, retain_mask, train_config: TrainConfig, dp_config: DpConfig | None = None,
                  arch=None, init_seed: int | None = None):
    """Fresh initialisation and full training on the retained samples.

    Returns a ModelState, or ``(ModelState, PrivacySpend)`` when ``dp_config``
    is given.
    """
    _rows(retain_mask, len(dataset), "retain")
    if arch is None:
        raise ArgumentError("retrain_exact needs the architecture")
    start = init_model(arch, train_config.seed if init_seed is None else init_seed)
    if dp_config is None:
        return train(start, dataset, retain_mask, train_config)
    return train_dp(start, dataset, retain_mask, train_config, dp_config)


def unlearn_finetune(model: ModelState, dataset: Dataset, retain_mask, config: UnlearnConfig) -> ModelState:
    rows = _rows(retain_mask, len(dataset), "retain")
    if config.steps == 0:
        return model
    rng = np.random.default_rng(config.seed)
    idx, offsets = step_schedule(rows, config.steps, config.batch_size, rng)
    decay = config.weight_decay * weight_mask(model.arch)
    params = run_sgd(model, dataset.features, dataset.labels, idx, offsets, config.learning_rate, decay)
    return model.replace(params=params)


def unlearn_gradascent(model: ModelState, dataset: Dataset, forget_mask, config: UnlearnConfig,
                       retain_mask=None) -> ModelState:
    """``steps`` ascent steps on the forget loss; with ``retain_mask`` then
    ``repair_steps`` (default ``steps``) descent steps on the retained set."""
    rows = _rows(forget_mask, len(dataset), "forget")
    if config.steps == 0:
        return model
    rng = np.random.default_rng(config.seed)
    idx, offsets = step_schedule(rows, config.steps, config.batch_size, rng)
    zero = np.zeros(model.params.size)
    params = run_sgd(model, dataset.features, dataset.labels, idx, offsets, config.learning_rate, zero, sign=-1.0)
    out = model.replace(params=params)
    if retain_mask is not None and np.any(retain_mask):
        repair = config.steps if config.repair_steps is None else config.repair_steps
        if repair:
            out = unlearn_finetune(
                out, dataset, retain_mask,
                dataclasses.replace(config, method="finetune", steps=repair, seed=config.seed + 1),
            )
    return out


def diagonal_fisher(model: ModelState, dataset: Dataset, rows) -> np.ndarray:
    """Mean of squared per-sample gradients of the cross-entropy."""
    g = per_sample_gradients(model, dataset.features[rows], dataset.labels[rows])
    return np.mean(g * g, axis=0)


def fisher_dampening_factors(f_forget: np.ndarray, f_full: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Per-parameter multipliers: ``min(1, beta * F_full / F_forget)`` where
    ``F_forget > alpha * F_full``, else 1."""
    selected = f_forget > alpha * f_full
    factors = np.ones_like(f_forget)
    with np.errstate(divide="ignore", invalid="ignore"):
        factors[selected] = np.minimum(1.0, beta * f_full[selected] / f_forget[selected])
    return factors


def unlearn_fisher_dampen(model: ModelState, dataset: Dataset, forget_mask, retain_mask, config: UnlearnConfig) -> ModelState:
    f_rows = _rows(forget_mask, len(dataset), "forget")
    r_rows = _rows(retain_mask, len(dataset), "retain")
    f_forget = diagonal_fisher(model, dataset, f_rows)
    f_full = diagonal_fisher(model, dataset, np.union1d(f_rows, r_rows))
    factors = fisher_dampening_factors(f_forget, f_full, config.alpha, config.beta)
    if np.all(factors == 1.0):
        return model
    return model.replace(params=model.params * factors)


def saliency_mask(grad: np.ndarray, gamma: float) -> np.ndarray:
    """0/1 mask of the ``ceil(gamma * P)`` largest ``|grad|``; ties by index."""
    k = math.ceil(gamma * grad.size)
    order = np.argsort(-np.abs(grad), kind="stable")
    mask = np.zeros(grad.size)
    mask[order[:k]] = 1.0
    return mask


def random_wrong_labels(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """Uniform labels different from ``labels``, by rejection sampling."""
    if num_classes < 2:
        raise ArgumentError("relabelling needs at least 2 classes")
    rng = np.random.default_rng(seed)
    out = np.empty_like(labels)
    for i, y in enumerate(labels):
        z = y
        while z == y:
            z = rng.integers(num_classes)
        out[i] = z
    return out


def unlearn_saliency(model: ModelState, dataset: Dataset, forget_mask, config: UnlearnConfig) -> ModelState:
    rows = _rows(forget_mask, len(dataset), "forget")
    if config.steps == 0:
        return model
    grad = loss_gradient(model, dataset.features[rows], dataset.labels[rows])
    mask = saliency_mask(grad, config.gamma)
    relabeled = dataset.labels.copy()
    relabeled[rows] = random_wrong_labels(dataset.labels[rows], dataset.num_classes, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    idx, offsets = step_schedule(rows, config.steps, config.batch_size, rng)
    params = run_sgd(model, dataset.features, relabeled, idx, offsets, config.learning_rate,
                     np.zeros(model.params.size), update_mask=mask)
    return model.replace(params=params)


@dataclasses.dataclass(frozen=True)
class Unlearner:
    """Binds a method and its config to a dataset and the pool's recipe.

    Called as ``unlearner(model, forget_mask, retain_mask, model_seed)`` by
    :func:`unlearnaudit.risk.unlearn_pool`.
    """

    dataset: Dataset
    recipe: Recipe
    config: UnlearnConfig

    def __call__(self, model: ModelState, forget_mask, retain_mask, model_seed: int) -> ModelState:
        cfg = dataclasses.replace(self.config, seed=self.config.seed + model_seed)
        m = self.config.method
        ds = self.dataset
        if m == "retrain":
            return self.recipe.fit(ds, retain_mask, model_seed)
        if m == "finetune":
            out = unlearn_finetune(model, ds, retain_mask, cfg)
        elif m == "grad_ascent":
            out = unlearn_gradascent(model, ds, forget_mask, cfg, retain_mask=retain_mask)
        elif m == "fisher_dampen":
            out = unlearn_fisher_dampen(model, ds, forget_mask, retain_mask, cfg)
        else:
            out = unlearn_saliency(model, ds, forget_mask, cfg)
        return out
