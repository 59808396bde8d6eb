"""Small ReLU classifiers, SGD and DP-SGD training, softmax prediction.

A :class:`ModelState` is immutable: every trainer returns a new state and
leaves its input untouched.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _npkernels as npk
from .accounting import account_epsilon
from .backend import kernels
from .data import Dataset, Sample
from .errors import ArgumentError, FormatError

CONF_MIN = 1e-7
CONF_MAX = 1 - 1e-7


@dataclasses.dataclass(frozen=True)
class PrivacySpend:
    epsilon: float
    delta: float


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ArgumentError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ArgumentError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ArgumentError("weight_decay must be >= 0")


@dataclasses.dataclass(frozen=True)
class DpConfig:
    clip_norm: float
    noise_multiplier: float
    delta: float = 1e-5

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ArgumentError("clip_norm must be > 0")
        if not self.noise_multiplier > 0:
            raise ArgumentError("noise_multiplier must be > 0")
        if not 0 < self.delta < 1:
            raise ArgumentError("delta must lie in (0, 1)")


@dataclasses.dataclass(frozen=True, eq=False)
class ModelState:
    """Architecture widths plus the flat parameter vector.

    ``n_train`` records how many distinct samples the last training call
    saw; ``spend`` is set only by DP training.
    """

    arch: tuple[int, ...]
    params: np.ndarray
    seed: int = 0
    n_train: int = 0
    spend: PrivacySpend | None = None

    def __post_init__(self):
        arch = tuple(int(a) for a in self.arch)
        if len(arch) < 2 or min(arch) < 1:
            raise ArgumentError("arch needs >= 2 positive widths")
        p = np.array(self.params, dtype=np.float64)
        if p.shape != (npk.n_params(arch),):
            raise ArgumentError(f"expected {npk.n_params(arch)} parameters, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ArgumentError("parameters must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "params", p)

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.params, other.params)

    __hash__ = None

    @property
    def activation(self) -> str:
        return "relu"

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(weights, biases)`` per layer; weights are ``(fan_in, fan_out)``."""
        return npk.unpack(self.params, self.arch)

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)


def init_model(arch: Sequence[int], seed: int) -> ModelState:
    """Weights uniform in +-1/sqrt(fan_in), zero biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or min(arch) < 1:
        raise ArgumentError("arch needs >= 2 positive widths")
    rng = np.random.default_rng(seed)
    params = np.zeros(npk.n_params(arch))
    for w0, b0, _, fan_in, _ in npk.layer_offsets(arch):
        bound = 1.0 / math.sqrt(fan_in)
        params[w0:b0] = rng.uniform(-bound, bound, size=b0 - w0)
    return ModelState(arch, params, seed=seed)


def weight_mask(arch: Sequence[int]) -> np.ndarray:
    """1.0 on weight coordinates, 0.0 on biases."""
    m = np.zeros(npk.n_params(arch))
    for w0, b0, _, _, _ in npk.layer_offsets(arch):
        m[w0:b0] = 1.0
    return m


def _features(model: ModelState, x) -> np.ndarray:
    X = np.asarray(x.features if isinstance(x, Sample) else x, dtype=np.float64)
    if X.shape[-1] != model.arch[0]:
        raise ArgumentError(f"feature_dim {X.shape[-1]} does not match model input {model.arch[0]}")
    return X


def logits(model: ModelState, X) -> np.ndarray:
    return npk.forward(model.params, model.arch, _features(model, X))


def predict_proba(model: ModelState, x) -> np.ndarray:
    """Softmax confidences for a sample, a feature vector or a matrix of rows."""
    return npk.softmax(logits(model, x))


def confidence_of_true_label(model: ModelState, sample: Sample) -> float:
    p = predict_proba(model, sample)[sample.label]
    return float(min(max(p, CONF_MIN), CONF_MAX))


def true_label_confidences(model: ModelState, X, y) -> np.ndarray:
    """Vectorised :func:`confidence_of_true_label`; ``X`` may have extra leading axes."""
    X = _features(model, X)
    y = np.asarray(y)
    p = predict_proba(model, X.reshape(-1, X.shape[-1]))
    flat_y = np.broadcast_to(y.reshape(y.shape + (1,) * (X.ndim - 1 - y.ndim)), X.shape[:-1]).ravel()
    conf = p[np.arange(flat_y.size), flat_y].reshape(X.shape[:-1])
    return np.clip(conf, CONF_MIN, CONF_MAX)


def loss(model: ModelState, X, y) -> float:
    return float(npk.loss_and_grad(model.params, model.arch, _features(model, X), np.asarray(y))[0])


def loss_gradient(model: ModelState, X, y) -> np.ndarray:
    return npk.loss_and_grad(model.params, model.arch, _features(model, X), np.asarray(y))[1]


def per_sample_gradients(model: ModelState, X, y) -> np.ndarray:
    return npk.per_sample_grads(model.params, model.arch, _features(model, X), np.asarray(y))


def accuracy(model: ModelState, dataset: Dataset, mask=None) -> float:
    X, y = dataset.features, dataset.labels
    if mask is not None:
        X, y = X[mask], y[mask]
    return float(np.mean(np.argmax(logits(model, X), axis=1) == y))


def batch_schedule(rows: np.ndarray, epochs: int, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled minibatches for every epoch as a flat index array plus offsets.

    The final batch of an epoch may be short; it is kept.
    """
    rows = np.asarray(rows, dtype=np.int64)
    per_epoch = math.ceil(rows.size / batch_size)
    idx = np.empty(rows.size * epochs, dtype=np.int64)
    for e in range(epochs):
        idx[e * rows.size : (e + 1) * rows.size] = rng.permutation(rows)
    starts = [e * rows.size + b * batch_size for e in range(epochs) for b in range(per_epoch)]
    offsets = np.array(starts + [rows.size * epochs], dtype=np.int64)
    return idx, offsets


def step_schedule(rows: np.ndarray, steps: int, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Exactly ``steps`` minibatches of ``min(batch_size, len(rows))`` rows."""
    rows = np.asarray(rows, dtype=np.int64)
    bs = min(batch_size, rows.size)
    per_epoch = math.ceil(rows.size / bs)
    epochs = math.ceil(steps / per_epoch) if steps else 0
    idx, offsets = batch_schedule(rows, epochs, bs, rng)
    offsets = offsets[: steps + 1]
    return idx[: offsets[-1]], offsets


def dp_steps(n_members: int, config: TrainConfig) -> int:
    return config.epochs * math.ceil(n_members / config.batch_size)


def _member_rows(dataset: Dataset, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(dataset),):
        raise ArgumentError("mask length must equal dataset size")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ArgumentError("mask selects no training members")
    return rows


def run_sgd(model: ModelState, X, y, idx, offsets, lr, decay, update_mask=None, sign=1.0) -> np.ndarray:
    """Apply the scheduled SGD steps with the active backend; returns new params."""
    params = np.array(model.params)
    if update_mask is None:
        update_mask = np.ones_like(params)
    kernels.sgd_steps(
        params, model.arch, np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(y, dtype=np.int64),
        idx, offsets, float(lr), np.ascontiguousarray(decay, dtype=np.float64),
        np.ascontiguousarray(update_mask, dtype=np.float64), float(sign),
    )
    return params


def train(model: ModelState, dataset: Dataset, mask, config: TrainConfig) -> ModelState:
    """Mini-batch SGD on the cross-entropy of the masked members."""
    rows = _member_rows(dataset, mask)
    if config.batch_size > rows.size:
        raise ArgumentError(f"batch_size {config.batch_size} exceeds member count {rows.size}")
    if model.arch[0] != dataset.feature_dim:
        raise ArgumentError("model input width does not match dataset feature_dim")
    if config.epochs == 0:
        return model.replace(n_train=int(rows.size))
    rng = np.random.default_rng(config.seed)
    idx, offsets = batch_schedule(rows, config.epochs, config.batch_size, rng)
    decay = config.weight_decay * weight_mask(model.arch)
    params = run_sgd(model, dataset.features, dataset.labels, idx, offsets, config.learning_rate, decay)
    return ModelState(model.arch, params, seed=config.seed, n_train=int(rows.size))


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(g))
    return g if norm <= clip_norm else g * (clip_norm / norm)


def train_dp(
    model: ModelState, dataset: Dataset, mask, config: TrainConfig, dp: DpConfig
) -> tuple[ModelState, PrivacySpend]:
    """DP-SGD with per-sample clipping and Gaussian noise.

    Noise for step ``s`` is ``sigma * C * N(0, I)`` drawn in flat parameter
    order from a generator seeded by ``(config.seed, 1)``.
    """
    rows = _member_rows(dataset, mask)
    if config.batch_size > rows.size:
        raise ArgumentError(f"batch_size {config.batch_size} exceeds member count {rows.size}")
    if model.arch[0] != dataset.feature_dim:
        raise ArgumentError("model input width does not match dataset feature_dim")
    steps = dp_steps(rows.size, config)
    spend = PrivacySpend(account_epsilon(dp.noise_multiplier, steps, dp.delta), dp.delta)
    if steps == 0:
        return model.replace(n_train=int(rows.size), spend=spend), spend
    rng = np.random.default_rng(config.seed)
    idx, offsets = batch_schedule(rows, config.epochs, config.batch_size, rng)
    noise_rng = np.random.default_rng([config.seed, 1])
    noise = noise_rng.standard_normal((steps, model.params.size)) * (dp.noise_multiplier * dp.clip_norm)
    params = np.array(model.params)
    decay = config.weight_decay * weight_mask(model.arch)
    kernels.dp_sgd_steps(
        params, model.arch, dataset.features, dataset.labels, idx, offsets,
        float(config.learning_rate), decay, float(dp.clip_norm), noise,
    )
    state = ModelState(model.arch, params, seed=config.seed, n_train=int(rows.size), spend=spend)
    return state, spend


def save_model(model: ModelState, path: str | Path) -> None:
    spend = model.spend
    with open(path, "wb") as fh:
        np.savez(
            fh,
            arch=np.array(model.arch, dtype=np.int64),
            params=model.params,
            seed=np.int64(model.seed),
            n_train=np.int64(model.n_train),
            epsilon=np.float64(spend.epsilon if spend else np.nan),
            delta=np.float64(spend.delta if spend else np.nan),
        )


def load_model(path: str | Path) -> ModelState:
    try:
        with np.load(path) as z:
            eps, delta = float(z["epsilon"]), float(z["delta"])
            spend = None if math.isnan(delta) else PrivacySpend(eps, delta)
            return ModelState(
                tuple(int(a) for a in z["arch"]), z["params"], int(z["seed"]), int(z["n_train"]), spend
            )
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from None


@dataclasses.dataclass(frozen=True)
class Recipe:
    """Everything needed to train one model of a pool from ``(mask, seed)``.

    With ``shared_init`` every model starts from ``init_model(arch, init_seed)``;
    otherwise the model seed also seeds the initialisation.
    """

    arch: tuple[int, ...]
    train: TrainConfig
    dp: DpConfig | None = None
    shared_init: bool = False
    init_seed: int = 0

    def init_for(self, seed: int) -> ModelState:
        return init_model(self.arch, self.init_seed if self.shared_init else seed)

    def fit(self, dataset: Dataset, mask, seed: int) -> ModelState:
        config = dataclasses.replace(self.train, seed=seed)
        start = self.init_for(seed)
        if self.dp is None:
            return train(start, dataset, mask, config)
        return train_dp(start, dataset, mask, config, self.dp)[0]
