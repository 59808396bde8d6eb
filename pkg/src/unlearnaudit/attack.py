"""Likelihood-ratio membership inference: A-LiRA, online and offline LiRA.

Scorers return larger values for more member-like (sample, model) pairs.
A-LiRA and online LiRA score with ``log Λ``, the log ratio of the in- and
out-Gaussian densities; offline LiRA with the upper tail mass of the
out-Gaussian.  Thresholding on ``log Λ`` gives the same decisions as
thresholding Λ, without overflow.

The prepared attack classes (:class:`ALiRA`, :class:`OnlineLiRA`,
:class:`OfflineLiRA`) own their shadow models and score many samples at
once; the per-sample functions are the reference definitions they follow.
"""
from __future__ import annotations

import dataclasses
import math
import time
from typing import Sequence

import numpy as np
from scipy import special, stats

from .data import AugmentationScheme, Dataset, Sample, augment, augment_features, random_half_split
from .errors import ArgumentError, CoverageError
from .model import ModelState, Recipe, true_label_confidences

VAR_FLOOR = 1e-6
ATTACK_KINDS = ("alira", "online", "offline")


@dataclasses.dataclass(frozen=True)
class GaussianFit:
    mu: float
    var: float

    @property
    def sd(self) -> float:
        return math.sqrt(self.var)

    def logpdf(self, x):
        return stats.norm.logpdf(x, self.mu, self.sd)


@dataclasses.dataclass(frozen=True)
class LiraScore:
    """Either ``log_lambda`` (alira/online) or ``one_sided`` (offline) is set."""

    kind: str
    log_lambda: float | None = None
    one_sided: float | None = None

    @property
    def lambda_(self) -> float:
        return math.exp(self.log_lambda)

    @property
    def value(self) -> float:
        """The quantity thresholded by :func:`classify`; larger means more member-like.

        For offline scores this is ``1 - one_sided``: the out-distribution tail
        mass shrinks as the target's confidence grows, so its complement is
        the member-oriented statistic.
        """
        return 1.0 - self.one_sided if self.log_lambda is None else self.log_lambda


@dataclasses.dataclass(frozen=True)
class ShadowPool:
    models: tuple[ModelState, ...]
    masks: np.ndarray  # (n_models, n_samples) bool

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[0] != len(self.models):
            raise ArgumentError("need one mask row per shadow model")
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "masks", masks)

    def __len__(self):
        return len(self.models)


def logit_transform(p):
    """``log(p / (1 - p))``; ``p`` must lie strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=np.float64)
    if not np.all((arr > 0) & (arr < 1)):
        raise ArgumentError("logit_transform needs 0 < p < 1")
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if out.ndim == 0 else out


def fit_gaussian(obs: Sequence[float], var_floor: float = VAR_FLOOR) -> GaussianFit:
    """Mean and unbiased variance, the variance floored at ``var_floor``."""
    x = np.asarray(obs, dtype=np.float64).ravel()
    if x.size < 2:
        raise ArgumentError("fit_gaussian needs at least 2 observations")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("observations must be finite")
    return GaussianFit(float(x.mean()), max(float(x.var(ddof=1)), var_floor))


def log_likelihood_ratio(x, fit_in: GaussianFit, fit_out: GaussianFit):
    return fit_in.logpdf(x) - fit_out.logpdf(x)


def _phi(model: ModelState, X, y):
    return logit_transform(true_label_confidences(model, X, y))


def alira_score(
    target: ModelState,
    f_in: ModelState,
    f_out: ModelState,
    sample: Sample,
    n_aug: int,
    scheme: AugmentationScheme,
    seed: int,
    grid: tuple[int, int] | None = None,
) -> LiraScore:
    """Score one sample against one target with an in/out shadow pair.

    One augmentation draw is pushed through all three models; Gaussians are
    fitted to the shadows' logit-confidences and evaluated at the maximum of
    the target's.
    """
    if n_aug < 2:
        raise ArgumentError("A-LiRA needs n_aug >= 2")
    X = np.stack([s.features for s in augment(sample, n_aug, scheme, seed, grid)])
    fit_in = fit_gaussian(_phi(f_in, X, sample.label))
    fit_out = fit_gaussian(_phi(f_out, X, sample.label))
    m = float(np.max(_phi(target, X, sample.label)))
    return LiraScore("alira", log_lambda=float(log_likelihood_ratio(m, fit_in, fit_out)))


def _in_out_obs(pool: ShadowPool, sample: Sample, dataset: Dataset):
    phis = np.array([_phi(m, sample.features[None, :], sample.label)[0] for m in pool.models])
    member = pool.masks[:, sample.id]
    return phis[member], phis[~member]


def online_lira_score(target: ModelState, pool: ShadowPool, sample: Sample, dataset: Dataset) -> LiraScore:
    obs_in, obs_out = _in_out_obs(pool, sample, dataset)
    if obs_in.size < 2 or obs_out.size < 2:
        raise CoverageError("online LiRA needs >= 2 in- and >= 2 out-shadows", [sample.id])
    m = _phi(target, sample.features[None, :], sample.label)[0]
    return LiraScore("online", log_lambda=float(log_likelihood_ratio(m, fit_gaussian(obs_in), fit_gaussian(obs_out))))


def offline_tail(x, fit_out: GaussianFit):
    return special.ndtr(-(np.asarray(x) - fit_out.mu) / fit_out.sd)


def offline_lira_score(target: ModelState, out_pool: ShadowPool, sample: Sample, dataset: Dataset) -> LiraScore:
    _, obs_out = _in_out_obs(out_pool, sample, dataset)
    if obs_out.size < 2:
        raise CoverageError("offline LiRA needs >= 2 out-shadows", [sample.id])
    m = _phi(target, sample.features[None, :], sample.label)[0]
    return LiraScore("offline", one_sided=float(offline_tail(m, fit_gaussian(obs_out))))


# -- thresholds and dataset-level metrics ------------------------------------


def threshold_at_fpr(nonmember_scores, target_fpr: float) -> float:
    """The ``ceil(target_fpr * N)``-th largest non-member score.

    Under the strict rule ``score > tau`` fewer than that many non-members
    are flagged, so the empirical FPR never exceeds ``target_fpr``.
    """
    s = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ArgumentError("threshold_at_fpr needs at least one score")
    if not 0 < target_fpr <= 1:
        raise ArgumentError("target_fpr must lie in (0, 1]")
    # guard against 0.05 * 100 = 5.000000000000001
    rank = max(1, math.ceil(round(target_fpr * s.size, 9)))
    return float(np.sort(s)[::-1][rank - 1])


def classify(score: float, tau: float) -> bool:
    return score > tau


def _split(scores, member_labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    lab = np.asarray(member_labels, dtype=bool).ravel()
    if s.shape != lab.shape:
        raise ArgumentError("scores and labels differ in length")
    if lab.all() or not lab.any():
        raise ArgumentError("both members and non-members are required")
    return s[lab], s[~lab]


def auc(scores, member_labels) -> float:
    """P(member score > non-member score), ties counting one half."""
    pos, neg = _split(scores, member_labels)
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def tpr_at_fpr(scores, member_labels, fpr: float) -> float:
    pos, neg = _split(scores, member_labels)
    tau = threshold_at_fpr(neg, fpr)
    return float(np.mean(pos > tau))


# -- prepared attacks ---------------------------------------------------------


def _phi_matrix(models: Sequence[ModelState], dataset: Dataset, ids) -> np.ndarray:
    X, y = dataset.features[ids], dataset.labels[ids]
    return np.stack([_phi(m, X, y) for m in models])


@dataclasses.dataclass
class ALiRA:
    """A-LiRA with precomputed shadow fits for a set of samples.

    ``pairing="halves"`` trains one model on a random half H and one on its
    complement, so each sample has an in- and an out-shadow from just two
    trainings.  ``pairing="leave_one_out"`` trains M(H) plus, per sample x,
    the model on H with x toggled, giving pairs that differ in x alone.
    """

    dataset: Dataset
    ids: np.ndarray
    n_aug: int
    scheme: AugmentationScheme
    seed: int
    fit_in: np.ndarray = dataclasses.field(repr=False, default=None)  # (n_ids, 2) mu, var
    fit_out: np.ndarray = dataclasses.field(repr=False, default=None)
    shadows: list = dataclasses.field(repr=False, default_factory=list)
    half: np.ndarray = dataclasses.field(repr=False, default=None)
    kind = "alira"

    @classmethod
    def prepare(cls, dataset, recipe: Recipe, ids=None, *, n_aug=100, scheme=None, seed=0,
                pairing="halves", shadow_seed=None, map_fn=map):
        if n_aug < 2:
            raise ArgumentError("A-LiRA needs n_aug >= 2")
        ids = dataset.ids if ids is None else np.asarray(ids, dtype=np.int64)
        scheme = scheme or AugmentationScheme.jitter(0.05)
        shadow_seed = seed if shadow_seed is None else shadow_seed
        half = random_half_split(len(dataset), shadow_seed)
        self = cls(dataset, ids, n_aug, scheme, seed, half=half)
        aug = self.augmentations()
        labels = dataset.labels[ids]
        if pairing == "halves":
            jobs = [(dataset, half, shadow_seed), (dataset, ~half, shadow_seed + 1)]
            m_half, m_comp = map_fn(_fit_job, [(recipe, *j) for j in jobs])
            self.shadows = [m_half, m_comp]
            p_half, p_comp = _phi(m_half, aug, labels), _phi(m_comp, aug, labels)
            inside = half[ids][:, None]
            obs_in = np.where(inside, p_half, p_comp)
            obs_out = np.where(inside, p_comp, p_half)
        elif pairing == "leave_one_out":
            base_job = (recipe, dataset, half, shadow_seed)
            toggled = []
            for i in ids:
                mk = half.copy()
                mk[i] = not mk[i]
                toggled.append((recipe, dataset, mk, shadow_seed))
            models = list(map_fn(_fit_job, [base_job] + toggled))
            base, others = models[0], models[1:]
            self.shadows = models
            p_base = _phi(base, aug, labels)
            p_other = np.stack([_phi(m, aug[j], labels[j]) for j, m in enumerate(others)])
            inside = half[ids][:, None]
            obs_in = np.where(inside, p_base, p_other)
            obs_out = np.where(inside, p_other, p_base)
        else:
            raise ArgumentError(f"unknown pairing {pairing!r}")
        self.fit_in = _fit_rows(obs_in)
        self.fit_out = _fit_rows(obs_out)
        return self

    def augmentations(self) -> np.ndarray:
        if getattr(self, "_aug", None) is None:
            self._aug = augment_features(self.dataset, self.ids, self.n_aug, self.scheme, self.seed)
        return self._aug

    def score(self, target: ModelState, aug=None) -> np.ndarray:
        """``log Λ`` for every prepared sample on ``target``."""
        aug = self.augmentations() if aug is None else aug
        m = _phi(target, aug, self.dataset.labels[self.ids]).max(axis=1)
        return _gauss_logpdf(m, self.fit_in) - _gauss_logpdf(m, self.fit_out)


def _fit_job(args):
    recipe, dataset, mask, seed = args
    return recipe.fit(dataset, mask, seed)


def _fit_rows(obs: np.ndarray) -> np.ndarray:
    return np.column_stack([obs.mean(axis=1), np.maximum(obs.var(axis=1, ddof=1), VAR_FLOOR)])


def _gauss_logpdf(x, fit):
    return stats.norm.logpdf(x, fit[:, 0], np.sqrt(fit[:, 1]))


@dataclasses.dataclass
class OnlineLiRA:
    """Online LiRA over a shadow pool trained on random halves of the dataset."""

    dataset: Dataset
    ids: np.ndarray
    pool: ShadowPool = dataclasses.field(repr=False)
    fit_in: np.ndarray = dataclasses.field(repr=False, default=None)
    fit_out: np.ndarray = dataclasses.field(repr=False, default=None)
    kind = "online"

    @classmethod
    def prepare(cls, dataset, recipe: Recipe, ids=None, *, n_shadows=64, seed=0, map_fn=map):
        ids = dataset.ids if ids is None else np.asarray(ids, dtype=np.int64)
        pool = train_shadow_pool(dataset, recipe, n_shadows, seed, map_fn=map_fn)
        self = cls(dataset, ids, pool)
        self.fit_in, self.fit_out = _pool_fits(pool, dataset, ids, need_in=True)
        return self

    def score(self, target: ModelState) -> np.ndarray:
        m = _phi(target, self.dataset.features[self.ids], self.dataset.labels[self.ids])
        return _gauss_logpdf(m, self.fit_in) - _gauss_logpdf(m, self.fit_out)


@dataclasses.dataclass
class OfflineLiRA:
    """Offline LiRA: only out-shadows, one-sided tail statistic.

    With ``exclude`` the shadows are trained on random halves of the dataset
    minus those samples, so every excluded sample is out for every shadow.
    """

    dataset: Dataset
    ids: np.ndarray
    pool: ShadowPool = dataclasses.field(repr=False)
    fit_out: np.ndarray = dataclasses.field(repr=False, default=None)
    kind = "offline"

    @classmethod
    def prepare(cls, dataset, recipe: Recipe, ids=None, *, n_shadows=32, seed=0, exclude=None, map_fn=map):
        ids = dataset.ids if ids is None else np.asarray(ids, dtype=np.int64)
        pool = train_shadow_pool(dataset, recipe, n_shadows, seed, exclude=exclude, map_fn=map_fn)
        self = cls(dataset, ids, pool)
        _, self.fit_out = _pool_fits(pool, dataset, ids, need_in=False)
        return self

    def score(self, target: ModelState) -> np.ndarray:
        """Member-oriented offline statistic, ``1 - tail`` (see :attr:`LiraScore.value`)."""
        m = _phi(target, self.dataset.features[self.ids], self.dataset.labels[self.ids])
        return special.ndtr((m - self.fit_out[:, 0]) / np.sqrt(self.fit_out[:, 1]))


def train_shadow_pool(dataset, recipe, n_shadows, seed, exclude=None, map_fn=map) -> ShadowPool:
    n = len(dataset)
    allowed = np.ones(n, dtype=bool)
    if exclude is not None:
        allowed[np.asarray(list(exclude), dtype=np.int64)] = False
    rows = np.flatnonzero(allowed)
    masks = np.zeros((n_shadows, n), dtype=bool)
    for k in range(n_shadows):
        masks[k, rows[random_half_split(rows.size, seed + k)]] = True
    models = list(map_fn(_fit_job, [(recipe, dataset, masks[k], seed + k) for k in range(n_shadows)]))
    return ShadowPool(models, masks)


def _pool_fits(pool: ShadowPool, dataset, ids, need_in: bool):
    phis = _phi_matrix(pool.models, dataset, ids)
    member = pool.masks[:, ids]
    n_in, n_out = member.sum(axis=0), (~member).sum(axis=0)
    short = (n_out < 2) | ((n_in < 2) if need_in else False)
    if short.any():
        raise CoverageError("shadow pool lacks >= 2 in/out models", ids[short])
    fits = []
    for sel, count in ((member, n_in), (~member, n_out)):
        safe = np.maximum(count, 2)
        mu = np.where(sel, phis, 0.0).sum(axis=0) / np.maximum(count, 1)
        var = np.where(sel, (phis - mu) ** 2, 0.0).sum(axis=0) / (safe - 1)
        fits.append(np.column_stack([mu, np.maximum(var, VAR_FLOOR)]))
    return fits[0], fits[1]


def prepare_attack(kind: str, dataset: Dataset, recipe: Recipe, ids=None, *, params=None, map_fn=map):
    """Build a scorer of the given kind; ``params`` are passed to ``prepare``."""
    params = dict(params or {})
    if kind == "alira":
        return ALiRA.prepare(dataset, recipe, ids, map_fn=map_fn, **params)
    if kind == "online":
        return OnlineLiRA.prepare(dataset, recipe, ids, map_fn=map_fn, **params)
    if kind == "offline":
        return OfflineLiRA.prepare(dataset, recipe, ids, map_fn=map_fn, **params)
    raise ArgumentError(f"unknown attack kind {kind!r}")


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
