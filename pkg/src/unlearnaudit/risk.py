"""Per-sample privacy risk: the greatest TPR/FPR of an attack across a pool.

Each pool model is trained on a random half of the dataset, so every sample
is a member of roughly half the models.  Attacking every (sample, model)
pair yields, per sample, one list of scores from models that trained on it
and one from models that did not; :func:`per_sample_risk` scans thresholds
over those two lists.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset, random_half_split
from .errors import ArgumentError, CoverageError, FormatError
from .model import ModelState, PrivacySpend, Recipe

MASK_SEED_OFFSET = 0


@dataclasses.dataclass
class ModelPool:
    models: list[ModelState]
    masks: np.ndarray  # (m, n) bool
    seeds: list[int]

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.shape[0] != len(self.models) or len(self.seeds) != len(self.models):
            raise ArgumentError("models, masks and seeds must align")

    def __len__(self):
        return len(self.models)

    @property
    def spends(self) -> list[PrivacySpend | None]:
        return [m.spend for m in self.models]

    def check_coverage(self, min_each: int = 1) -> None:
        n_in = self.masks.sum(axis=0)
        n_out = len(self) - n_in
        bad = np.flatnonzero((n_in < min_each) | (n_out < min_each))
        if bad.size:
            raise CoverageError(f"pool needs each sample as member and non-member >= {min_each} times", bad)


@dataclasses.dataclass(frozen=True)
class RiskRecord:
    sample_id: int
    tpr: float
    fpr: float
    ratio: float
    ln_ratio: float


@dataclasses.dataclass
class RiskTable:
    records: dict[int, RiskRecord]
    provenance: str = "original"
    flagged: list[int] = dataclasses.field(default_factory=list)

    def __getitem__(self, sample_id: int) -> RiskRecord:
        return self.records[sample_id]

    def __contains__(self, sample_id) -> bool:
        return sample_id in self.records

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, RiskTable):
            return NotImplemented
        return self.records == other.records and self.flagged == other.flagged

    @property
    def ids(self) -> list[int]:
        return sorted(self.records)

    def column(self, name: str, ids: Iterable[int] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else list(ids)
        return np.array([getattr(self.records[i], name) for i in ids], dtype=np.float64)


# -- pool training ------------------------------------------------------------


def pool_seeds(m: int, base_seed: int) -> list[int]:
    return [base_seed + MASK_SEED_OFFSET + i for i in range(m)]


def train_model_pool(dataset: Dataset, m: int, recipe: Recipe, base_seed: int = 0, map_fn=map) -> ModelPool:
    """``m`` models, model ``i`` trained on ``random_half_split(n, base_seed + i)``."""
    if m < 4:
        raise ArgumentError("a pool needs at least 4 models")
    if m % 2:
        raise ArgumentError("pool size must be even")
    seeds = pool_seeds(m, base_seed)
    masks = np.stack([random_half_split(len(dataset), s) for s in seeds])
    models = list(map_fn(_fit, [(recipe, dataset, masks[k], seeds[k]) for k in range(m)]))
    return ModelPool(models, masks, seeds)


def _fit(args):
    recipe, dataset, mask, seed = args
    return recipe.fit(dataset, mask, seed)


# -- scoring ------------------------------------------------------------------


@dataclasses.dataclass
class ScoreMatrix:
    """One attack score and one true membership bit per (model, sample)."""

    scores: np.ndarray  # (m, n_ids)
    membership: np.ndarray  # (m, n_ids) bool
    ids: np.ndarray

    def for_sample(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        col, mem = self.scores[:, j], self.membership[:, j]
        return col[mem], col[~mem]


def collect_scores(models: Sequence[ModelState], masks: np.ndarray, attack, map_fn=map) -> ScoreMatrix:
    """Score every prepared sample of ``attack`` on every model.

    ``masks`` are the membership labels; after unlearning they remain the
    masks the models were originally trained with.
    """
    masks = np.asarray(masks, dtype=bool)
    ids = np.asarray(attack.ids)
    member = masks[:, ids]
    n_in = member.sum(axis=0)
    bad = ids[(n_in == 0) | (n_in == len(models))]
    if bad.size:
        raise CoverageError("each sample needs member and non-member models", bad)
    scores = np.stack(list(map_fn(attack.score, models)))
    return ScoreMatrix(scores, member, ids)


def _ratio_scan(member_scores, nonmember_scores, fpr_floor):
    """TPR, FPR, ratio and tau for every candidate threshold (sorted ascending)."""
    pos = np.sort(np.asarray(member_scores, dtype=np.float64))
    neg = np.sort(np.asarray(nonmember_scores, dtype=np.float64))
    taus = np.concatenate([[-np.inf], np.unique(np.concatenate([pos, neg]))])
    tpr = (pos.size - np.searchsorted(pos, taus, side="right")) / pos.size
    fpr = np.maximum((neg.size - np.searchsorted(neg, taus, side="right")) / neg.size, fpr_floor)
    return tpr, fpr, tpr / fpr, taus


def per_sample_risk(member_scores, nonmember_scores, fpr_floor: float | None = None, sample_id: int = -1) -> RiskRecord:
    """Greatest TPR/FPR over thresholds ``tau`` (rule: score > tau).

    Candidates are ``-inf`` and every distinct observed score.  FPR is
    floored at ``fpr_floor`` (default ``1 / len(nonmember_scores)``); ties in
    the ratio go to the larger TPR, then the larger tau.
    """
    if len(member_scores) == 0 or len(nonmember_scores) == 0:
        raise ArgumentError("per_sample_risk needs member and non-member scores")
    if fpr_floor is None:
        fpr_floor = 1.0 / len(nonmember_scores)
    if not 0 < fpr_floor <= 1:
        raise ArgumentError("fpr_floor must lie in (0, 1]")
    tpr, fpr, ratio, taus = _ratio_scan(member_scores, nonmember_scores, fpr_floor)
    # lexsort: last key is primary
    best = np.lexsort((taus, tpr, ratio))[-1]
    r = float(ratio[best])
    ln = math.log(r) if r > 0 else -math.inf
    return RiskRecord(int(sample_id), float(tpr[best]), float(fpr[best]), r, ln)


def risk_from_scores(matrix: ScoreMatrix, provenance: str, fpr_floor: float | None = None) -> RiskTable:
    records = {}
    for j, sid in enumerate(matrix.ids):
        pos, neg = matrix.for_sample(j)
        records[int(sid)] = per_sample_risk(pos, neg, fpr_floor, int(sid))
    return RiskTable(records, provenance)


def estimate_risk_table(dataset: Dataset, pool: ModelPool, attack, provenance: str = "original",
                        fpr_floor: float | None = None, map_fn=map) -> RiskTable:
    matrix = collect_scores(pool.models, pool.masks, attack, map_fn=map_fn)
    table = risk_from_scores(matrix, provenance, fpr_floor)
    table.flagged = sorted(set(dataset.ids.tolist()) - set(table.records))
    return table


def unlearn_pool(pool: ModelPool, dataset: Dataset, forget_ids, unlearn_fn: Callable, map_fn=map) -> tuple[list[ModelState], list[bool]]:
    """Apply ``unlearn_fn(model, forget_mask, retain_mask, seed)`` to every pool
    model that trained on any forget id; other models are returned as is."""
    forget = np.zeros(len(dataset), dtype=bool)
    forget[np.asarray(sorted(forget_ids), dtype=np.int64)] = True
    jobs, touched = [], []
    for model, mask, seed in zip(pool.models, pool.masks, pool.seeds):
        own = mask & forget
        touched.append(bool(own.any()))
        if own.any():
            jobs.append((unlearn_fn, model, own, mask & ~forget, seed))
    done = iter(list(map_fn(_unlearn_job, jobs)))
    models = [next(done) if t else m for m, t in zip(pool.models, touched)]
    return models, touched


def _unlearn_job(args):
    fn, model, forget_mask, retain_mask, seed = args
    return fn(model, forget_mask, retain_mask, seed)


def reestimate_after_unlearn(pool: ModelPool, unlearn_fn: Callable, forget_ids, dataset: Dataset, attack,
                             provenance: str = "unlearned", fpr_floor: float | None = None,
                             map_fn=map) -> tuple[RiskTable, list[ModelState]]:
    """Risk table after unlearning ``forget_ids`` from the pool.

    Membership labels stay the original masks, so forgotten samples still
    count as members of the models that once trained on them.
    """
    if len(forget_ids) == 0:
        raise ArgumentError("forget_ids must be non-empty")
    models, _ = unlearn_pool(pool, dataset, forget_ids, unlearn_fn, map_fn=map_fn)
    matrix = collect_scores(models, pool.masks, attack, map_fn=map_fn)
    table = risk_from_scores(matrix, provenance, fpr_floor)
    table.flagged = sorted(set(dataset.ids.tolist()) - set(table.records))
    return table, models


# -- serialization --------------------------------------------------------------

RISK_HEADER = ["sample_id", "tpr", "fpr", "ratio", "ln_ratio", "provenance"]


def _fmt(x: float) -> str:
    return "-inf" if x == -math.inf else repr(float(x))


def save_risk_table(table: RiskTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(RISK_HEADER) + "\n")
        for sid in table.ids:
            r = table.records[sid]
            fh.write(f"{sid},{_fmt(r.tpr)},{_fmt(r.fpr)},{_fmt(r.ratio)},{_fmt(r.ln_ratio)},{table.provenance}\n")


def load_risk_table(path: str | Path) -> RiskTable:
    records = {}
    provenance = "original"
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != RISK_HEADER:
            raise FormatError(f"{path}: unexpected header {header}")
        for rowno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(RISK_HEADER):
                raise FormatError("wrong column count", rowno)
            try:
                sid = int(parts[0])
                tpr, fpr, ratio, ln = (float(v) for v in parts[1:5])
            except ValueError as exc:
                raise FormatError(str(exc), rowno) from None
            provenance = parts[5]
            records[sid] = RiskRecord(sid, tpr, fpr, ratio, ln)
    return RiskTable(records, provenance)
