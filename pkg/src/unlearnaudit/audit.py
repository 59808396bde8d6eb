"""Criterion verdicts and failure rates from before/after risk tables.

Conventions echoed in every report:

* Criterion 1 (forgotten samples) compares raw ratios TPR/FPR, strictly:
  pass iff ``after.ratio < before.ratio - t1``.  The absolute variant passes
  iff ``after.ln_ratio < t_abs``.
* Criterion 2 with a DP budget compares logs, non-strictly: pass iff
  ``after.ln_ratio <= epsilon``.
* Criterion 2 without DP bounds raw ratios by the largest original ratio:
  pass iff ``after.ratio <= max(before.ratio) + t2``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ArgumentError, CoverageError
from .risk import RiskTable

CRITERIA = ("c1", "c1_abs", "c2_dp", "c2_nondp")
CONVENTIONS = {
    "c1": "pass iff after.ratio < before.ratio - t1 (raw TPR/FPR, strict)",
    "c1_abs": "pass iff after.ln_ratio < t_abs (strict)",
    "c2_dp": "pass iff after.ln_ratio <= epsilon (log form, non-strict)",
    "c2_nondp": "pass iff after.ratio <= max_x before.ratio + t2 (raw, non-strict)",
}


@dataclasses.dataclass(frozen=True)
class Thresholds:
    t1: float = 0.0
    t_abs: float = 0.01
    epsilon: float | None = None
    t2: float = 0.0
    dp_mode: bool = False

    def __post_init__(self):
        if self.t1 < 0 or self.t_abs < 0:
            raise ArgumentError("t1 and t_abs must be >= 0")
        if self.dp_mode and not (self.epsilon is not None and self.epsilon > 0):
            raise ArgumentError("dp_mode needs epsilon > 0")


@dataclasses.dataclass(frozen=True)
class CriterionVerdict:
    sample_id: int
    criterion: str
    passed: bool
    margin: float


@dataclasses.dataclass
class AuditReport:
    failure_rate_c1: float | None
    failure_rate_c1_abs: float | None
    failure_rate_c2: float | None
    c2_variant: str
    verdicts: dict[str, list[CriterionVerdict]]
    thresholds: Thresholds
    provenance: dict
    fpr_floor: str
    ln_ratio_ceiling: float | None
    n_forget: int
    n_retained: int

    def to_dict(self) -> dict:
        return {
            "failure_rate_c1": self.failure_rate_c1,
            "failure_rate_c1_abs": self.failure_rate_c1_abs,
            "failure_rate_c2": self.failure_rate_c2,
            "c2_variant": self.c2_variant,
            "n_forget": self.n_forget,
            "n_retained": self.n_retained,
            "thresholds": dataclasses.asdict(self.thresholds),
            "conventions": CONVENTIONS,
            "fpr_floor": self.fpr_floor,
            "ln_ratio_ceiling": _num(self.ln_ratio_ceiling),
            "provenance": self.provenance,
            "verdicts": {
                name: {
                    "sample_id": [v.sample_id for v in vs],
                    "pass": [v.passed for v in vs],
                    "margin": [_num(v.margin) for v in vs],
                }
                for name, vs in self.verdicts.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        verdicts = {
            name: [
                CriterionVerdict(int(s), name, bool(p), _unnum(m))
                for s, p, m in zip(v["sample_id"], v["pass"], v["margin"])
            ]
            for name, v in d["verdicts"].items()
        }
        return cls(
            d["failure_rate_c1"], d["failure_rate_c1_abs"], d["failure_rate_c2"], d["c2_variant"], verdicts,
            Thresholds(**d["thresholds"]), d["provenance"], d["fpr_floor"], _unnum(d["ln_ratio_ceiling"]),
            d["n_forget"], d["n_retained"],
        )


def _num(x):
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _unnum(x):
    if x is None:
        return None
    return float(x)


def _require(table: RiskTable, ids: Iterable[int], what: str) -> None:
    missing = [i for i in ids if i not in table]
    if missing:
        raise CoverageError(f"{what} table lacks samples", missing)


def select_by_risk(table: RiskTable, k: float, direction: str = "top", n_total: int | None = None) -> list[int]:
    """``ceil(k * N)`` ids with the largest (top) or smallest (bottom) ln_ratio.

    Ties go to the smaller sample id.
    """
    if not 0 < k <= 0.5:
        raise ArgumentError("k must lie in (0, 0.5]")
    if direction not in ("top", "bottom"):
        raise ArgumentError("direction must be 'top' or 'bottom'")
    n = len(table) if n_total is None else n_total
    count = math.ceil(round(k * n, 9))
    ids = table.ids
    ln = table.column("ln_ratio", ids)
    key = -ln if direction == "top" else ln
    order = np.lexsort((np.asarray(ids), key))
    return sorted(int(ids[i]) for i in order[:count])


def check_criterion1(before: RiskTable, after: RiskTable, forget_ids, t1: float = 0.0,
                     t_abs: float = 0.01) -> dict[str, list[CriterionVerdict]]:
    forget_ids = sorted(forget_ids)
    _require(before, forget_ids, "before")
    _require(after, forget_ids, "after")
    c1, c1_abs = [], []
    for i in forget_ids:
        b, a = before[i], after[i]
        bound = b.ratio - t1
        c1.append(CriterionVerdict(i, "c1", a.ratio < bound, bound - a.ratio))
        c1_abs.append(CriterionVerdict(i, "c1_abs", a.ln_ratio < t_abs, t_abs - a.ln_ratio))
    return {"c1": c1, "c1_abs": c1_abs}


def check_criterion2_dp(after: RiskTable, retained_ids, epsilon: float) -> list[CriterionVerdict]:
    retained_ids = sorted(retained_ids)
    _require(after, retained_ids, "after")
    out = []
    for i in retained_ids:
        ln = after[i].ln_ratio
        out.append(CriterionVerdict(i, "c2_dp", ln <= epsilon, epsilon - ln))
    return out


def check_criterion2_nondp(before: RiskTable, after: RiskTable, retained_ids, t2: float = 0.0) -> list[CriterionVerdict]:
    retained_ids = sorted(retained_ids)
    _require(after, retained_ids, "after")
    bound = max(r.ratio for r in before.records.values()) + t2
    out = []
    for i in retained_ids:
        ratio = after[i].ratio
        out.append(CriterionVerdict(i, "c2_nondp", ratio <= bound, bound - ratio))
    return out


def failure_rate(verdicts) -> float:
    verdicts = list(verdicts)
    if not verdicts:
        raise ArgumentError("failure_rate needs at least one verdict")
    return sum(not v.passed for v in verdicts) / len(verdicts)


def _rate_or_none(verdicts):
    return failure_rate(verdicts) if verdicts else None


def build_report(before: RiskTable, after: RiskTable, forget_ids, thresholds: Thresholds,
                 provenance: dict | None = None, all_ids=None, fpr_floor: str = "1/n_nonmember",
                 ln_ratio_ceiling: float | None = None) -> AuditReport:
    """Run every criterion; ``dp_mode`` picks the variant behind ``failure_rate_c2``."""
    all_ids = sorted(before.ids if all_ids is None else all_ids)
    forget = set(int(i) for i in forget_ids)
    retained = [i for i in all_ids if i not in forget]
    verdicts = check_criterion1(before, after, forget, thresholds.t1, thresholds.t_abs) if forget else {"c1": [], "c1_abs": []}
    verdicts["c2_nondp"] = check_criterion2_nondp(before, after, retained, thresholds.t2) if retained else []
    if thresholds.epsilon is not None:
        verdicts["c2_dp"] = check_criterion2_dp(after, retained, thresholds.epsilon) if retained else []
    variant = "c2_dp" if thresholds.dp_mode else "c2_nondp"
    return AuditReport(
        failure_rate_c1=_rate_or_none(verdicts["c1"]),
        failure_rate_c1_abs=_rate_or_none(verdicts["c1_abs"]),
        failure_rate_c2=_rate_or_none(verdicts[variant]),
        c2_variant=variant,
        verdicts=verdicts,
        thresholds=thresholds,
        provenance=dict(provenance or {}),
        fpr_floor=fpr_floor,
        ln_ratio_ceiling=ln_ratio_ceiling,
        n_forget=len(forget),
        n_retained=len(retained),
    )


def save_report(report: AuditReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_report(path: str | Path) -> AuditReport:
    with open(path, encoding="utf-8") as fh:
        return AuditReport.from_dict(json.load(fh))


def save_verdicts(report: AuditReport, path: str | Path, config_hash: str | None = None) -> None:
    """Flat per-sample file: sample_id, criterion, pass, margin[, config_hash]."""
    extra = [] if config_hash is None else [config_hash]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "criterion", "pass", "margin"] + (["config_hash"] if extra else []))
        for name in sorted(report.verdicts):
            for v in report.verdicts[name]:
                w.writerow([v.sample_id, name, int(v.passed), repr(float(v.margin))] + extra)
