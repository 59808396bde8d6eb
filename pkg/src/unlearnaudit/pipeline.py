"""Staged experiment runner with an on-disk manifest.

Stages run in a fixed order and communicate only through files in the
output directory.  ``manifest.json`` records, per completed stage, the
SHA-256 of every artifact and the fingerprints of the upstream stages it
consumed.  A stage counts as complete only while all of those still match,
so deleting or editing an artifact re-runs its stage and everything that
depends on it.
"""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np

from . import attack as atk
from . import audit as aud
from . import config as cfgmod
from . import risk
from .accounting import noise_for_epsilon
from .data import AugmentationScheme, Dataset, generate_synthetic, load_delimited, save_delimited
from .errors import ConfigError, PipelineError
from .model import DpConfig, Recipe, TrainConfig, dp_steps, load_model, save_model
from .unlearn import UnlearnConfig, Unlearner

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-pool", "attack-bench", "risk", "unlearn", "audit")
DEPENDS = {
    "gen-data": (),
    "train-pool": ("gen-data",),
    "attack-bench": ("train-pool",),
    "risk": ("train-pool",),
    "unlearn": ("risk",),
    "audit": ("unlearn",),
}
MANIFEST = "manifest.json"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, out_dir: Path, cfg_hash: str, overwrite: bool = False):
        self.out_dir = out_dir
        self.path = out_dir / MANIFEST
        self.data = {"config_hash": cfg_hash, "stages": {}}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                old = json.load(fh)
            if old.get("config_hash") != cfg_hash:
                if not overwrite:
                    raise PipelineError(
                        f"{out_dir} holds outputs of config {old.get('config_hash', '?')[:12]}, "
                        f"not {cfg_hash[:12]}; pass --overwrite to replace them"
                    )
                log.info("config changed; discarding previous outputs in %s", out_dir)
            else:
                self.data = old
        out_dir.mkdir(parents=True, exist_ok=True)

    def save(self):
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.path)

    def fingerprint(self, stage: str) -> str | None:
        rec = self.data["stages"].get(stage)
        if rec is None:
            return None
        text = json.dumps(rec["artifacts"], sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def is_complete(self, stage: str) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None:
            return False
        for rel, digest in rec["artifacts"].items():
            p = self.out_dir / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        for dep in DEPENDS[stage]:
            if not self.is_complete(dep) or rec["upstream"].get(dep) != self.fingerprint(dep):
                return False
        return True

    def record(self, stage: str, artifacts: list[Path], seconds: float):
        self.data["stages"][stage] = {
            "artifacts": {str(p.relative_to(self.out_dir)): sha256_file(p) for p in sorted(artifacts)},
            "upstream": {dep: self.fingerprint(dep) for dep in DEPENDS[stage]},
            "seconds": seconds,
        }
        self.save()

    def invalidate(self, stage: str):
        self.data["stages"].pop(stage, None)
        self.save()


def _executor_map(workers: int):
    if workers <= 1:
        return map, None
    pool = concurrent.futures.ProcessPoolExecutor(max_workers=workers)

    def fn(func, items):
        items = list(items)
        chunk = max(1, math.ceil(len(items) / workers))
        return pool.map(func, items, chunksize=chunk)

    return fn, pool


@dataclasses.dataclass
class Context:
    cfg: dict
    out_dir: Path
    workers: int = 1
    overwrite: bool = False

    def __post_init__(self):
        self.hash = cfgmod.config_hash(self.cfg)
        self.tag = self.hash[:12]
        self.manifest = Manifest(self.out_dir, self.hash, self.overwrite)
        self.map, self._pool = _executor_map(self.workers)
        self._cache = {}

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def p(self, *parts) -> Path:
        return self.out_dir.joinpath(*parts)

    # -- shared loaders ------------------------------------------------------

    def dataset(self) -> Dataset:
        if "dataset" not in self._cache:
            ds = self.cfg["dataset"]
            grid = tuple(ds["grid"]) if ds["grid"] else None
            self._cache["dataset"] = load_delimited(self.p("data", "dataset.csv"), ds["num_classes"], grid)
        return self._cache["dataset"]

    def recipe(self) -> Recipe:
        if "recipe" not in self._cache:
            self._cache["recipe"] = build_recipe(self.cfg, len(self.dataset()))
        return self._cache["recipe"]

    def pool(self) -> risk.ModelPool:
        if "pool" not in self._cache:
            with open(self.p("pool", "pool.json"), encoding="utf-8") as fh:
                meta = json.load(fh)
            models = [load_model(self.p("pool", name)) for name in meta["models"]]
            masks = np.load(self.p("pool", "masks.npy"))
            self._cache["pool"] = risk.ModelPool(models, masks, meta["seeds"])
        return self._cache["pool"]

    def attack(self):
        if "attack" not in self._cache:
            self._cache["attack"] = build_attack(self.cfg, self.dataset(), self.recipe(), None, self.map)
        return self._cache["attack"]


def build_recipe(cfg: dict, n_samples: int) -> Recipe:
    mc, ds = cfg["model"], cfg["dataset"]
    arch = (ds["feature_dim"], *mc["hidden"], ds["num_classes"])
    train = TrainConfig(**mc["train"], seed=0)
    dp = None
    if mc["dp"] is not None:
        d = mc["dp"]
        sigma = d["noise_multiplier"]
        if sigma is None:
            steps = dp_steps(n_samples // 2, train)
            sigma = noise_for_epsilon(d["target_epsilon"], steps, d["delta"])
        dp = DpConfig(d["clip_norm"], sigma, d["delta"])
    return Recipe(arch, train, dp, mc["shared_init"], mc["init_seed"])


def build_attack(cfg: dict, dataset: Dataset, recipe: Recipe, ids, map_fn, kind=None, exclude=None):
    a = cfg["attack"]
    kind = kind or a["kind"]
    if kind == "alira":
        s = a["scheme"]
        scheme = AugmentationScheme(s["kind"], s["eta"], s["allow_flip"], s["max_shift"])
        return atk.ALiRA.prepare(dataset, recipe, ids, n_aug=a["n_aug"], scheme=scheme, seed=a["seed"],
                                 pairing=a["pairing"], shadow_seed=a["shadow_seed"], map_fn=map_fn)
    if kind == "online":
        return atk.OnlineLiRA.prepare(dataset, recipe, ids, n_shadows=a["shadow_models"],
                                      seed=a["shadow_seed"], map_fn=map_fn)
    n_out = a["shadow_models"] // 2 if exclude is not None else a["shadow_models"]
    return atk.OfflineLiRA.prepare(dataset, recipe, ids, n_shadows=n_out, seed=a["shadow_seed"],
                                   exclude=exclude, map_fn=map_fn)


# -- stages ----------------------------------------------------------------------


def stage_gen_data(ctx: Context) -> list[Path]:
    ds = ctx.cfg["dataset"]
    grid = tuple(ds["grid"]) if ds["grid"] else None
    if ds["source"] == "synthetic":
        dataset = generate_synthetic(ds["n_samples"], ds["num_classes"], ds["feature_dim"],
                                     ds["cluster_spread"], ds["seed"], grid)
    else:
        dataset = load_delimited(ds["path"], ds["num_classes"], grid)
        if dataset.feature_dim != ds["feature_dim"]:
            raise ConfigError(f"dataset file has {dataset.feature_dim} features, config says {ds['feature_dim']}")
    ctx.p("data").mkdir(exist_ok=True)
    path = ctx.p("data", "dataset.csv")
    save_delimited(dataset, path)
    ctx._cache.pop("dataset", None)
    return [path]


def stage_train_pool(ctx: Context) -> list[Path]:
    dataset, recipe = ctx.dataset(), ctx.recipe()
    pc = ctx.cfg["pool"]
    pool = risk.train_model_pool(dataset, pc["m"], recipe, pc["base_seed"], map_fn=ctx.map)
    d = ctx.p("pool")
    if d.exists():
        shutil.rmtree(d)
    d.mkdir()
    names, paths = [], []
    for i, model in enumerate(pool.models):
        name = f"model_{i:03d}.npz"
        save_model(model, d / name)
        names.append(name)
        paths.append(d / name)
    np.save(d / "masks.npy", pool.masks)
    spends = [dataclasses.asdict(s) if s else None for s in pool.spends]
    meta = {
        "config_hash": ctx.hash,
        "models": names,
        "seeds": pool.seeds,
        "arch": list(recipe.arch),
        "noise_multiplier": recipe.dp.noise_multiplier if recipe.dp else None,
        "privacy_spend": spends,
    }
    with open(d / "pool.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    ctx._cache.pop("pool", None)
    return paths + [d / "masks.npy", d / "pool.json"]


def bench_ids(cfg: dict, n: int) -> np.ndarray:
    a = cfg["attack"]
    rng = np.random.default_rng([a["seed"], 7])
    return np.sort(rng.permutation(n)[: min(a["bench_samples"], n)])


def run_attack_bench(cfg: dict, dataset: Dataset, recipe: Recipe, pool: risk.ModelPool, map_fn=map) -> list[dict]:
    """AUC, TPR at the configured FPR and wall-clock for every attack kind."""
    ids = bench_ids(cfg, len(dataset))
    a = cfg["attack"]
    member = pool.masks[:, ids]
    rows = []
    for kind in atk.ATTACK_KINDS:
        t0 = time.perf_counter()
        attack = build_attack(cfg, dataset, recipe, ids, map_fn, kind=kind,
                              exclude=ids if kind == "offline" else None)
        scores = np.stack([attack.score(m) for m in pool.models])
        seconds = time.perf_counter() - t0
        row = {
            "attack": kind,
            "auc": atk.auc(scores.ravel(), member.ravel()),
            "tpr_at_fpr": atk.tpr_at_fpr(scores.ravel(), member.ravel(), a["bench_fpr"]),
            "fpr": a["bench_fpr"],
            "n_samples": int(ids.size),
            "n_targets": len(pool),
            "shadow_models": _shadow_count(attack),
            "seconds": seconds,
        }
        if kind == "alira" and a["calibration_models"]:
            row["tpr_at_fpr_calibrated"] = _calibrated_tpr(cfg, dataset, recipe, attack, scores, member, map_fn)
        rows.append(row)
    return rows


def _shadow_count(attack) -> int:
    return len(attack.shadows) if isinstance(attack, atk.ALiRA) else len(attack.pool)


def _calibrated_tpr(cfg, dataset, recipe, attack, scores, member, map_fn) -> float:
    """TPR with tau taken from non-member scores on separately trained models."""
    a = cfg["attack"]
    cal = atk.train_shadow_pool(dataset, recipe, a["calibration_models"], a["shadow_seed"] + 50000, map_fn=map_fn)
    cal_scores = np.stack([attack.score(m) for m in cal.models])
    tau = atk.threshold_at_fpr(cal_scores[~cal.masks[:, attack.ids]], a["bench_fpr"])
    return float(np.mean(scores[member] > tau))


def stage_attack_bench(ctx: Context) -> list[Path]:
    rows = run_attack_bench(ctx.cfg, ctx.dataset(), ctx.recipe(), ctx.pool(), ctx.map)
    path = ctx.p("attack_bench.csv")
    keys = ["attack", "auc", "tpr_at_fpr", "fpr", "n_samples", "n_targets", "shadow_models", "seconds"]
    if any("tpr_at_fpr_calibrated" in r for r in rows):
        keys.append("tpr_at_fpr_calibrated")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + ["config_hash"])
        for r in rows:
            w.writerow([r.get(k, "") for k in keys] + [ctx.tag])
    return [path]


def _ln_ceiling(pool: risk.ModelPool) -> float:
    n_out = (~pool.masks).sum(axis=0)
    return float(np.log(n_out.max()))


def stage_risk(ctx: Context) -> list[Path]:
    dataset, pool = ctx.dataset(), ctx.pool()
    kind = ctx.cfg["attack"]["kind"]
    table = risk.estimate_risk_table(dataset, pool, ctx.attack(), provenance=f"{kind}/original/cfg={ctx.tag}",
                                     map_fn=ctx.map)
    ctx.p("risk").mkdir(exist_ok=True)
    path = ctx.p("risk", "before.csv")
    risk.save_risk_table(table, path)
    return [path]


def unlearn_runs(cfg: dict):
    for method in cfg["unlearn"]["methods"]:
        for direction in cfg["audit"]["directions"]:
            for k in cfg["audit"]["k"]:
                yield method, direction, k


def run_dir(method, direction, k) -> Path:
    return Path("unlearn", method, f"{direction}_{cfgmod.k_label(k)}")


def unlearner_for(cfg: dict, method: str, dataset, recipe) -> Unlearner:
    section = cfg["unlearn"][method]
    config = UnlearnConfig(method=method, seed=cfg["unlearn"]["seed"], **section)
    return Unlearner(dataset, recipe, config)


def stage_unlearn(ctx: Context) -> list[Path]:
    dataset, pool, recipe = ctx.dataset(), ctx.pool(), ctx.recipe()
    before = risk.load_risk_table(ctx.p("risk", "before.csv"))
    kind = ctx.cfg["attack"]["kind"]
    attack = ctx.attack()
    base = ctx.p("unlearn")
    if base.exists():
        shutil.rmtree(base)
    paths = []
    for method, direction, k in unlearn_runs(ctx.cfg):
        d = ctx.p(run_dir(method, direction, k))
        (d / "models").mkdir(parents=True)
        forget = aud.select_by_risk(before, k, direction, n_total=len(dataset))
        fn = unlearner_for(ctx.cfg, method, dataset, recipe)
        tag = f"{kind}/{method}/{direction}/{cfgmod.k_label(k)}/cfg={ctx.tag}"
        table, models = risk.reestimate_after_unlearn(pool, fn, forget, dataset, attack, provenance=tag,
                                                      map_fn=ctx.map)
        with open(d / "forget_ids.json", "w", encoding="utf-8") as fh:
            json.dump({"config_hash": ctx.hash, "forget_ids": forget}, fh)
        risk.save_risk_table(table, d / "after.csv")
        paths += [d / "forget_ids.json", d / "after.csv"]
        for i, m in enumerate(models):
            mp = d / "models" / f"model_{i:03d}.npz"
            save_model(m, mp)
            paths.append(mp)
    return paths


def thresholds_for(cfg: dict, pool: risk.ModelPool) -> aud.Thresholds:
    a = cfg["audit"]
    spends = [s for s in pool.spends if s is not None]
    dp_mode = a["dp_mode"] if a["dp_mode"] is not None else bool(spends)
    eps = a["epsilon"]
    if eps is None and spends:
        eps = max(s.epsilon for s in spends)
    if dp_mode and eps is None:
        raise ConfigError("audit.dp_mode needs audit.epsilon or a DP-trained pool")
    return aud.Thresholds(a["t1"], a["t_abs"], eps, a["t2"], dp_mode)


def stage_audit(ctx: Context) -> list[Path]:
    dataset, pool = ctx.dataset(), ctx.pool()
    before = risk.load_risk_table(ctx.p("risk", "before.csv"))
    thresholds = thresholds_for(ctx.cfg, pool)
    ceiling = _ln_ceiling(pool)
    base = ctx.p("audit")
    if base.exists():
        shutil.rmtree(base)
    base.mkdir()
    paths = []
    summary = []
    for method, direction, k in unlearn_runs(ctx.cfg):
        src = ctx.p(run_dir(method, direction, k))
        after = risk.load_risk_table(src / "after.csv")
        with open(src / "forget_ids.json", encoding="utf-8") as fh:
            forget = json.load(fh)["forget_ids"]
        provenance = {
            "config_hash": ctx.hash,
            "attack": ctx.cfg["attack"]["kind"],
            "method": method,
            "direction": direction,
            "k": k,
            "pool_m": len(pool),
            "dp": ctx.cfg["model"]["dp"] is not None,
        }
        report = aud.build_report(before, after, forget, thresholds, provenance, all_ids=dataset.ids.tolist(),
                                  ln_ratio_ceiling=ceiling)
        d = base / method / f"{direction}_{cfgmod.k_label(k)}"
        d.mkdir(parents=True)
        aud.save_report(report, d / "report.json")
        aud.save_verdicts(report, d / "verdicts.csv", config_hash=ctx.tag)
        paths += [d / "report.json", d / "verdicts.csv"]
        summary.append((method, direction, k, report))
    paths += _write_plot_data(ctx, base, summary)
    return paths


def _write_plot_data(ctx: Context, base: Path, summary) -> list[Path]:
    methods = ctx.cfg["unlearn"]["methods"]
    paths = []
    table = {(m, d, k): r for m, d, k, r in summary}
    path = base / "summary.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "direction", "k", "failure_rate_c1", "failure_rate_c1_abs", "failure_rate_c2",
                    "c2_variant", "n_forget", "n_retained", "config_hash"])
        for m, d, k, r in summary:
            w.writerow([m, d, k, r.failure_rate_c1, r.failure_rate_c1_abs, r.failure_rate_c2, r.c2_variant,
                        r.n_forget, r.n_retained, ctx.tag])
    paths.append(path)
    for crit, attr in (("c1", "failure_rate_c1"), ("c1_abs", "failure_rate_c1_abs"), ("c2", "failure_rate_c2")):
        for direction in ctx.cfg["audit"]["directions"]:
            p = base / f"plot_{crit}_{direction}.csv"
            with open(p, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["k"] + methods + ["config_hash"])
                for k in ctx.cfg["audit"]["k"]:
                    w.writerow([k] + [getattr(table[(m, direction, k)], attr) for m in methods] + [ctx.tag])
            paths.append(p)
    return paths


STAGE_FUNCS = {
    "gen-data": stage_gen_data,
    "train-pool": stage_train_pool,
    "attack-bench": stage_attack_bench,
    "risk": stage_risk,
    "unlearn": stage_unlearn,
    "audit": stage_audit,
}


def downstream(stage: str) -> list[str]:
    """Stages that consume ``stage`` directly or transitively."""
    out = []
    for s in STAGES:
        if any(d == stage or d in out for d in DEPENDS[s]):
            out.append(s)
    return out


def run_stage(ctx: Context, stage: str, force: bool = False) -> bool:
    """Run one stage if needed; returns whether it executed."""
    for dep in DEPENDS[stage]:
        if not ctx.manifest.is_complete(dep):
            raise PipelineError(f"stage {stage!r} needs {dep!r}, which has not completed")
    if not force and ctx.manifest.is_complete(stage):
        log.info("%s: up to date", stage)
        return False
    ctx.manifest.invalidate(stage)
    log.info("%s: running", stage)
    t0 = time.perf_counter()
    artifacts = STAGE_FUNCS[stage](ctx)
    ctx.manifest.record(stage, artifacts, time.perf_counter() - t0)
    for later in downstream(stage):
        ctx.manifest.invalidate(later)
    log.info("%s: done in %.1fs", stage, time.perf_counter() - t0)
    return True


def run_all(ctx: Context) -> list[str]:
    executed = []
    for stage in STAGES:
        if run_stage(ctx, stage):
            executed.append(stage)
    return executed
