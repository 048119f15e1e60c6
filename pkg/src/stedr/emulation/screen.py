"""Drug screening: many emulated trials per drug, balance filter, aggregation, BH."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import IneligibleDrug, PositivityViolation, TrainingDiverged
from ..metrics import bh_adjust, trial_aggregate
from .cohort import CohortIndex, TrialSpec, build_trial
from .trial import emulate_trial, emulation_config

log = logging.getLogger(__name__)

VERDICTS = ("population_candidate", "subgroup_candidate", "not_significant", "unbalanced",
            "ineligible")
SIGNIFICANCE = 0.05


def trial_seed(base_seed, drug, trial_index):
    """Per-trial seed that depends only on (base seed, drug, trial index)."""
    return int(np.random.SeedSequence([base_seed, drug, trial_index]).generate_state(1)[0])


def trial_specs(drug, n_trials, base_seed):
    """First half random-control trials, second half same-class-control trials."""
    n_random = n_trials // 2
    return [TrialSpec(drug, i, "random" if i < n_random else "same_class",
                      trial_seed(base_seed, drug, i)) for i in range(n_trials)]


@dataclass
class Estimate:
    mean: float
    low: float
    up: float
    p: float
    p_adj: float = float("nan")
    n_trials: int = 0


@dataclass
class DrugReport:
    drug: int
    verdict: str
    n_cases: int
    n_trials: int
    n_balanced_trials: int
    overall: Estimate = None
    subgroups: list = field(default_factory=list)
    # pooled estimates recomputed within each control mode
    stratified: dict = field(default_factory=dict)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ScreenReport:
    drugs: list                 # DrugReport per screened drug, sorted by drug id
    trials: list                # TrialResult (or failure dicts) sorted by (drug, trial_index)
    n_hypotheses: int
    config: dict

    def to_dict(self):
        return {"drugs": [d.to_dict() for d in self.drugs], "n_hypotheses": self.n_hypotheses,
                "hypothesis_family": "overall + each subgroup per eligible drug, pooled over drugs",
                "config": self.config}

    def digest(self):
        h = hashlib.sha256()
        h.update(json.dumps(self.to_dict(), sort_keys=True, default=_plain).encode())
        for t in self.trials:
            h.update((t.digest() if hasattr(t, "digest") else json.dumps(t, sort_keys=True)).encode())
        return h.hexdigest()


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x).__name__)


# ---------------------------------------------------------------- worker plumbing

_SHARED = {}


def _init_worker(db, catalog, index):
    torch.set_num_threads(1)
    _SHARED.update(db=db, catalog=catalog, index=index)


def _run_job(job):
    spec, config = job
    db, catalog, index = _SHARED["db"], _SHARED["catalog"], _SHARED["index"]
    try:
        build_trial(db, catalog, spec, index=index)
        return emulate_trial(db, spec, config)
    except (IneligibleDrug, PositivityViolation, TrainingDiverged) as exc:
        return {"drug": spec.drug, "trial_index": spec.trial_index,
                "control_mode": spec.control_mode, "seed": spec.seed, "failed": str(exc)}


def n_workers():
    raw = os.environ.get("STEDR_THREADS")
    return max(1, int(raw)) if raw else (os.cpu_count() or 1)


def run_trials(db, catalog, jobs, index, workers=None):
    """Run (spec, config) jobs; output order is the job order regardless of workers."""
    workers = workers or n_workers()
    if workers == 1 or len(jobs) <= 1:
        _init_worker(db, catalog, index)
        return [_run_job(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers, initializer=_init_worker, initargs=(db, catalog, index)) as pool:
        return pool.map(_run_job, jobs, chunksize=1)


# ---------------------------------------------------------------- aggregation

def _aggregate(values, two_sided):
    vals = np.array([v for v in values if v is not None], dtype=float)
    if vals.size < 2:
        return Estimate(float("nan"), float("nan"), float("nan"), 1.0, n_trials=int(vals.size))
    agg = trial_aggregate(vals, two_sided=two_sided)[0]
    return Estimate(agg.mean, agg.low, agg.up, agg.p_value, n_trials=int(vals.size))


def _summaries(trials, K, two_sided):
    overall = _aggregate([t.overall_ate for t in trials], two_sided)
    subs = [_aggregate([t.subgroup_ate[k] for t in trials], two_sided) for k in range(K)]
    return overall, subs


def verdict_for(report):
    if report.verdict in ("ineligible", "unbalanced"):
        return report.verdict
    o = report.overall
    if o.p_adj < SIGNIFICANCE and o.mean < 0:
        return "population_candidate"
    if any(s.p_adj < SIGNIFICANCE and s.mean < 0 for s in report.subgroups):
        return "subgroup_candidate"
    return "not_significant"


def run_screen(db, catalog, drugs, train_config=None, n_trials=100, seed=0, criteria=None,
               workers=None, two_sided=False, index=None):
    """Emulate ``n_trials`` trials per drug and return a ScreenReport.

    Only balanced trials enter the aggregates. Benjamini-Hochberg runs once
    over overall and per-subgroup p-values of every eligible drug.
    """
    base = train_config or emulation_config()
    K = base.K
    index = index or CohortIndex(db, catalog, criteria)
    drugs = sorted(int(d) for d in drugs)
    eligible = [d for d in drugs if index.n_cases(d) >= index.criteria.min_cases]
    jobs = [(spec, dataclasses.replace(base, seed=spec.seed % (2 ** 31)))
            for d in eligible for spec in trial_specs(d, n_trials, seed)]
    results = run_trials(db, catalog, jobs, index, workers)

    by_drug = {d: [] for d in drugs}
    for r in results:
        by_drug[r["drug"] if isinstance(r, dict) else r.drug].append(r)

    reports = []
    for d in drugs:
        if d not in eligible:
            reports.append(DrugReport(d, "ineligible", index.n_cases(d), 0, 0))
            continue
        done = [r for r in by_drug[d] if not isinstance(r, dict)]
        balanced = [r for r in done if r.balance.balanced]
        overall, subs = _summaries(balanced, K, two_sided)
        strat = {}
        for mode in ("random", "same_class"):
            o, s = _summaries([r for r in balanced if r.control_mode == mode], K, two_sided)
            strat[mode] = {"overall": o, "subgroups": s}
        verdict = "unbalanced" if len(balanced) < 2 else ""
        reports.append(DrugReport(d, verdict, index.n_cases(d), len(by_drug[d]), len(balanced),
                                  overall, subs, strat))

    family = [r for r in reports if r.verdict != "ineligible"]
    pvals = [e.p for r in family for e in [r.overall, *r.subgroups]]
    adjusted = iter(bh_adjust(pvals)) if pvals else iter(())
    for r in family:
        for e in [r.overall, *r.subgroups]:
            e.p_adj = float(next(adjusted))
        r.verdict = verdict_for(r)
    cfg = {"train": base.to_dict(), "n_trials": n_trials, "seed": seed,
           "criteria": dataclasses.asdict(index.criteria), "two_sided": two_sided}
    return ScreenReport(reports, results, len(pvals), cfg)


# ---------------------------------------------------------------- outputs

def _rows(report):
    for d in report.drugs:
        if d.overall is None:
            yield [d.drug, "overall", "", "", "", "", "", d.verdict]
            continue
        labels = ["overall"] + [f"subgroup_{k + 1}" for k in range(len(d.subgroups))]
        for label, e in zip(labels, [d.overall, *d.subgroups]):
            yield [d.drug, label, e.mean, e.low, e.up, e.p, e.p_adj, d.verdict]


def write_screen(report, out_dir):
    """drug_reports.json, drug_reports.csv (also the forest-plot data) and trials.jsonl."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": os.path.join(out_dir, "drug_reports.json"),
             "csv": os.path.join(out_dir, "drug_reports.csv"),
             "trials": os.path.join(out_dir, "trials.jsonl")}
    with open(paths["json"], "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["drug", "subgroup", "mean", "low", "up", "p", "p_adj", "verdict"])
        w.writerows(_rows(report))
    with open(paths["trials"], "w") as fh:
        for t in report.trials:
            d = t.to_dict() if hasattr(t, "to_dict") else t
            d = {k: v for k, v in d.items() if k not in ("case_ids", "control_ids")}
            fh.write(json.dumps(d, sort_keys=True, default=_plain) + "\n")
    return paths


def attention_summary(model, data, K=None):
    """Relative covariate attention per subgroup, shape (n_codes, K).

    Covariate attention is averaged over each assigned subgroup's patients and
    each row is divided by its sum over subgroups. Subgroups without members
    get NaN columns and are left out of the row sums.
    """
    from ..prediction import as_causal_data

    K = K or model.config.K
    data = as_causal_data(data, model.t_max)
    codes, times, mask = model.tensors(data)
    enc = model.net.encoder
    with torch.no_grad():
        att = enc.attention(codes, times, mask).a_d.double().numpy()
        labels = model.net(codes, times, mask).k_star.numpy()
    avg = np.full((att.shape[1], K), np.nan)
    for k in range(K):
        if np.any(labels == k):
            avg[:, k] = att[labels == k].mean(axis=0)
    return relative_scores(avg)


def relative_scores(averages):
    """Row-normalize an (n_covariates, K) table of average scores, ignoring NaN columns."""
    a = np.asarray(averages, dtype=float)
    return a / np.nansum(a, axis=1, keepdims=True)


def write_heatmap(table, path, names=None, order=None):
    """Long-format CSV (covariate, subgroup, score) for the heatmap renderer."""
    names = names or [f"code_{m}" for m in range(table.shape[0])]
    order = list(range(table.shape[1])) if order is None else list(order)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "subgroup", "score"])
        for m, name in enumerate(names):
            for rank, k in enumerate(order):
                v = table[m, k]
                w.writerow([name, f"subgroup_{rank + 1}", "" if math.isnan(v) else v])
