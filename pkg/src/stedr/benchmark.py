"""Seeded Synthetic A benchmark runs and planted-effect screen repetitions.

Shared by the scripts in ``scripts/`` and the acceptance suite so both measure the
same thing.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import generate_synthetic_a
from .prediction import TrainConfig, predict, standardized_truth, train

# Tuned on Synthetic A; the remaining fields keep their TrainConfig defaults.
SYNTHETIC_A_CONFIG = dict(alpha=0.5, transformer_layers=2, hidden=100, batch_size=64,
                          subgroup_init="random", rescale_attention=False, patience=100)

VARIANTS = {
    "full": {},
    "no_gmm": {"ablate_gmm": True},
    "no_attention": {"ablate_attention": True},
}


@dataclass
class SeedResult:
    variant: str
    seed: int
    pehe: float
    eps_ate: float
    v_within: float
    v_across: float
    best_epoch: int
    seconds: float


def synthetic_a_config(seed, variant="full", **overrides):
    values = {**SYNTHETIC_A_CONFIG, **VARIANTS[variant], **overrides, "seed": seed}
    return TrainConfig(**values)


def run_synthetic_a(seed, variant="full", n=1000, **overrides):
    """Train on a fresh Synthetic A draw and score the held-out test split.

    PEHE and eATE are in standardized outcome units; the variance statistics use
    raw-unit effect estimates.
    """
    start = time.perf_counter()
    data = generate_synthetic_a(n, seed)
    model = train(data, synthetic_a_config(seed, variant, **overrides))
    test = data.subset(model.split["test"])
    pred = predict(model, test)
    rep = metrics.effect_report(pred["tau_hat"], standardized_truth(model, test), pred["subgroup"],
                                model.config.K, raw_tau_hat=pred["tau_hat"] * model.y_scale)
    return SeedResult(variant, seed, rep["pehe"], rep["eps_ate"], rep["v_within"],
                      rep["v_across"], model.best_epoch, time.perf_counter() - start)


def run_variants(seeds, variants=("full",), **overrides):
    return [run_synthetic_a(s, v, **overrides) for v in variants for s in seeds]


def summarize(results):
    """Per-variant means over seeds."""
    out = {}
    for v in dict.fromkeys(r.variant for r in results):
        rows = [r for r in results if r.variant == v]
        out[v] = {k: float(np.mean([getattr(r, k) for r in rows]))
                  for k in ("pehe", "eps_ate", "v_within", "v_across", "seconds")}
        out[v]["n_seeds"] = len(rows)
    return out


def paired_wins(results, variant, baseline="full"):
    """Seeds on which ``baseline`` has strictly lower PEHE than ``variant``."""
    base = {r.seed: r.pehe for r in results if r.variant == baseline}
    return sum(base[r.seed] < r.pehe for r in results if r.variant == variant and r.seed in base)


def as_rows(results):
    return [dataclasses.asdict(r) for r in results]


# ---------------------------------------------------------------- screening

PLANTED_DRUGS = {
    0: ("population_candidate", (-0.1, -0.05, -0.02)),
    1: ("subgroup_candidate", (-0.1, 0.0, 0.05)),
}
# every other drug in the corpus is null; drug 2 is the one scored
NULL_DRUG = 2
EXPECTED_VERDICTS = {0: "population_candidate", 1: "subgroup_candidate", NULL_DRUG: "not_significant"}
REQUIRED_RATES = {"population_candidate": 0.8, "subgroup_candidate": 0.8, "not_significant": 0.9}


def planted_corpus_config(**overrides):
    from .emulation.claims import ClaimsConfig

    planted = {d: effects for d, (_, effects) in PLANTED_DRUGS.items()}
    return ClaimsConfig(**{"planted": planted, **overrides})


def screen_repetition(rep, claims_config=None, n_trials=20, n_drugs=10, workers=None,
                      train_config=None):
    """One full screen on a corpus regenerated with seed ``rep``; returns {drug: verdict}."""
    from .emulation.claims import generate_claims
    from .emulation.cohort import CohortIndex
    from .emulation.screen import run_screen

    cfg = dataclasses.replace(claims_config or planted_corpus_config(), seed=rep)
    db, catalog = generate_claims(cfg)
    index = CohortIndex(db, catalog)
    report = run_screen(db, catalog, range(n_drugs), train_config, n_trials, seed=rep,
                        index=index, workers=workers)
    return {d.drug: d.verdict for d in report.drugs}, report


def verdict_rates(verdicts_per_rep):
    """Fraction of repetitions in which each scored drug got its expected verdict."""
    return {d: float(np.mean([v.get(d) == want for v in verdicts_per_rep]))
            for d, want in EXPECTED_VERDICTS.items()}
