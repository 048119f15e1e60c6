"""Evaluation quantities: effect-estimation error, subgroup variance, covariate
balance, propensity AUC, multiple-testing adjustment and trial aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm, rankdata

from .errors import InvalidArgument

SMD_THRESHOLD = 0.1
UNBALANCED_LIMIT = 0.02
# Variance convention for V_within / V_across: population (ddof=0).
VARIANCE_DDOF = 0
Z_95 = 1.96


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidArgument("empty input")
    return a, b


def pehe(tau_hat, tau_true):
    """Mean squared error of individual effects (no square root)."""
    a, b = _pair(tau_hat, tau_true)
    return float(np.mean((a - b) ** 2))


def eps_ate(tau_hat, tau_true):
    a, b = _pair(tau_hat, tau_true)
    return float(abs(a.mean() - b.mean()))


def variance_stats(tau_hat, labels, K):
    """(V_within, V_across) over nonempty subgroups."""
    tau_hat = np.asarray(tau_hat, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if tau_hat.shape != labels.shape:
        raise InvalidArgument("tau_hat and labels differ in length")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidArgument(f"labels must lie in [0, {K})")
    groups = [tau_hat[labels == k] for k in range(K)]
    groups = [g for g in groups if g.size]
    if not groups:
        raise InvalidArgument("all subgroups are empty")
    within = float(np.mean([g.var(ddof=VARIANCE_DDOF) for g in groups]))
    across = float(np.var([g.mean() for g in groups], ddof=VARIANCE_DDOF))
    return within, across


@dataclass
class BalanceReport:
    smd_per_covariate: np.ndarray
    unbalanced_fraction: float
    weighted_auc: float
    balanced: bool

    def to_dict(self):
        d = asdict(self)
        d["smd_per_covariate"] = [float(v) for v in self.smd_per_covariate]
        return d


def _weighted_moments(X, w):
    w = w / w.sum()
    mean = w @ X
    var = w @ (X - mean) ** 2
    # constant columns: keep rounding in the weighted mean from faking a spread
    const = np.ptp(X, axis=0) == 0
    mean[const], var[const] = X[0, const], 0.0
    return mean, var


def smd(case, control, case_weights=None, control_weights=None):
    """Per-covariate (mean_T - mean_C) / sqrt((s2_T + s2_C) / 2).

    Weighted moments when weights are given. A covariate with zero pooled
    variance gets 0 if the means agree and +inf otherwise.
    """
    case = np.atleast_2d(np.asarray(case, dtype=float))
    control = np.atleast_2d(np.asarray(control, dtype=float))
    if case.shape[0] < 2 or control.shape[0] < 2:
        raise InvalidArgument("need at least two rows per arm")
    if case.shape[1] != control.shape[1]:
        raise InvalidArgument("arms have different covariate counts")
    wc = np.ones(case.shape[0]) if case_weights is None else np.asarray(case_weights, float)
    wk = np.ones(control.shape[0]) if control_weights is None else np.asarray(control_weights, float)
    m1, v1 = _weighted_moments(case, wc)
    m0, v0 = _weighted_moments(control, wk)
    pooled = np.sqrt((v1 + v0) / 2.0)
    diff = m1 - m0
    out = np.zeros_like(diff)
    ok = pooled > 0
    out[ok] = diff[ok] / pooled[ok]
    out[~ok & (diff != 0)] = np.inf
    return out


def smd_balance(case, control, case_weights=None, control_weights=None, auc=float("nan")):
    values = smd(case, control, case_weights, control_weights)
    frac = float(np.mean(np.abs(values) > SMD_THRESHOLD))
    return BalanceReport(values, frac, float(auc), frac <= UNBALANCED_LIMIT)


def weighted_auc(labels, scores, weights=None):
    """P(treated score > control score) with pair weight w_i * w_j and ties at 1/2."""
    labels = np.asarray(labels).ravel().astype(bool)
    scores = np.asarray(scores, dtype=float).ravel()
    w = np.ones_like(scores) if weights is None else np.asarray(weights, dtype=float).ravel()
    if not (labels.shape == scores.shape == w.shape):
        raise InvalidArgument("labels, scores and weights differ in length")
    if labels.all() or not labels.any():
        raise InvalidArgument("both classes must be present")
    # sort by score, then sweep tie blocks accumulating control weight below
    order = np.argsort(scores, kind="stable")
    s, y, ww = scores[order], labels[order], w[order]
    _, starts = np.unique(s, return_index=True)
    bounds = np.append(starts, s.size)
    below = 0.0
    num = 0.0
    for a, b in zip(bounds[:-1], bounds[1:]):
        pos = ww[a:b][y[a:b]].sum()
        neg = ww[a:b][~y[a:b]].sum()
        num += pos * (below + 0.5 * neg)
        below += neg
    return float(num / (w[labels].sum() * w[~labels].sum()))


def bh_adjust(p_values):
    """Benjamini-Hochberg adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=float).ravel()
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise InvalidArgument("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adj, 1.0)
    return out


@dataclass
class TrialAggregate:
    mean: float
    low: float
    up: float
    p_value: float


def trial_aggregate(ates, two_sided=False):
    """Per column of an (n_trials, K) matrix: mean, 95% CI and p-value.

    The one-sided p is the normal tail P(effect >= 0) given (mean, sd/sqrt(n)),
    so small p means a beneficial (negative) effect.
    """
    ates = np.asarray(ates, dtype=float)
    if ates.ndim == 1:
        ates = ates[:, None]
    n = ates.shape[0]
    if n < 2:
        raise InvalidArgument("need at least two trials to aggregate")
    out = []
    for col in ates.T:
        mean = float(col.mean())
        se = float(col.std(ddof=1)) / math.sqrt(n)
        if se == 0.0:
            p = 0.5 if mean == 0 else float(mean > 0)
            if two_sided:
                p = 1.0 if mean == 0 else 0.0
        elif two_sided:
            p = float(2 * norm.sf(abs(mean) / se))
        else:
            p = float(norm.sf(-mean / se))
        out.append(TrialAggregate(mean, mean - Z_95 * se, mean + Z_95 * se, p))
    return out


def rank_auc(labels, scores):
    """Unweighted AUC via the Mann-Whitney rank sum."""
    labels = np.asarray(labels).astype(bool)
    r = rankdata(scores)
    n1, n0 = labels.sum(), (~labels).sum()
    return float((r[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def effect_report(tau_hat, tau_true, labels, K, raw_tau_hat=None):
    """Flat dict of labeled-data metrics; V stats use ``raw_tau_hat`` when given."""
    v_src = tau_hat if raw_tau_hat is None else raw_tau_hat
    within, across = variance_stats(v_src, labels, K)
    return {"pehe": pehe(tau_hat, tau_true), "eps_ate": eps_ate(tau_hat, tau_true),
            "v_within": within, "v_across": across,
            "subgroup_sizes": [int(np.sum(np.asarray(labels) == k)) for k in range(K)]}


def dump_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
