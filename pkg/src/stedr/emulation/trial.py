"""One emulated trial: cohort -> baseline covariates -> model -> effect estimates."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import checkpoint
from ..metrics import BalanceReport, smd_balance, weighted_auc
from ..prediction import CausalData, TrainConfig, iptw_weights, predict, train
from .cohort import trial_data

Z95 = 1.96


def emulation_config(**overrides):
    """Training defaults for claims trials: binary outcome, raw multi-hot inputs, short runs."""
    base = dict(outcome_kind="binary", standardize_inputs=False, t_max=12, hidden=50,
                max_epochs=12, patience=3, dtype="float32")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrialResult:
    drug: int
    trial_index: int
    control_mode: str
    seed: int
    n_cases: int
    n_controls: int
    subgroup_ate: list          # doubly robust, test split, ordered enhanced -> diminished
    subgroup_ate_se: list
    subgroup_tau_mean: list     # plain model mean of tau_hat per subgroup, test split
    subgroup_sizes: list
    overall_ate: float
    overall_se: float
    balance: BalanceReport
    model_digest: str
    case_ids: list = field(default_factory=list, repr=False)
    control_ids: list = field(default_factory=list, repr=False)

    @property
    def overall_ci(self):
        return (self.overall_ate - Z95 * self.overall_se, self.overall_ate + Z95 * self.overall_se)

    def to_dict(self):
        d = dict(self.__dict__)
        d["balance"] = self.balance.to_dict()
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x).__name__)


def _nan_to_none(values):
    return [None if not math.isfinite(v) else float(v) for v in values]


def dr_scores(y, t, mu0, mu1, e, clip=0.05):
    """Per-sample augmented IPW scores whose mean estimates the ATE."""
    e = np.clip(e, clip, 1.0 - clip)
    return mu1 - mu0 + t * (y - mu1) / e - (1 - t) * (y - mu0) / (1.0 - e)


def subgroup_order(tau_hat, labels, K):
    """Subgroup ids sorted by mean tau_hat (most beneficial first); empty ones last."""
    means = [tau_hat[labels == k].mean() if np.any(labels == k) else np.inf for k in range(K)]
    return list(np.argsort(means, kind="stable"))


def balance_report(counts, t, t_hat, pr_t, clip):
    w = iptw_weights(t_hat, pr_t, "treatment_conditional", clip, t)
    treated = t == 1
    auc = weighted_auc(treated, t_hat, w)
    return smd_balance(counts[treated], counts[~treated], w[treated], w[~treated], auc=auc)


def emulate_trial(db, trial, config=None, keep_model=False):
    """Train on the trial's cohort and estimate per-subgroup effects on its test split.

    Subgroups are ranked by their validation-split mean of tau_hat, so index 0
    is the subgroup the model finds most benefited. The reported subgroup and
    overall effects are doubly robust means over the held-out test split.
    With ``keep_model`` the return value is (result, model, causal data, order).
    """
    config = config or emulation_config(seed=trial.seed)
    data = trial_data(db, trial, config.t_max)
    causal = CausalData(data.batch, data.t, data.y)
    model = train(causal, config)
    pred = predict(model, causal)
    K = config.K
    tau, labels = pred["tau_hat"], pred["subgroup"]
    order = subgroup_order(tau[model.split["val"]], labels[model.split["val"]], K)

    test = model.split["test"]
    psi = dr_scores(data.y[test], data.t[test], pred["y0_hat"][test], pred["y1_hat"][test],
                    pred["t_hat"][test], config.propensity_clip)
    lt, tt = labels[test], tau[test]
    ate, se, tmean, sizes = [], [], [], []
    for k in order:
        sel = lt == k
        n = int(sel.sum())
        sizes.append(n)
        ate.append(float(psi[sel].mean()) if n else math.nan)
        se.append(float(psi[sel].std(ddof=1) / math.sqrt(n)) if n >= 2 else math.nan)
        tmean.append(float(tt[sel].mean()) if n else math.nan)

    balance = balance_report(data.counts, data.t, pred["t_hat"], model.pr_t, config.propensity_clip)
    result = TrialResult(trial.drug, trial.trial_index, trial.control_mode,
                       trial.seed, len(trial.case_ids), len(trial.control_ids),
                       _nan_to_none(ate), _nan_to_none(se), _nan_to_none(tmean), sizes,
                       float(psi.mean()), float(psi.std(ddof=1) / math.sqrt(len(psi))),
                       balance, checkpoint.digest(model),
                       list(trial.case_ids), list(trial.control_ids))
    return (result, model, causal, order) if keep_model else result
