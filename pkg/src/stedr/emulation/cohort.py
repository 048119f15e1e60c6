"""Case/control cohorts for one emulated trial and their baseline covariates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..encoder import SequenceBatch
from ..errors import IneligibleDrug, InvalidArgument
from .claims import CONDITION_CODE, FOLLOW_UP_DAYS, OUTCOME_CODE

CONTROL_MODES = ("random", "same_class")


@dataclass
class Criteria:
    min_age: float = 50.0
    min_history_days: int = 365
    control_cap: float = 3.0
    min_cases: int = 100
    min_control_pool: int = 50


@dataclass
class TrialSpec:
    drug: int
    trial_index: int
    control_mode: str
    seed: int
    case_ids: list = field(default_factory=list)
    control_ids: list = field(default_factory=list)
    case_index: list = field(default_factory=list)      # index day per case
    control_index: list = field(default_factory=list)   # index day per control
    control_drugs: list = field(default_factory=list)   # alternative drug per control

    def to_dict(self):
        return dict(self.__dict__)


def first_prescription(patient, drug):
    for day, d in patient.prescriptions:
        if d == drug:
            return day
    return None


def eligible_index(patient, drug, criteria):
    """Index day of ``drug`` for this patient if every inclusion rule holds, else None."""
    index = first_prescription(patient, drug)
    if index is None:
        return None
    onset = None
    for day, codes in patient.visits:
        if day >= index:
            break
        if OUTCOME_CODE in codes:
            return None
        if onset is None and CONDITION_CODE in codes:
            onset = day
    if onset is None:
        return None
    if index - patient.visits[0][0] < criteria.min_history_days:
        return None
    if patient.age_at_first_code + (onset - patient.visits[0][0]) / 365.25 <= criteria.min_age:
        return None
    return index


class CohortIndex:
    """Eligible users per drug and exposure sets, computed once per corpus."""

    def __init__(self, db, catalog, criteria=None):
        self.criteria = criteria or Criteria()
        self.catalog = catalog
        self.users = {d: {} for d in catalog.drugs}
        self.exposed = {d: set() for d in catalog.drugs}
        for p in db.patients:
            for _, d in p.prescriptions:
                self.exposed[d].add(p.id)
            for d in {d for _, d in p.prescriptions}:
                idx = eligible_index(p, d, self.criteria)
                if idx is not None:
                    self.users[d][p.id] = idx

    def n_cases(self, drug):
        return len(self.users[drug])


def control_pool(index, drug, alternatives):
    """{patient id: (index day, alternative drug)} over never-exposed eligible users.

    A patient eligible under several alternatives enters once, at the earliest.
    """
    banned = index.exposed[drug]
    pool = {}
    for alt in alternatives:
        for pid, day in index.users[alt].items():
            if pid not in banned and (pid not in pool or day < pool[pid][0]):
                pool[pid] = (day, alt)
    return pool


def build_trial(db, catalog, spec, criteria=None, index=None):
    """Materialize ``spec``: cases, sampled controls from alternative drugs, index days.

    ``random`` draws controls from users of any other drug; ``same_class`` only
    from users of drugs sharing the case drug's class.
    """
    if spec.drug not in catalog:
        raise InvalidArgument(f"unknown drug {spec.drug}")
    if spec.control_mode not in CONTROL_MODES:
        raise InvalidArgument(f"control_mode must be one of {CONTROL_MODES}")
    index = index or CohortIndex(db, catalog, criteria)
    crit = index.criteria
    cases = index.users[spec.drug]
    if len(cases) < crit.min_cases:
        raise IneligibleDrug(spec.drug, len(cases), crit.min_cases)
    if spec.control_mode == "same_class":
        alternatives = catalog.classmates(spec.drug)
    else:
        alternatives = sorted(d for d in catalog.drugs if d != spec.drug)
    pool = control_pool(index, spec.drug, alternatives)
    if len(pool) < crit.min_control_pool:
        raise IneligibleDrug(spec.drug, len(cases), crit.min_cases)
    rng = np.random.default_rng(spec.seed)
    ids = sorted(pool)
    cap = int(crit.control_cap * len(cases))
    if len(ids) > cap:
        ids = sorted(int(i) for i in rng.choice(ids, size=cap, replace=False))
    spec.case_ids = sorted(cases)
    spec.case_index = [cases[i] for i in spec.case_ids]
    spec.control_ids = ids
    spec.control_index = [pool[i][0] for i in ids]
    spec.control_drugs = [pool[i][1] for i in ids]
    return spec


def baseline_features(patient, index_day, n_codes, t_max):
    """Most recent ``t_max`` pre-index visits as multi-hot rows, times in years before index,
    plus per-code counts over the whole baseline period."""
    codes = np.zeros((t_max, n_codes))
    times = np.zeros(t_max)
    mask = np.zeros(t_max, dtype=bool)
    counts = np.zeros(n_codes)
    pre = [(d, c) for d, c in patient.visits if d < index_day]
    for _, c in pre:
        counts[list(c)] += 1
    for row, (d, c) in enumerate(pre[-t_max:]):
        codes[row, list(c)] = 1.0
        times[row] = (index_day - d) / 365.25
        mask[row] = True
    return codes, times, mask, counts


def outcome_label(patient, index_day):
    """1 if the outcome code appears within the follow-up window after index."""
    for d, c in patient.visits:
        if index_day < d <= index_day + FOLLOW_UP_DAYS and OUTCOME_CODE in c:
            return 1
    return 0


@dataclass
class TrialData:
    batch: SequenceBatch
    t: np.ndarray
    y: np.ndarray
    counts: np.ndarray
    ids: np.ndarray


def trial_data(db, trial, t_max):
    by_id = {p.id: p for p in db.patients}
    rows = [(i, d, 1) for i, d in zip(trial.case_ids, trial.case_index)] + \
           [(i, d, 0) for i, d in zip(trial.control_ids, trial.control_index)]
    n = len(rows)
    codes = np.zeros((n, t_max, db.n_codes), dtype=np.float32)
    times = np.zeros((n, t_max))
    mask = np.zeros((n, t_max), dtype=bool)
    counts = np.zeros((n, db.n_codes))
    y = np.zeros(n)
    for r, (pid, day, _) in enumerate(rows):
        p = by_id[pid]
        codes[r], times[r], mask[r], counts[r] = baseline_features(p, day, db.n_codes, t_max)
        y[r] = outcome_label(p, day)
    t = np.array([r[2] for r in rows], dtype=np.int64)
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    return TrialData(SequenceBatch(codes, times, mask), t, y, counts, ids)
