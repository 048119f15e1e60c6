"""Synthetic claims corpus with planted, subgroup-specific drug effects.

Every patient belongs to a latent subgroup that shapes their code profile and
baseline outcome risk. A continuous risk score also drives a few codes and the
choice of index drug, which makes drug exposure confounded. Outcomes use one
shared uniform draw per patient, so the potential outcomes under "no drug" and
"own index drug" differ only where the planted effect moves the probability.

Code 0 marks the condition (onset before index), code 1 is the outcome.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig

CONDITION_CODE = 0
OUTCOME_CODE = 1
FOLLOW_UP_DAYS = 730
MARKERS_PER_SUBGROUP = 6
RISK_CODES = 6


@dataclass
class ClaimsConfig:
    n_patients: int = 20_000
    n_codes: int = 286
    n_drugs: int = 40
    n_classes: int = 8
    K_true: int = 3
    subgroup_effects: tuple = (-0.1, 0.0, 0.05)
    # drug id -> per-subgroup risk differences; drugs not listed have no effect.
    # None plants ``subgroup_effects`` on drug 0.
    planted: dict = None
    subgroup_weights: tuple = (0.25, 0.25, 0.5)
    switch_rate: float = 0.1
    prior_outcome_rate: float = 0.03
    # sd of the per-drug pull toward prescribing to higher-risk patients
    confounding: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.subgroup_effects = tuple(float(e) for e in self.subgroup_effects)
        self.subgroup_weights = tuple(float(w) for w in self.subgroup_weights)
        if self.K_true < 1:
            raise InvalidConfig("K_true must be >= 1")
        if len(self.subgroup_effects) != self.K_true:
            raise InvalidConfig("subgroup_effects needs one entry per latent subgroup")
        if len(self.subgroup_weights) != self.K_true or min(self.subgroup_weights) < 0:
            raise InvalidConfig("subgroup_weights needs K_true nonnegative entries")
        if self.planted is None:
            self.planted = {0: self.subgroup_effects}
        self.planted = {int(d): tuple(float(e) for e in eff) for d, eff in self.planted.items()}
        for d, eff in self.planted.items():
            if not 0 <= d < self.n_drugs:
                raise InvalidConfig(f"planted drug {d} outside [0, {self.n_drugs})")
            if len(eff) != self.K_true or not np.all(np.isfinite(eff)):
                raise InvalidConfig(f"drug {d}: need {self.K_true} finite effects")
        first_free = 2 + self.K_true * MARKERS_PER_SUBGROUP + RISK_CODES
        if self.n_codes < first_free + 1:
            raise InvalidConfig(f"n_codes must be at least {first_free + 1}")
        if not 1 <= self.n_classes <= self.n_drugs:
            raise InvalidConfig("need 1 <= n_classes <= n_drugs")

    def effects(self):
        """(n_drugs, K_true) matrix of planted risk differences."""
        E = np.zeros((self.n_drugs, self.K_true))
        for d, eff in self.planted.items():
            E[d] = eff
        return E

    def to_dict(self):
        d = dict(self.__dict__)
        d["planted"] = {str(k): list(v) for k, v in self.planted.items()}
        d["subgroup_effects"] = list(self.subgroup_effects)
        d["subgroup_weights"] = list(self.subgroup_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("planted") is not None:
            d["planted"] = {int(k): tuple(v) for k, v in d["planted"].items()}
        return cls(**d)


@dataclass
class Oracle:
    latent_subgroup: int
    risk: float
    p0: float      # outcome probability without drug
    p1: float      # under the patient's own index drug
    u: float       # shared uniform draw
    y0: int
    y1: int


@dataclass
class ClaimsPatient:
    id: int
    age_at_first_code: int
    sex: str
    visits: list                # [(day, tuple of codes)], days strictly increasing
    prescriptions: list         # [(day, drug)]
    oracle: Oracle = field(default=None, repr=False)

    def to_json(self):
        return {"id": self.id, "age_at_first_code": self.age_at_first_code, "sex": self.sex,
                "visits": [[d, list(c)] for d, c in self.visits],
                "prescriptions": [[d, g] for d, g in self.prescriptions]}

    @classmethod
    def from_json(cls, d):
        return cls(d["id"], d["age_at_first_code"], d["sex"],
                   [(v[0], tuple(v[1])) for v in d["visits"]],
                   [(p[0], p[1]) for p in d["prescriptions"]])


@dataclass
class DrugCatalog:
    drugs: dict                 # drug id -> class id

    def classmates(self, drug):
        c = self.drugs[drug]
        return sorted(d for d, k in self.drugs.items() if k == c and d != drug)

    def __contains__(self, drug):
        return drug in self.drugs


@dataclass
class ClaimsDb:
    patients: list
    n_codes: int
    config: ClaimsConfig = None

    def __len__(self):
        return len(self.patients)

    def digest(self):
        h = hashlib.sha256()
        for line in iter_jsonl(self):
            h.update(line.encode())
        for line in iter_oracle_jsonl(self):
            h.update(line.encode())
        return h.hexdigest()


def _code_profiles(cfg, rng):
    """Per-visit code probabilities: background (n_codes,), subgroup markers (K, n_codes)."""
    M, K = cfg.n_codes, cfg.K_true
    ranks = rng.permutation(M) + 1
    background = np.minimum(0.25, 0.6 * ranks ** -0.9)
    background[[CONDITION_CODE, OUTCOME_CODE]] = 0.0
    markers = np.zeros((K, M))
    risk_codes = np.arange(2 + K * MARKERS_PER_SUBGROUP, 2 + K * MARKERS_PER_SUBGROUP + RISK_CODES)
    for k in range(K):
        block = np.arange(2 + k * MARKERS_PER_SUBGROUP, 2 + (k + 1) * MARKERS_PER_SUBGROUP)
        background[block] = 0.02
        markers[k, block] = 0.3
    background[risk_codes] = 0.0
    return background, markers, risk_codes


def _drug_tables(cfg, rng):
    classes = np.arange(cfg.n_drugs) % cfg.n_classes
    popularity = 1.0 / (np.arange(cfg.n_drugs) + 3.0)
    # how strongly each drug's choice leans toward high-risk patients
    tilt = rng.normal(0.0, cfg.confounding, cfg.n_drugs)
    return classes, np.log(popularity), tilt


def generate_claims(config=None):
    """(ClaimsDb, DrugCatalog) for ``config``; the oracle lives on each patient."""
    cfg = config or ClaimsConfig()
    rng = np.random.default_rng(cfg.seed)
    background, markers, risk_codes = _code_profiles(cfg, rng)
    classes, log_pop, tilt = _drug_tables(cfg, rng)
    E = cfg.effects()
    sub_w = np.asarray(cfg.subgroup_weights) / sum(cfg.subgroup_weights)
    base_risk = np.linspace(-1.0, 0.0, cfg.K_true)
    patients = []
    for pid in range(cfg.n_patients):
        k = int(rng.choice(cfg.K_true, p=sub_w))
        risk = float(rng.normal())
        prev = background + markers[k]
        prev[risk_codes] = 0.4 / (1.0 + np.exp(-1.5 * risk))

        onset = int(rng.integers(200, 1100))
        index = onset + int(rng.integers(30, 500))
        end = index + FOLLOW_UP_DAYS + int(rng.integers(30, 300))
        days = [0]
        while days[-1] < end:
            days.append(days[-1] + 1 + int(rng.exponential(45.0)))
        days = [d for d in days if d < end and d != onset and d != index]
        draws = rng.random((len(days), cfg.n_codes)) < prev
        visits = {d: set(np.flatnonzero(row).tolist()) for d, row in zip(days, draws)}
        visits[onset] = {CONDITION_CODE}
        for d in days:
            if d > onset and rng.random() < 0.4:
                visits[d].add(CONDITION_CODE)

        logits = log_pop + tilt * risk
        pr = np.exp(logits - logits.max())
        drug = int(rng.choice(cfg.n_drugs, p=pr / pr.sum()))
        prescriptions = [(index, drug)]
        n_fills = int(rng.integers(1, 5))
        for j in range(1, n_fills):
            prescriptions.append((index + 30 * j, drug))
        if rng.random() < cfg.switch_rate:
            other = int(rng.choice([d for d in range(cfg.n_drugs) if d != drug]))
            prescriptions.append((index + 30 * n_fills + int(rng.integers(30, 300)), other))
        prescriptions.sort()

        p0 = 0.12 + 0.5 / (1.0 + np.exp(-(base_risk[k] + 0.8 * risk)))
        under = p0 + E[:, k]
        if under.min() < 0.0 or under.max() > 1.0:
            raise InvalidConfig(f"planted effect pushes an outcome probability outside [0, 1] "
                                f"(range {under.min():.3f}..{under.max():.3f})")
        p1 = under[drug]
        u = float(rng.random())
        y0, y1 = int(u < p0), int(u < p1)
        if rng.random() < cfg.prior_outcome_rate:
            visits.setdefault(int(rng.integers(1, index)), set()).add(OUTCOME_CODE)
        if y1:
            visits.setdefault(index + int(rng.integers(1, FOLLOW_UP_DAYS + 1)), set()).add(OUTCOME_CODE)
        elif rng.random() < 0.2:
            late = index + FOLLOW_UP_DAYS + int(rng.integers(1, 200))
            visits.setdefault(late, set()).add(OUTCOME_CODE)

        age = int(rng.integers(44, 81))
        sex = "F" if rng.random() < 0.55 else "M"
        ordered = [(d, tuple(sorted(visits[d]))) for d in sorted(visits)]
        patients.append(ClaimsPatient(pid, age, sex, ordered, prescriptions,
                                      Oracle(k, risk, float(p0), float(p1), u, y0, y1)))
    catalog = DrugCatalog({d: int(classes[d]) for d in range(cfg.n_drugs)})
    return ClaimsDb(patients, cfg.n_codes, cfg), catalog


def oracle_subgroup_ate(db, drug):
    """Per-subgroup mean of p(outcome | drug) - p(outcome | none) over the whole corpus.

    Potential outcomes under ``drug`` are recomputed from the stored uniform
    draw, so every patient contributes regardless of which drug they took.
    """
    E = db.config.effects()
    K = db.config.K_true
    diffs = [[] for _ in range(K)]
    for p in db.patients:
        o = p.oracle
        y_drug = int(o.u < o.p0 + E[drug, o.latent_subgroup])
        diffs[o.latent_subgroup].append(y_drug - o.y0)
    return np.array([np.mean(d) if d else np.nan for d in diffs])


def iter_jsonl(db):
    for p in db.patients:
        yield json.dumps(p.to_json(), separators=(",", ":")) + "\n"


def iter_oracle_jsonl(db):
    for p in db.patients:
        if p.oracle is not None:
            yield json.dumps({"id": p.id, **p.oracle.__dict__}, separators=(",", ":")) + "\n"


def write_claims(db, catalog, path, oracle_path=None):
    """One patient per line; header in ``<path>.meta.json``, oracle in a separate sidecar."""
    header = {"kind": "claims", "n_codes": db.n_codes,
              "config": db.config.to_dict() if db.config else None,
              "catalog": {str(d): c for d, c in sorted(catalog.drugs.items())}}
    with open(path, "w") as fh:
        fh.writelines(iter_jsonl(db))
    with open(str(path) + ".meta.json", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
    if oracle_path is not None:
        with open(oracle_path, "w") as fh:
            fh.writelines(iter_oracle_jsonl(db))


def read_claims(path, oracle_path=None):
    with open(str(path) + ".meta.json") as fh:
        header = json.loads(fh.read())
    with open(path) as fh:
        patients = [ClaimsPatient.from_json(json.loads(line)) for line in fh if line.strip()]
    if oracle_path is not None:
        by_id = {p.id: p for p in patients}
        with open(oracle_path) as fh:
            for line in fh:
                d = json.loads(line)
                pid = d.pop("id")
                by_id[pid].oracle = Oracle(**d)
    cfg = ClaimsConfig.from_dict(header["config"]) if header.get("config") else None
    catalog = DrugCatalog({int(d): c for d, c in header["catalog"].items()})
    return ClaimsDb(patients, header["n_codes"], cfg), catalog
