"""Seeded benchmark generators with ground-truth potential-outcome means.

Three generators are provided:

* ``generate_synthetic_a`` -- ten static clinical covariates, outcome depends
  on time-to-treatment through a logistic curve (randomized, 50/50 split).
* ``generate_synthetic_b`` -- 25-dimensional autoregressive covariate
  histories of 10-20 steps, outcomes from the final step.
* ``simulate_response_surface_b`` -- attaches nonlinear simulated outcomes to
  an arbitrary covariate table (IHDP-style).

All datasets serialize to JSON-Lines with a metadata header line.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

# (name, kind, a, b): normal -> (mean, std), uniform -> (low, high).
# The time covariate is x0 and sits first.
SYNTHETIC_A_COVARIATES = (
    ("time_to_treatment", "uniform", 4.0, 14.0),
    ("age", "normal", 66.0, 4.0),
    ("white_blood_cell", "normal", 66.0, 4.0),
    ("lymphocyte", "normal", 0.8, 0.1),
    ("platelet", "normal", 183.0, 20.4),
    ("serum_creatinine", "normal", 68.0, 6.6),
    ("aspartate_aminotransferase", "normal", 31.0, 5.1),
    ("alanine_aminotransferase", "normal", 26.0, 5.1),
    ("lactate_dehydrogenase", "normal", 339.0, 51.0),
    ("creatine_kinase", "normal", 76.0, 21.0),
)

BETA_VALUES = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
BETA_PROBS = np.array([0.6, 0.1, 0.1, 0.1, 0.1])

SYNTHETIC_A_NOISE = 0.1
RESPONSE_SURFACE_OFFSET = 0.5
RESPONSE_SURFACE_TARGET_EFFECT = 4.0
RESPONSE_SURFACE_NOISE = 1.0

GENERATORS = ("A", "B", "ResponseSurfaceB")


@dataclass
class SyntheticSample:
    covariates: np.ndarray
    treatment: int
    observed_outcome: float
    mu0: float
    mu1: float

    @property
    def true_effect(self):
        return self.mu1 - self.mu0


@dataclass
class SyntheticDataset:
    """Static dataset stored column-wise; ``samples`` gives the row view."""

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    covariate_names: list
    generator_id: str
    seed: int
    coefficients: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def true_effect(self):
        return self.mu1 - self.mu0

    @property
    def samples(self):
        return [
            SyntheticSample(self.X[i], int(self.t[i]), float(self.y[i]),
                            float(self.mu0[i]), float(self.mu1[i]))
            for i in range(len(self))
        ]

    def subset(self, idx):
        idx = np.asarray(idx)
        return SyntheticDataset(self.X[idx], self.t[idx], self.y[idx], self.mu0[idx],
                                self.mu1[idx], list(self.covariate_names), self.generator_id,
                                self.seed, dict(self.coefficients))


@dataclass
class SequentialSample:
    covariate_history: np.ndarray  # (T, d)
    treatment: int
    observed_outcome: float
    mu0: float
    mu1: float

    @property
    def timesteps(self):
        return self.covariate_history.shape[0]

    @property
    def true_effect(self):
        return self.mu1 - self.mu0


@dataclass
class SequentialDataset:
    samples: list
    covariate_names: list
    seed: int
    coefficients: dict = field(default_factory=dict)
    generator_id: str = "B"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def t(self):
        return np.array([s.treatment for s in self.samples], dtype=np.int64)

    @property
    def y(self):
        return np.array([s.observed_outcome for s in self.samples])

    @property
    def mu0(self):
        return np.array([s.mu0 for s in self.samples])

    @property
    def mu1(self):
        return np.array([s.mu1 for s in self.samples])

    @property
    def true_effect(self):
        return self.mu1 - self.mu0

    def subset(self, idx):
        return SequentialDataset([self.samples[i] for i in idx], list(self.covariate_names),
                                 self.seed, dict(self.coefficients), self.generator_id)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def draw_beta(rng, d):
    """Per-coordinate coefficients from {0,.1,.2,.3,.4} w.p. (.6,.1,.1,.1,.1)."""
    return rng.choice(BETA_VALUES, size=d, p=BETA_PROBS)


def synthetic_a_means(linear_part, time):
    """Noiseless (mu0, mu1) for Synthetic A given X_{-0} beta and the time covariate."""
    s = 1.0 / (1.0 + np.exp(-(np.asarray(time, dtype=float) - 9.0)))
    mu0 = linear_part + s + 5.0
    mu1 = linear_part + 5.0 * s
    return mu0, mu1


def _check_n(n):
    if int(n) != n or n < 2:
        raise InvalidArgument(f"n must be an integer >= 2, got {n!r}")


def generate_synthetic_a(n, seed):
    _check_n(n)
    rng = np.random.default_rng(seed)
    cols = []
    for _, kind, a, b in SYNTHETIC_A_COVARIATES:
        if kind == "normal":
            cols.append(rng.normal(a, b, size=n))
        else:
            cols.append(rng.uniform(a, b, size=n))
    X = np.column_stack(cols)
    # standardize with the generating distribution's own moments
    loc = np.array([a for _, _, a, _ in SYNTHETIC_A_COVARIATES[1:]])
    scale = np.array([b for _, _, _, b in SYNTHETIC_A_COVARIATES[1:]])
    Xs = (X[:, 1:] - loc) / scale
    beta = draw_beta(rng, Xs.shape[1])
    mu0, mu1 = synthetic_a_means(Xs @ beta, X[:, 0])
    t = np.zeros(n, dtype=np.int64)
    t[rng.permutation(n)[: n // 2]] = 1
    noise = rng.normal(0.0, SYNTHETIC_A_NOISE, size=n)
    y = np.where(t == 1, mu1, mu0) + noise
    return SyntheticDataset(X, t, y, mu0, mu1, [c[0] for c in SYNTHETIC_A_COVARIATES], "A",
                            int(seed), {"beta": beta.tolist()})


def _binary_columns(X):
    return np.array([np.isin(X[:, j], (0.0, 1.0)).all() for j in range(X.shape[1])], dtype=bool)


def _standardize_continuous(X):
    X = np.array(X, dtype=float)
    cont = ~_binary_columns(X)
    mean = X[:, cont].mean(axis=0)
    std = X[:, cont].std(axis=0)
    std[std == 0] = 1.0
    X[:, cont] = (X[:, cont] - mean) / std
    return X


def response_surface_b_means(Xs, beta, omega, offset=RESPONSE_SURFACE_OFFSET):
    lin = Xs @ beta
    return np.exp((Xs + offset) @ beta), lin - omega


def _response_surface_b(X, rng, target=RESPONSE_SURFACE_TARGET_EFFECT):
    Xs = _standardize_continuous(X)
    beta = draw_beta(rng, Xs.shape[1])
    mu0, lin = response_surface_b_means(Xs, beta, 0.0)
    omega = float(np.mean(lin - mu0) - target)
    return mu0, lin - omega, beta, omega


def simulate_response_surface_b(covariates, treatment, seed, covariate_names=None,
                                target_effect=RESPONSE_SURFACE_TARGET_EFFECT):
    """Simulated potential outcomes for a real covariate table.

    Continuous columns are standardized before the surface is evaluated;
    binary columns are used as-is. ``omega`` is chosen so the mean effect over
    the rows equals ``target_effect``.
    """
    X = np.asarray(covariates, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InvalidArgument("covariate table must be a non-empty 2-D array")
    if not np.isfinite(X).all():
        raise InvalidArgument("covariate table contains non-finite entries")
    t = np.asarray(treatment)
    if t.shape != (X.shape[0],) or not np.isin(t, (0, 1)).all():
        raise InvalidArgument("treatment must be a 0/1 vector with one entry per row")
    rng = np.random.default_rng(seed)
    mu0, mu1, beta, omega = _response_surface_b(X, rng, target_effect)
    y = np.where(t == 1, mu1, mu0) + rng.normal(0.0, RESPONSE_SURFACE_NOISE, size=len(t))
    names = list(covariate_names) if covariate_names is not None else [
        f"x{j}" for j in range(X.shape[1])]
    return SyntheticDataset(X, t.astype(np.int64), y, mu0, mu1, names, "ResponseSurfaceB",
                            int(seed), {"beta": beta.tolist(), "omega": omega})


def generate_ihdp_like(seed, n=747, n_treated=139, n_continuous=6, n_binary=19):
    """Stand-in covariate table shaped like IHDP (no outcomes).

    Treated units are drawn without replacement with probability tilted by two
    covariates, so the arms are mildly imbalanced.
    """
    rng = np.random.default_rng(seed)
    cont = rng.normal(size=(n, n_continuous))
    p = rng.uniform(0.1, 0.6, size=n_binary)
    binary = (rng.uniform(size=(n, n_binary)) < p).astype(float)
    X = np.column_stack([cont, binary])
    logits = 0.5 * cont[:, 0] - 0.3 * cont[:, 1] + 0.4 * binary[:, 0]
    keys = logits + rng.gumbel(size=n)
    t = np.zeros(n, dtype=np.int64)
    t[np.argsort(-keys)[:n_treated]] = 1
    names = [f"x{j}" for j in range(X.shape[1])]
    return X, t, names


@dataclass
class SyntheticBConfig:
    n_covariates: int = 25
    n_lags: int = 5
    min_steps: int = 10
    max_steps: int = 20
    initial_std: float = 10.0
    coef_mean_low: float = -0.5
    coef_mean_high: float = 0.5
    coef_std: float = 0.1
    noise_std: float = 1.0
    treat_prob: float = 0.5


def generate_synthetic_b(n, seed, config=None):
    _check_n(n)
    cfg = config or SyntheticBConfig()
    rng = np.random.default_rng(seed)
    d, L = cfg.n_covariates, cfg.n_lags
    coef_means = np.linspace(cfg.coef_mean_low, cfg.coef_mean_high, L)[::-1]
    histories = []
    for _ in range(n):
        T = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
        coefs = rng.normal(coef_means, cfg.coef_std, size=(T, L))
        x = np.empty((T, d))
        x[0] = rng.normal(0.0, cfg.initial_std, size=d)
        for s in range(1, T):
            lags = min(L, s)
            x[s] = coefs[s, :lags] @ x[s - lags:s][::-1] + rng.normal(0.0, cfg.noise_std, size=d)
        histories.append(x)
    t = rng.binomial(1, cfg.treat_prob, size=n)
    final = np.stack([h[-1] for h in histories])
    mu0, mu1, beta, omega = _response_surface_b(final, rng)
    y = np.where(t == 1, mu1, mu0) + rng.normal(0.0, RESPONSE_SURFACE_NOISE, size=n)
    samples = [SequentialSample(histories[i], int(t[i]), float(y[i]), float(mu0[i]), float(mu1[i]))
               for i in range(n)]
    return SequentialDataset(samples, [f"x{j}" for j in range(d)], int(seed),
                             {"beta": beta.tolist(), "omega": omega,
                              "coef_means": coef_means.tolist()})


# ---------------------------------------------------------------- serialization

def meta_path(path):
    """Sidecar holding a JSON-Lines file's header, so the data file has one line per record."""
    return Path(str(path) + ".meta.json")


def write_jsonl(dataset, path):
    path = Path(path)
    header = {
        "generator": dataset.generator_id,
        "seed": dataset.seed,
        "n": len(dataset),
        "covariate_names": list(dataset.covariate_names),
        "coefficients": dataset.coefficients,
    }
    with path.open("w") as fh:
        if isinstance(dataset, SequentialDataset):
            for s in dataset.samples:
                fh.write(json.dumps({"x": s.covariate_history.tolist(), "t": s.treatment,
                                     "y": s.observed_outcome, "mu0": s.mu0, "mu1": s.mu1}) + "\n")
        else:
            for i in range(len(dataset)):
                fh.write(json.dumps({"x": dataset.X[i].tolist(), "t": int(dataset.t[i]),
                                     "y": float(dataset.y[i]), "mu0": float(dataset.mu0[i]),
                                     "mu1": float(dataset.mu1[i])}) + "\n")
    meta_path(path).write_text(json.dumps(header, sort_keys=True) + "\n")
    return path


def read_jsonl(path):
    """Read a dataset written by ``write_jsonl``; without the sidecar, names are generic."""
    with Path(path).open() as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: no records")
    mp = meta_path(path)
    if mp.exists():
        header = json.loads(mp.read_text())
    else:
        x0 = rows[0]["x"]
        width = len(x0[0]) if isinstance(x0[0], list) else len(x0)
        header = {"generator": "unknown", "seed": None,
                  "covariate_names": [f"x{j}" for j in range(width)]}
    sequential = isinstance(rows[0]["x"][0], list)
    if sequential:
        samples = [SequentialSample(np.asarray(r["x"], dtype=float), int(r["t"]), float(r["y"]),
                                    float(r["mu0"]), float(r["mu1"])) for r in rows]
        return SequentialDataset(samples, header["covariate_names"], header["seed"],
                                 header.get("coefficients", {}), header["generator"])
    return SyntheticDataset(
        np.asarray([r["x"] for r in rows], dtype=float),
        np.asarray([r["t"] for r in rows], dtype=np.int64),
        np.asarray([r["y"] for r in rows], dtype=float),
        np.asarray([r["mu0"] for r in rows], dtype=float),
        np.asarray([r["mu1"] for r in rows], dtype=float),
        header["covariate_names"], header["generator"], header["seed"],
        header.get("coefficients", {}))


def read_covariate_csv(path, treatment_column="treatment"):
    """Read a comma-separated covariate table with a header row.

    Returns ``(X, t, names)``; ``t`` is None when the treatment column is absent.
    """
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        names = next(reader)
        rows = [r for r in reader if r]
    data = np.asarray(rows, dtype=float)
    if treatment_column in names:
        j = names.index(treatment_column)
        t = data[:, j].astype(np.int64)
        keep = [k for k in range(len(names)) if k != j]
        return data[:, keep], t, [names[k] for k in keep]
    return data, None, names


def write_covariate_csv(path, X, names, t=None, treatment_column="treatment"):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + ([treatment_column] if t is not None else []))
        for i in range(X.shape[0]):
            row = [repr(float(v)) for v in X[i]]
            if t is not None:
                row.append(str(int(t[i])))
            w.writerow(row)
