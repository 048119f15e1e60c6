"""Four-head prediction network, IPTW, overlap penalty, and the training loop.

The heads read the mean of the assigned subgroup's local Gaussian. The total
objective per batch is ``L_snn + L_pnn + L_overlap``; IPTW weights and the
assigned-subgroup labels enter the loss as constants.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SequentialDataset, SyntheticDataset
from .encoder import PatientEncoder, SequenceBatch, VisitSequence, collate, static_batch
from .errors import InvalidArgument, InvalidConfig, PositivityViolation, TrainingDiverged
from scipy.cluster.vq import kmeans2

from .subgroup import (SubgroupNet, encode_distributions, init_local_centroids, snn_loss,
                       subgroup_posterior)

log = logging.getLogger(__name__)

Z95 = 1.96
OUTCOME_KINDS = ("continuous", "binary")
IPTW_MODES = ("literal_sum", "treatment_conditional")
DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class TrainConfig:
    K: int = 3
    alpha: float = 0.3
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 30
    hidden: int = 50
    latent_dim: int = 0            # 0 -> same as hidden
    transformer_layers: int = 1
    head_layers: int = 1
    attention_heads: int = 2
    t_max: int = 50
    outcome_kind: str = "continuous"
    iptw_mode: str = "literal_sum"
    propensity_clip: float = 0.05
    ablate_gmm: bool = False
    ablate_attention: bool = False
    seed: int = 0
    split: tuple = (0.6, 0.2, 0.2)
    mc_samples: int = 1
    optimizer: str = "adam"
    dtype: str = "float64"
    early_stop_metric: str = "total"
    standardize_inputs: bool = True
    standardize_outcome: bool = True
    allow_alpha_override: bool = False
    detach_target: bool = True
    subgroup_init: str = "kmeans"  # or "random"
    warmup_epochs: int = 0
    rescale_attention: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if not self.allow_alpha_override and not 0.1 <= self.alpha <= 0.5:
            raise InvalidConfig(f"alpha={self.alpha} outside [0.1, 0.5]")
        if not 0.0 < self.propensity_clip < 0.5:
            raise InvalidConfig("propensity_clip must lie in (0, 0.5)")
        if self.outcome_kind not in OUTCOME_KINDS:
            raise InvalidConfig(f"outcome_kind must be one of {OUTCOME_KINDS}")
        if self.iptw_mode not in IPTW_MODES:
            raise InvalidConfig(f"iptw_mode must be one of {IPTW_MODES}")
        if self.dtype not in DTYPES:
            raise InvalidConfig(f"dtype must be one of {tuple(DTYPES)}")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidConfig("optimizer must be 'adam' or 'sgd'")
        if self.subgroup_init not in ("kmeans", "random"):
            raise InvalidConfig("subgroup_init must be 'kmeans' or 'random'")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")
        if self.warmup_epochs < 0:
            raise InvalidConfig("warmup_epochs must be >= 0")
        if self.early_stop_metric not in ("total", "factual"):
            raise InvalidConfig("early_stop_metric must be 'total' or 'factual'")
        if self.K < 1 or self.mc_samples < 1 or self.batch_size < 2:
            raise InvalidConfig("K >= 1, mc_samples >= 1 and batch_size >= 2 required")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise InvalidConfig("split must be three fractions summing to 1")

    @property
    def latent(self):
        return self.latent_dim or self.hidden

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CausalData:
    """Model-ready inputs: padded sequences, treatment, outcome and optional truth."""

    batch: SequenceBatch
    t: np.ndarray
    y: np.ndarray
    mu0: np.ndarray = None
    mu1: np.ndarray = None

    def __len__(self):
        return len(self.t)

    def take(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return CausalData(self.batch.take(idx), self.t[idx], self.y[idx], pick(self.mu0),
                          pick(self.mu1))

    @property
    def true_effect(self):
        return None if self.mu0 is None else self.mu1 - self.mu0


def as_causal_data(dataset, t_max=50):
    if isinstance(dataset, CausalData):
        return dataset
    if isinstance(dataset, SyntheticDataset):
        return CausalData(static_batch(dataset.X), np.asarray(dataset.t), np.asarray(dataset.y, float),
                          dataset.mu0, dataset.mu1)
    if isinstance(dataset, SequentialDataset):
        seqs = [VisitSequence.from_visits(s.covariate_history) for s in dataset.samples]
        return CausalData(collate(seqs, t_max), dataset.t, dataset.y, dataset.mu0, dataset.mu1)
    raise InvalidArgument(f"cannot build model inputs from {type(dataset).__name__}")


# ------------------------------------------------------------------ network

def mlp(in_dim, hidden, out_dim, n_hidden):
    layers, width = [], in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(width, hidden), nn.ReLU()]
        width = hidden
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


class PredictionHeads(nn.Module):
    def __init__(self, latent, hidden, n_subgroups, n_hidden=1, with_subgroup_head=True):
        super().__init__()
        self.head_y0 = mlp(latent, hidden, 1, n_hidden)
        self.head_y1 = mlp(latent, hidden, 1, n_hidden)
        self.head_t = mlp(latent, hidden, 1, n_hidden)
        self.head_k = mlp(latent, hidden, n_subgroups, n_hidden) if with_subgroup_head else None


@dataclass
class Output:
    x_hat: torch.Tensor
    glob: object
    locals: list
    posterior: object
    k_star: torch.Tensor
    r_star: torch.Tensor
    y0: torch.Tensor        # head output: value (continuous) or logit (binary)
    y1: torch.Tensor
    t_logit: torch.Tensor
    k_logits: torch.Tensor
    binary: bool
    clip: float

    @property
    def y0_hat(self):
        return torch.sigmoid(self.y0) if self.binary else self.y0

    @property
    def y1_hat(self):
        return torch.sigmoid(self.y1) if self.binary else self.y1

    @property
    def tau_hat(self):
        return self.y1_hat - self.y0_hat

    @property
    def t_hat(self):
        return torch.sigmoid(self.t_logit).clamp(self.clip, 1.0 - self.clip)


class STEDRNet(nn.Module):
    def __init__(self, n_codes, t_max, config):
        super().__init__()
        c = config
        self.config = c
        self.encoder = PatientEncoder(n_codes, t_max, c.hidden, c.hidden, c.transformer_layers,
                                      c.attention_heads, c.ablate_attention, c.rescale_attention)
        self.subgroup = SubgroupNet(c.hidden, c.latent, c.K, c.ablate_gmm)
        self.heads = PredictionHeads(c.latent, c.hidden, c.K, c.head_layers,
                                     with_subgroup_head=not c.ablate_gmm)

    def forward(self, codes, times, mask):
        return forward_heads(self, self.encoder(codes, times, mask))


def forward_heads(net, x_hat):
    """Subgroup assignment and the four heads on the assigned local mean."""
    glob, locals_ = encode_distributions(net.subgroup, x_hat)
    h = net.heads
    if net.subgroup.ablate_gmm:
        posterior = None
        k_star = torch.zeros(x_hat.shape[0], dtype=torch.long)
        r_star = glob.mean
        k_logits = None
    else:
        posterior = subgroup_posterior(glob, locals_)
        k_star = posterior.assigned
        means = torch.stack([g.mean for g in locals_], dim=1)            # (B, K, p)
        r_star = means[torch.arange(means.shape[0]), k_star]
        k_logits = h.head_k(r_star)
    return Output(x_hat, glob, locals_, posterior, k_star, r_star,
                  h.head_y0(r_star).squeeze(-1), h.head_y1(r_star).squeeze(-1),
                  h.head_t(r_star).squeeze(-1), k_logits,
                  net.config.outcome_kind == "binary", net.config.propensity_clip)


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


# ------------------------------------------------------------------ losses

def iptw_weights(t_hat, pr_t, mode="literal_sum", clip=0.05, t=None):
    """Inverse-probability-of-treatment weights.

    ``literal_sum`` adds both arms' terms for every sample; ``treatment_conditional``
    is the usual stabilized per-arm weight and needs ``t``.
    """
    if not 0.0 < pr_t < 1.0:
        raise PositivityViolation(f"treated fraction {pr_t} is not inside (0, 1)")
    is_torch = isinstance(t_hat, torch.Tensor)
    th = t_hat.clamp(clip, 1.0 - clip) if is_torch else np.clip(np.asarray(t_hat, float), clip, 1.0 - clip)
    if mode == "literal_sum":
        return pr_t / th + (1.0 - pr_t) / (1.0 - th)
    if mode == "treatment_conditional":
        if t is None:
            raise InvalidArgument("treatment_conditional weights need the treatment vector")
        where = torch.where if is_torch else np.where
        return where(t == 1, pr_t / th, (1.0 - pr_t) / (1.0 - th))
    raise InvalidArgument(f"unknown IPTW mode {mode!r}")


def pnn_loss(out, t, y, weights):
    """Sum over the batch of CE(t) + CE(k*) + w * outcome loss on the factual head."""
    tf = t.to(out.t_logit.dtype)
    ce_t = F.binary_cross_entropy_with_logits(out.t_logit, tf, reduction="sum")
    if out.k_logits is not None:
        ce_k = F.cross_entropy(out.k_logits, out.k_star.detach(), reduction="sum")
    else:
        ce_k = out.t_logit.new_zeros(())
    factual = torch.where(t == 1, out.y1, out.y0)
    if out.binary:
        ell = F.binary_cross_entropy_with_logits(factual, y, reduction="none")
    else:
        ell = (factual - y) ** 2
    outcome = (weights * ell).sum()
    return ce_t + ce_k + outcome, {"ce_t": ce_t, "ce_k": ce_k, "outcome": outcome}


def interval_overlap(a, b):
    return max(0.0, min(a[1], b[1]) - max(a[0], b[0]))


def subgroup_intervals(tau_hat, subgroup, K):
    """Batch-level 95% CI (mean +- 1.96 sd/sqrt(n)) per subgroup; None when n < 2."""
    cis = []
    for k in range(K):
        sel = tau_hat[subgroup == k]
        n = sel.shape[0]
        if n < 2:
            cis.append(None)
            continue
        mean = sel.mean()
        var = ((sel - mean) ** 2).sum() / (n - 1)
        pos = var > 0
        sd = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))),
                         torch.zeros_like(var))
        half = Z95 * sd / math.sqrt(n)
        cis.append((mean - half, mean + half))
    return cis


def overlap_penalty(tau_hat, subgroup, alpha, K):
    """alpha * sum over subgroup pairs of CI overlap; returns (penalty, CIs)."""
    cis = subgroup_intervals(tau_hat, subgroup, K)
    total = tau_hat.new_zeros(())
    for i in range(K):
        for j in range(i + 1, K):
            if cis[i] is None or cis[j] is None:
                continue
            ov = torch.minimum(cis[i][1], cis[j][1]) - torch.maximum(cis[i][0], cis[j][0])
            total = total + torch.clamp(ov, min=0.0)
    return alpha * total, cis


def draw_noise(generator, mc_samples, batch, latent, dtype):
    return torch.randn(mc_samples, batch, latent, generator=generator, dtype=dtype)


def total_loss(net, codes, times, mask, t, y, eps, pr_t, weights=None):
    """Per-batch objective L_snn + L_pnn + L_overlap.

    ``weights`` defaults to IPTW weights from the detached propensity head.
    Returns (loss, parts, output).
    """
    c = net.config
    out = net(codes, times, mask)
    l_snn, snn_parts = snn_loss(net.subgroup, out.x_hat, out.glob, out.locals, out.posterior, eps,
                                c.detach_target)
    if weights is None:
        weights = iptw_weights(out.t_hat.detach(), pr_t, c.iptw_mode, c.propensity_clip, t)
    l_pnn, pnn_parts = pnn_loss(out, t, y, weights)
    l_ov, _ = overlap_penalty(out.tau_hat, out.k_star, c.alpha, 1 if c.ablate_gmm else c.K)
    loss = l_snn + l_pnn + l_ov
    parts = {"snn": l_snn, "pnn": l_pnn, "overlap": l_ov, **snn_parts, **pnn_parts}
    return loss, parts, out


# ------------------------------------------------------------------ training

@dataclass
class TrainedModel:
    net: STEDRNet
    config: TrainConfig
    pr_t: float
    n_codes: int
    t_max: int
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float = 0.0
    y_scale: float = 1.0
    history: list = field(default_factory=list)
    best_epoch: int = -1
    split: dict = field(default_factory=dict)

    def prepare(self, data):
        """Apply the training-split input standardization to ``data``'s sequences."""
        b = resize(data.batch, self.t_max)
        codes = b.codes
        if self.config.standardize_inputs:
            codes = np.where(b.mask[:, :, None], (codes - self.x_mean) / self.x_scale, 0.0)
        return SequenceBatch(codes, b.times * b.mask, b.mask)

    def tensors(self, data):
        return self.prepare(data).tensors(self.config.torch_dtype)

    def outcome_tensor(self, y):
        y = np.asarray(y, dtype=float)
        if self.config.outcome_kind == "continuous":
            y = (y - self.y_mean) / self.y_scale
        return torch.as_tensor(y, dtype=self.config.torch_dtype)


def resize(b, t_max):
    T = b.codes.shape[1]
    if T == t_max:
        return b
    return _trim(b, t_max) if T > t_max else _pad(b, t_max)


def _trim(b, t_max):
    # keep the most recent t_max valid visits, left-aligned
    codes = np.zeros((len(b), t_max, b.codes.shape[2]))
    times = np.zeros((len(b), t_max))
    mask = np.zeros((len(b), t_max), dtype=bool)
    for i in range(len(b)):
        keep = np.flatnonzero(b.mask[i])[-t_max:]
        codes[i, :len(keep)] = b.codes[i, keep]
        times[i, :len(keep)] = b.times[i, keep]
        mask[i, :len(keep)] = True
    return SequenceBatch(codes, times, mask)


def _pad(b, t_max):
    n, T, M = b.codes.shape
    codes = np.zeros((n, t_max, M))
    times = np.zeros((n, t_max))
    mask = np.zeros((n, t_max), dtype=bool)
    codes[:, :T], times[:, :T], mask[:, :T] = b.codes, b.times, b.mask
    return SequenceBatch(codes, times, mask)


def split_indices(n, seed, fractions=(0.6, 0.2, 0.2)):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:])}


def _fit_preprocessing(data, config):
    b = data.batch
    M = b.codes.shape[2]
    if config.standardize_inputs:
        rows = b.codes[b.mask]
        x_mean = rows.mean(axis=0)
        x_scale = rows.std(axis=0)
        x_scale[x_scale == 0] = 1.0
    else:
        x_mean, x_scale = np.zeros(M), np.ones(M)
    y_mean, y_scale = 0.0, 1.0
    if config.outcome_kind == "continuous" and config.standardize_outcome:
        y_mean = float(np.mean(data.y))
        y_scale = float(np.std(data.y)) or 1.0
    return x_mean, x_scale, y_mean, y_scale


class _ThreadGuard:
    """Single-threaded torch inside training for reproducible reductions."""

    def __enter__(self):
        self.prev = torch.get_num_threads()
        torch.set_num_threads(1)

    def __exit__(self, *exc):
        torch.set_num_threads(self.prev)


def _optimizer(net, config):
    if config.optimizer == "adam":
        return torch.optim.Adam(net.parameters(), lr=config.learning_rate,
                                weight_decay=config.weight_decay)
    return torch.optim.SGD(net.parameters(), lr=config.learning_rate,
                           weight_decay=config.weight_decay)


def global_means(net, codes, times, mask, chunk=1024):
    with torch.no_grad():
        parts = [net.subgroup.global_encoder(net.encoder(codes[i:i + chunk], times[i:i + chunk],
                                                         mask[i:i + chunk])).mean
                 for i in range(0, codes.shape[0], chunk)]
    return torch.cat(parts).double().numpy()


def init_subgroups(net, codes, times, mask, seed):
    """k-means (k-means++ seeding) on the global latent means, then centroid-initialized locals."""
    mu = global_means(net, codes, times, mask)
    centers, _ = kmeans2(mu, net.config.K, minit="++", seed=np.random.default_rng(seed))
    init_local_centroids(net.subgroup, centers)
    return centers


def evaluate_loss(model, data, noise_seed):
    """Total loss (and its parts) on ``data`` as a single batch with fixed MC noise."""
    net, c = model.net, model.config
    codes, times, mask = model.tensors(data)
    t = torch.as_tensor(data.t)
    y = model.outcome_tensor(data.y)
    gen = torch.Generator().manual_seed(noise_seed)
    eps = draw_noise(gen, c.mc_samples, len(data), c.latent, c.torch_dtype)
    with torch.no_grad():
        loss, parts, out = total_loss(net, codes, times, mask, t, y, eps, model.pr_t)
        factual = torch.where(t == 1, out.y1, out.y0)
        if out.binary:
            fe = F.binary_cross_entropy_with_logits(factual, y).item()
        else:
            fe = ((factual - y) ** 2).mean().item()
    return float(loss), {k: float(v) for k, v in parts.items()}, fe


def train(dataset, config=None, t_max=None):
    """Fit the full model with seeded 6:2:2 split and validation early stopping."""
    config = config or TrainConfig()
    data = as_causal_data(dataset, config.t_max)
    if t_max is None:
        longest = int(data.batch.mask.sum(axis=1).max())
        t_max = min(config.t_max, longest)
    split = split_indices(len(data), config.seed, config.split)
    tr = data.take(split["train"])
    va = data.take(split["val"])
    if tr.t.min() == tr.t.max():
        raise PositivityViolation("training split contains a single treatment arm")
    pr_t = float(np.mean(tr.t))
    n_codes = data.batch.codes.shape[2]

    with _ThreadGuard():
        torch.manual_seed(config.seed)
        net = STEDRNet(n_codes, t_max, config).to(config.torch_dtype)
        # preprocessing statistics come from the training split only
        x_mean, x_scale, y_mean, y_scale = _fit_preprocessing(
            CausalData(resize(tr.batch, t_max), tr.t, tr.y), config)
        model = TrainedModel(net, config, pr_t, n_codes, t_max, x_mean, x_scale, y_mean, y_scale,
                             split=split)
        codes, times, mask = model.tensors(tr)
        t_all = torch.as_tensor(tr.t)
        y_all = model.outcome_tensor(tr.y)
        opt = _optimizer(net, config)
        gen = torch.Generator().manual_seed(config.seed + 1)
        n = len(tr)
        best, best_state, best_epoch, waited = math.inf, None, -1, 0
        for epoch in range(config.max_epochs):
            if epoch == config.warmup_epochs and config.subgroup_init == "kmeans" \
                    and not config.ablate_gmm:
                init_subgroups(net, codes, times, mask, config.seed)
                opt = _optimizer(net, config)
                best, best_state, waited = math.inf, None, 0
            net.train()
            perm = torch.randperm(n, generator=gen)
            sums = {"total": 0.0, "snn": 0.0, "pnn": 0.0, "overlap": 0.0}
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                eps = draw_noise(gen, config.mc_samples, len(idx), config.latent, config.torch_dtype)
                loss, parts, _ = total_loss(net, codes[idx], times[idx], mask[idx], t_all[idx],
                                            y_all[idx], eps, pr_t)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                sums["total"] += loss.item()
                for k in ("snn", "pnn", "overlap"):
                    sums[k] += parts[k].item()
            net.eval()
            val_loss, val_parts, val_factual = evaluate_loss(model, va, config.seed + 2)
            if not math.isfinite(val_loss):
                raise TrainingDiverged(epoch, "non-finite validation loss")
            monitored = val_loss if config.early_stop_metric == "total" else val_factual
            model.history.append({"epoch": epoch, "loss": sums["total"], "snn": sums["snn"],
                                  "pnn": sums["pnn"], "overlap": sums["overlap"],
                                  "val_loss": val_loss, "val_factual": val_factual,
                                  "val_parts": val_parts})
            if monitored < best:
                best, best_epoch, waited = monitored, epoch, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                waited += 1
                if waited >= config.patience:
                    break
        net.load_state_dict(best_state)
        net.eval()
        model.best_epoch = best_epoch
    return model


# ------------------------------------------------------------------ inference

@dataclass
class EffectEstimate:
    tau_hat: float
    subgroup: int
    y0_hat: float
    y1_hat: float
    t_hat: float


def predict(model, data, raw=False):
    """Deterministic forward pass; returns arrays keyed by estimate field.

    Continuous outcomes are in standardized units unless ``raw`` is set.
    """
    data = as_causal_data(data, model.t_max)
    codes, times, mask = model.tensors(data)
    with _ThreadGuard(), torch.no_grad():
        out = model.net(codes, times, mask)
        y0 = out.y0_hat.numpy().astype(float)
        y1 = out.y1_hat.numpy().astype(float)
        t_hat = out.t_hat.numpy().astype(float)
        k = out.k_star.numpy().astype(np.int64)
    if raw and model.config.outcome_kind == "continuous":
        y0 = y0 * model.y_scale + model.y_mean
        y1 = y1 * model.y_scale + model.y_mean
    return {"tau_hat": y1 - y0, "subgroup": k, "y0_hat": y0, "y1_hat": y1, "t_hat": t_hat}


def estimate_effects(model, samples, raw=False):
    p = predict(model, samples, raw=raw)
    return [EffectEstimate(float(p["tau_hat"][i]), int(p["subgroup"][i]), float(p["y0_hat"][i]),
                           float(p["y1_hat"][i]), float(p["t_hat"][i]))
            for i in range(len(p["tau_hat"]))]


def standardized_truth(model, data):
    """True effects of ``data`` expressed in the model's outcome units."""
    data = as_causal_data(data, model.t_max)
    return data.true_effect / model.y_scale
