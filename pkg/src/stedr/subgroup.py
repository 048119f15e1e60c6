"""Global and per-subgroup latent Gaussians and the subgroup losses.

The global encoder gives one diagonal Gaussian for the whole population; K
local encoders give one per subgroup. A sample's subgroup posterior is a
softmax over negative squared distances between local and global means, and
the posterior-weighted mixture of locals is pulled toward the global Gaussian
by a Monte-Carlo KL term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NumericDomainError

LOG_2PI = math.log(2.0 * math.pi)
MIN_VARIANCE = 1e-12

# Target-distribution loss form: "kl" = sum q log(q/p); "cross" = sum q log p as printed.
TARGET_LOSS_FORM = "kl"


@dataclass
class GaussianParams:
    mean: torch.Tensor
    log_variance: torch.Tensor

    @property
    def variance(self):
        return torch.exp(self.log_variance)

    def sample(self, eps):
        """Reparameterized draw mean + sigma * eps; ``eps`` broadcasts over leading dims."""
        return self.mean + torch.exp(0.5 * self.log_variance) * eps

    def log_density(self, z):
        return -0.5 * (LOG_2PI + self.log_variance
                       + (z - self.mean) ** 2 / torch.exp(self.log_variance)).sum(-1)


@dataclass
class SubgroupPosterior:
    logits: torch.Tensor  # (B, K)

    @property
    def probs(self):
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self):
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def assigned(self):
        # torch.argmax returns the first maximal index, i.e. lowest-index tie break
        return torch.argmax(self.logits, dim=-1)


class GaussianEncoder(nn.Module):
    """Single linear layer producing (mean, log_variance)."""

    def __init__(self, in_dim, latent_dim):
        super().__init__()
        self.linear = nn.Linear(in_dim, 2 * latent_dim)
        self.latent_dim = latent_dim

    def forward(self, x):
        mean, log_var = self.linear(x).split(self.latent_dim, dim=-1)
        return GaussianParams(mean, log_var)


class SubgroupNet(nn.Module):
    def __init__(self, in_dim, latent_dim, n_subgroups, ablate_gmm=False):
        super().__init__()
        self.n_subgroups = n_subgroups
        self.ablate_gmm = ablate_gmm
        self.global_encoder = GaussianEncoder(in_dim, latent_dim)
        if not ablate_gmm:
            self.local_encoders = nn.ModuleList(
                GaussianEncoder(in_dim, latent_dim) for _ in range(n_subgroups))
            self.decoder = nn.Linear(latent_dim, in_dim)

    def forward(self, x_hat):
        return encode_distributions(self, x_hat)


def init_local_centroids(net, centers):
    """Point every local encoder at a fixed centroid in the global-mean space.

    Local mean weights are zeroed and their biases set to ``centers`` (K, p);
    the variance parts copy the global encoder. The posterior logits then start
    as -||mu_global(x) - center_k||^2, a soft nearest-centroid assignment.
    """
    p = net.global_encoder.latent_dim
    g = net.global_encoder.linear
    with torch.no_grad():
        for enc, c in zip(net.local_encoders, centers):
            enc.linear.weight[:p].zero_()
            enc.linear.bias[:p].copy_(torch.as_tensor(c, dtype=enc.linear.bias.dtype))
            enc.linear.weight[p:].copy_(g.weight[p:])
            enc.linear.bias[p:].copy_(g.bias[p:])


def encode_distributions(net, x_hat):
    glob = net.global_encoder(x_hat)
    if net.ablate_gmm:
        return glob, []
    return glob, [enc(x_hat) for enc in net.local_encoders]


def similarity_logits(glob, locals_):
    means = torch.stack([g.mean for g in locals_], dim=-2)       # (..., K, p)
    return -((means - glob.mean.unsqueeze(-2)) ** 2).sum(-1)


def subgroup_posterior(glob, locals_):
    return SubgroupPosterior(similarity_logits(glob, locals_))


def _check_variances(*gaussians):
    for g in gaussians:
        if bool((torch.exp(g.log_variance) <= MIN_VARIANCE).any()):
            raise NumericDomainError("degenerate variance (<= 1e-12) in mixture KL")


def mixture_kl_loss(glob, locals_, posterior, eps):
    """Monte-Carlo KL(global || sum_k p_k local_k), one value per sample.

    ``eps`` is standard-normal noise of shape (S, ..., p); S is the number of
    Monte-Carlo draws. Returns the per-sample estimate (not clamped).
    """
    _check_variances(glob, *locals_)
    z = glob.sample(eps)                                           # (S, B, p)
    log_p = glob.log_density(z)                                    # (S, B)
    comp = torch.stack([g.log_density(z) for g in locals_], dim=-1)  # (S, B, K)
    log_q = torch.logsumexp(comp + posterior.log_probs, dim=-1)
    return (log_p - log_q).mean(dim=0)


def target_distribution(P):
    """Sharpened, frequency-normalized targets q and the empty-column mask."""
    r = P.sum(dim=0)
    empty = r <= 0
    safe_r = torch.where(empty, torch.ones_like(r), r)
    num = torch.where(empty, torch.zeros_like(P), P ** 2 / safe_r)
    q = num / num.sum(dim=-1, keepdim=True)
    return q, empty


def target_distribution_loss(P, form=None, detach_target=True):
    """(q, L_td) for a batch of posterior rows ``P`` (n, K); L_td sums over the batch.

    With ``detach_target`` the sharpened q is a fixed reference for the step,
    so the gradient only moves ``P`` toward it.
    """
    form = form or TARGET_LOSS_FORM
    q, empty = target_distribution(P.detach() if detach_target else P)
    live = q > 0
    safe_q = torch.where(live, q, torch.ones_like(q))
    safe_p = torch.where(live, P, torch.ones_like(P))
    if form == "kl":
        terms = torch.where(live, q * (torch.log(safe_q) - torch.log(safe_p)), torch.zeros_like(q))
    elif form == "cross":
        terms = torch.where(live, q * torch.log(safe_p), torch.zeros_like(q))
    else:
        raise ValueError(f"unknown target loss form {form!r}")
    return q, terms.sum(), empty


def reconstruction_loss(net, glob, x_hat, eps):
    """Mean over the batch of 0.5 * ||decoder(z) - x_hat||^2 with z drawn from the global Gaussian."""
    z = glob.sample(eps)
    return 0.5 * ((net.decoder(z) - x_hat) ** 2).sum(-1).mean()


def snn_loss(net, x_hat, glob, locals_, posterior, eps, detach_target=True):
    """Subgroup-network loss L_kl + L_td + L_vae and its parts.

    ``eps`` has shape (S, B, p); the first draw also feeds the reconstruction.
    """
    zero = x_hat.new_zeros(())
    if net.ablate_gmm:
        return zero, {"kl": zero, "td": zero, "vae": zero, "empty_subgroups": 0}
    l_kl = mixture_kl_loss(glob, locals_, posterior, eps).mean()
    _, l_td, empty = target_distribution_loss(posterior.probs, detach_target=detach_target)
    l_vae = reconstruction_loss(net, glob, x_hat, eps[0])
    return l_kl + l_td + l_vae, {"kl": l_kl, "td": l_td, "vae": l_vae,
                                 "empty_subgroups": int(empty.sum())}
