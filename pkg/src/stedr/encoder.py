"""Patient-level representation from a longitudinal visit x code matrix.

Covariate attention scores every code from its occurrence pattern across
visits plus a per-patient time embedding; visit attention scores every visit
from its code vector. Their outer product reweights the input matrix, which
then goes through a one-layer ReLU projection and a small post-norm
transformer; the visit positions are mean-pooled under the validity mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument


@dataclass
class VisitSequence:
    """One patient: ``codes`` (T, M), ``times`` days before index (T,), ``valid_mask`` (T,)."""

    codes: np.ndarray
    times: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.codes.ndim != 2 or self.times.shape != (self.codes.shape[0],) \
                or self.valid_mask.shape != self.times.shape:
            raise InvalidArgument("codes must be (T, M) with times/valid_mask of length T")
        if np.any(self.codes[~self.valid_mask] != 0):
            raise InvalidArgument("masked visits must be all-zero")

    @classmethod
    def from_visits(cls, codes, times=None):
        codes = np.asarray(codes, dtype=float)
        if times is None:
            times = np.arange(codes.shape[0] - 1, -1, -1, dtype=float)
        return cls(codes, times, np.ones(codes.shape[0], dtype=bool))

    @classmethod
    def static(cls, x):
        """A static covariate vector as a single visit at the index date."""
        x = np.asarray(x, dtype=float)
        return cls(x[None, :], np.zeros(1), np.ones(1, dtype=bool))


@dataclass
class SequenceBatch:
    codes: np.ndarray   # (N, T_max, M)
    times: np.ndarray   # (N, T_max)
    mask: np.ndarray    # (N, T_max) bool

    def __len__(self):
        return self.codes.shape[0]

    def take(self, idx):
        return SequenceBatch(self.codes[idx], self.times[idx], self.mask[idx])

    def tensors(self, dtype=torch.float64):
        return (torch.as_tensor(self.codes, dtype=dtype), torch.as_tensor(self.times, dtype=dtype),
                torch.as_tensor(self.mask, dtype=torch.bool))


def collate(sequences, t_max):
    """Left-aligned padding to ``t_max`` visits; longer histories keep the most recent."""
    if not sequences:
        raise InvalidArgument("no sequences to collate")
    M = sequences[0].codes.shape[1]
    codes = np.zeros((len(sequences), t_max, M))
    times = np.zeros((len(sequences), t_max))
    mask = np.zeros((len(sequences), t_max), dtype=bool)
    for i, s in enumerate(sequences):
        if s.codes.shape[1] != M:
            raise InvalidArgument("all sequences must share the code dimension")
        keep = np.flatnonzero(s.valid_mask)[-t_max:]
        n = len(keep)
        codes[i, :n] = s.codes[keep]
        times[i, :n] = s.times[keep]
        mask[i, :n] = True
    return SequenceBatch(codes, times, mask)


def static_batch(X):
    X = np.asarray(X, dtype=float)
    return SequenceBatch(X[:, None, :].copy(), np.zeros((X.shape[0], 1)),
                         np.ones((X.shape[0], 1), dtype=bool))


@dataclass
class AttentionScores:
    a_d: torch.Tensor  # (B, M)
    a_v: torch.Tensor  # (B, T)
    A: torch.Tensor    # (B, T, M)


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise InvalidArgument(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, z, mask):
        B, T, H = z.shape
        dh = H // self.heads
        q, k, v = self.qkv(z).view(B, T, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(B, T, H))


class EncoderLayer(nn.Module):
    """Post-norm transformer block with a ReLU feedforward."""

    def __init__(self, width, heads, ff_mult=2):
        super().__init__()
        self.attn = SelfAttention(width, heads)
        self.norm1 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.ReLU(),
                                nn.Linear(ff_mult * width, width))
        self.norm2 = nn.LayerNorm(width)

    def forward(self, z, mask):
        z = self.norm1(z + self.attn(z, mask))
        return self.norm2(z + self.ff(z))


class PatientEncoder(nn.Module):
    def __init__(self, n_codes, t_max, emb_dim, hidden, n_layers=1, heads=2,
                 ablate_attention=False, rescale_attention=True):
        super().__init__()
        self.n_codes, self.t_max = n_codes, t_max
        self.ablate_attention = ablate_attention
        # A sums to one over all T*M cells; multiplying by T*M (a constant the next
        # linear layer could absorb) keeps its input on the scale of the raw codes.
        self.attention_gain = float(t_max * n_codes) if rescale_attention else 1.0
        bound = 1.0 / math.sqrt(t_max)
        # one independent linear map per code: occurrence vector (t_max) -> emb_dim
        self.code_weight = nn.Parameter(torch.empty(n_codes, t_max, emb_dim).uniform_(-bound, bound))
        self.code_bias = nn.Parameter(torch.empty(n_codes, emb_dim).uniform_(-bound, bound))
        self.time_embed = nn.Linear(t_max, emb_dim)
        self.visit_embed = nn.Linear(n_codes, emb_dim)
        self.s_d = nn.Parameter(torch.randn(emb_dim) / math.sqrt(emb_dim))
        self.s_v = nn.Parameter(torch.randn(emb_dim) / math.sqrt(emb_dim))
        self.input_proj = nn.Linear(n_codes, hidden)
        self.layers = nn.ModuleList(EncoderLayer(hidden, heads) for _ in range(n_layers))
        self.out_dim = hidden

    def _check(self, codes, times, mask):
        if codes.dim() != 3 or codes.shape[1] != self.t_max or codes.shape[2] != self.n_codes:
            raise InvalidArgument(
                f"expected codes of shape (B, {self.t_max}, {self.n_codes}), got {tuple(codes.shape)}")
        if times.shape != codes.shape[:2] or mask.shape != codes.shape[:2]:
            raise InvalidArgument("times/mask must be (B, T_max)")
        if not bool(mask.any(dim=1).all()):
            raise InvalidArgument("every sequence needs at least one unmasked visit")

    def covariate_embeddings(self, codes, times):
        """Explicit per-code embeddings e_m = h_m + r, shape (B, M, p)."""
        h = torch.einsum("btm,mtp->bmp", codes, self.code_weight) + self.code_bias
        return h + self.time_embed(times)[:, None, :]

    def attention(self, codes, times, mask):
        self._check(codes, times, mask)
        times = times.masked_fill(~mask, 0.0)
        # e_m . s_d is linear in the embedding weights, so s_d is folded in first;
        # this never materializes the (B, M, p) embedding tensor.
        w_d = self.code_weight @ self.s_d                                   # (M, T)
        logits_d = ((codes * w_d.T).sum(dim=1) + self.code_bias @ self.s_d
                    + (self.time_embed(times) @ self.s_d)[:, None])
        a_d = torch.softmax(logits_d, dim=-1)
        w_v = self.visit_embed.weight.T @ self.s_v                          # (M,)
        logits_v = (codes @ w_v + self.visit_embed.bias @ self.s_v).masked_fill(~mask, float("-inf"))
        a_v = torch.softmax(logits_v, dim=-1)
        return AttentionScores(a_d, a_v, a_v[:, :, None] * a_d[:, None, :])

    def forward(self, codes, times, mask, return_attention=False):
        attn = None
        if self.ablate_attention:
            self._check(codes, times, mask)
            weighted = codes
        else:
            attn = self.attention(codes, times, mask)
            weighted = self.attention_gain * attn.A * codes
        z = torch.relu(self.input_proj(weighted))
        for layer in self.layers:
            z = layer(z, mask)
        m = mask.to(z.dtype)[:, :, None]
        x_hat = (z * m).sum(dim=1) / m.sum(dim=1)
        return (x_hat, attn) if return_attention else x_hat

    def encode_static(self, X):
        """Static covariates (B, M) through the single-visit path."""
        X = torch.as_tensor(X)
        B = X.shape[0]
        codes = torch.zeros(B, self.t_max, self.n_codes, dtype=X.dtype)
        codes[:, 0] = X
        times = torch.zeros(B, self.t_max, dtype=X.dtype)
        mask = torch.zeros(B, self.t_max, dtype=torch.bool)
        mask[:, 0] = True
        return self.forward(codes, times, mask)


def _as_batch(encoder, seq):
    if isinstance(seq, VisitSequence):
        seq = collate([seq], encoder.t_max)
    dtype = next(encoder.parameters()).dtype
    return seq.tensors(dtype)


def attention_scores(encoder, seq):
    """Covariate/visit attention for a VisitSequence or SequenceBatch."""
    return encoder.attention(*_as_batch(encoder, seq))


def encode(encoder, seq, attn=None):
    """Patient representation x_hat, shape (B, hidden).

    ``attn`` may carry precomputed scores; when None they are computed here.
    """
    codes, times, mask = _as_batch(encoder, seq)
    if attn is None or encoder.ablate_attention:
        return encoder(codes, times, mask)
    z = torch.relu(encoder.input_proj(encoder.attention_gain * attn.A * codes))
    for layer in encoder.layers:
        z = layer(z, mask)
    m = mask.to(z.dtype)[:, :, None]
    return (z * m).sum(dim=1) / m.sum(dim=1)
