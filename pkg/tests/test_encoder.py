import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stedr.encoder import (PatientEncoder, VisitSequence, attention_scores, collate, encode,
                           static_batch)
from stedr.errors import InvalidArgument


def make_encoder(M=5, T=3, p=4, h=4, layers=1, seed=0, **kw):
    torch.manual_seed(seed)
    return PatientEncoder(M, T, p, h, n_layers=layers, **kw).double()


def random_batch(B, T, M, seed=0, density=0.4):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, T + 1, size=B)
    seqs = []
    for n in lengths:
        codes = (rng.uniform(size=(n, M)) < density).astype(float)
        seqs.append(VisitSequence.from_visits(codes, np.sort(rng.uniform(0, 300, n))[::-1]))
    return collate(seqs, T)


# ---------------------------------------------------------------- attention

def test_equal_code_logits_give_uniform_attention():
    enc = make_encoder(M=4, T=2)
    with torch.no_grad():
        enc.code_weight.zero_()
        enc.code_bias.zero_()
    att = attention_scores(enc, VisitSequence.from_visits(np.eye(2, 4)))
    np.testing.assert_allclose(att.a_d.detach().numpy(), [[0.25] * 4], atol=1e-12)


def test_two_code_softmax_example():
    enc = make_encoder(M=2, T=1, p=1)
    with torch.no_grad():
        enc.code_weight.zero_()
        enc.time_embed.weight.zero_()
        enc.time_embed.bias.zero_()
        enc.s_d.fill_(1.0)
        enc.code_bias.copy_(torch.tensor([[0.0], [-1.0]]))
    att = attention_scores(enc, VisitSequence.static([1.0, 1.0]))
    np.testing.assert_allclose(att.a_d.detach().numpy()[0], [0.7311, 0.2689], atol=1e-4)


def test_attention_logits_match_explicit_embeddings():
    enc = make_encoder(M=6, T=4, p=3)
    codes, times, mask = random_batch(7, 4, 6, seed=2).tensors()
    att = enc.attention(codes, times, mask)
    e = enc.covariate_embeddings(codes, times)
    expected = torch.softmax(e @ enc.s_d, dim=-1)
    torch.testing.assert_close(att.a_d, expected, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 6), st.integers(0, 10_000))
def test_attention_simplex_properties(B, T, M, seed):
    enc = make_encoder(M=M, T=T, p=3, h=4, seed=seed % 7)
    batch = random_batch(B, T, M, seed=seed)
    att = attention_scores(enc, batch)
    np.testing.assert_allclose(att.a_d.sum(-1).detach(), 1.0, atol=1e-6)
    np.testing.assert_allclose(att.a_v.sum(-1).detach(), 1.0, atol=1e-6)
    np.testing.assert_allclose(att.A.sum((-1, -2)).detach(), 1.0, atol=1e-6)
    assert torch.all(att.a_v[~torch.as_tensor(batch.mask)] == 0)
    torch.testing.assert_close(att.A, att.a_v[:, :, None] * att.a_d[:, None, :])


def test_all_masked_rejected():
    enc = make_encoder()
    codes = torch.zeros(1, 3, 5, dtype=torch.float64)
    with pytest.raises(InvalidArgument):
        enc.attention(codes, torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, 3, dtype=bool))


def test_shape_mismatch_rejected():
    enc = make_encoder()
    with pytest.raises(InvalidArgument):
        enc(torch.zeros(1, 3, 4, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.float64),
            torch.ones(1, 3, dtype=bool))


def test_masked_visit_must_be_zero():
    with pytest.raises(InvalidArgument):
        VisitSequence(np.ones((2, 3)), np.zeros(2), np.array([True, False]))


# ---------------------------------------------------------------- encode

def test_output_width_at_full_scale():
    enc = make_encoder(M=286, T=5, p=16, h=64)
    x = encode(enc, random_batch(3, 5, 286, seed=1, density=0.05))
    assert x.shape == (3, 64) and torch.isfinite(x).all()


def test_attention_ablation_changes_output():
    batch = random_batch(4, 3, 5, seed=3)
    full = make_encoder(seed=1)
    ablated = make_encoder(seed=1, ablate_attention=True)
    diff = (encode(full, batch) - encode(ablated, batch)).abs().max()
    assert diff > 0


def test_precomputed_attention_matches_internal():
    enc = make_encoder()
    batch = random_batch(5, 3, 5, seed=4)
    torch.testing.assert_close(encode(enc, batch, attention_scores(enc, batch)), encode(enc, batch),
                               rtol=0, atol=0)


def test_appending_masked_visit_is_invisible():
    rng = np.random.default_rng(5)
    codes = (rng.uniform(size=(2, 5)) < 0.5).astype(float)
    base = VisitSequence.from_visits(codes, np.array([10.0, 3.0]))
    padded = VisitSequence(np.vstack([codes, np.zeros((1, 5))]), np.array([10.0, 3.0, 1.0]),
                           np.array([True, True, False]))
    enc = make_encoder(T=4)
    assert torch.equal(encode(enc, base), encode(enc, padded))


def test_permuting_trailing_masked_positions_is_invisible():
    enc = make_encoder(T=4)
    codes, times, mask = random_batch(1, 2, 5, seed=6).tensors()
    codes4 = torch.zeros(1, 4, 5, dtype=torch.float64)
    codes4[:, :2] = codes
    times4 = torch.zeros(1, 4, dtype=torch.float64)
    times4[:, :2] = times
    mask4 = torch.zeros(1, 4, dtype=bool)
    mask4[:, :2] = mask
    perm = [0, 1, 3, 2]
    assert torch.equal(enc(codes4, times4, mask4), enc(codes4[:, perm], times4[:, perm], mask4[:, perm]))


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 10_000),
       arrays(float, 3, elements=st.floats(0, 1000)))
def test_masked_slot_contents_never_change_output(B, extra, seed, junk_times):
    enc = make_encoder(M=5, T=4 + extra, seed=seed % 5)
    codes, times, mask = random_batch(B, 4, 5, seed=seed).tensors()
    pad = lambda x, fill: torch.cat([x, fill], dim=1)
    codes = pad(codes, torch.zeros(B, extra, 5, dtype=codes.dtype))
    mask = pad(mask, torch.zeros(B, extra, dtype=bool))
    zero_times = pad(times, torch.zeros(B, extra, dtype=times.dtype))
    junk = pad(times, torch.as_tensor(junk_times[:extra]).expand(B, extra))
    assert torch.equal(enc(codes, zero_times, mask), enc(codes, junk, mask))


@given(arrays(float, st.tuples(st.integers(1, 5), st.just(6)), elements=st.floats(-3, 3)))
def test_static_path_bit_for_bit(X):
    enc = make_encoder(M=6, T=1, p=3, h=4, seed=2)
    direct = enc.encode_static(torch.as_tensor(X))
    wrapped = encode(enc, collate([VisitSequence.static(x) for x in X], 1))
    via_batch = encode(enc, static_batch(X))
    assert torch.equal(direct, wrapped) and torch.equal(direct, via_batch)


def test_collate_keeps_most_recent_visits():
    codes = np.eye(4, 3)
    seq = VisitSequence.from_visits(codes, np.array([30.0, 20.0, 10.0, 0.0]))
    batch = collate([seq], 2)
    np.testing.assert_array_equal(batch.codes[0], codes[2:])
    np.testing.assert_array_equal(batch.times[0], [10.0, 0.0])


# ---------------------------------------------------------------- gradients

def test_parameter_gradients_match_central_differences():
    enc = make_encoder(M=5, T=3, p=4, h=4, seed=3)
    codes, times, mask = random_batch(2, 3, 5, seed=7, density=0.6).tensors()
    w = torch.randn(4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

    def probe():
        return (enc(codes, times, mask) @ w).sum()

    enc.zero_grad()
    probe().backward()
    step = 1e-5
    for name, param in enc.named_parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        for j in range(flat.numel()):
            old = flat[j].item()
            flat[j] = old + step
            up = probe().item()
            flat[j] = old - step
            down = probe().item()
            flat[j] = old
            fd = (up - down) / (2 * step)
            scale = max(abs(fd), abs(grad[j].item()), 1e-6)
            assert abs(fd - grad[j].item()) / scale <= 1e-4, (name, j, fd, grad[j].item())
