import math

import numpy as np
import pytest
import torch

from vqcpc.quantizer import (
    Codebook,
    DimensionMismatch,
    QuantizedSequence,
    quantize,
    straight_through,
    usage_stats,
    vq_loss_total,
    write_usage_csv,
)


def brute_force_indices(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Exhaustive nearest codeword per group, first index on ties."""
    G, V, dg = entries.shape
    out = np.zeros((len(z), G), dtype=np.int64)
    for n in range(len(z)):
        for g in range(G):
            part = z[n, g * dg : (g + 1) * dg]
            best, best_d = 0, math.inf
            for v in range(V):
                d = float(np.sum((part - entries[g, v]) ** 2))
                if d < best_d:
                    best, best_d = v, d
            out[n, g] = best
    return out


def _codebook(entries, gamma=0.25):
    entries = torch.as_tensor(entries, dtype=torch.float64)
    G, V, dg = entries.shape
    cb = Codebook(G * dg, G, V, gamma).double()
    with torch.no_grad():
        cb.entries.copy_(entries)
    return cb


def test_nearest_simple():
    cb = _codebook([[[1.0, 0.0], [3.0, 0.0]]])
    q = quantize(torch.zeros(1, 2, dtype=torch.float64), cb)
    assert q.indices.tolist() == [[0]]
    assert q.zhat.tolist() == [[1.0, 0.0]]


def test_exact_codeword_zero_loss():
    cb = _codebook(np.random.default_rng(0).normal(size=(2, 5, 3)))
    z = torch.cat([cb.entries[0, 3], cb.entries[1, 1]]).detach().unsqueeze(0)
    q = quantize(z, cb)
    assert q.indices.tolist() == [[3, 1]]
    assert q.codebook_term.item() == 0.0 and q.commitment_term.item() == 0.0


@pytest.mark.parametrize("G,V", [(1, 4), (2, 4), (1, 64), (2, 64)])
def test_matches_brute_force(G, V):
    rng = np.random.default_rng(G * 100 + V)
    entries = rng.normal(size=(G, V, 8 // G))
    z = rng.normal(size=(200, 8))
    q = quantize(torch.from_numpy(z), _codebook(entries))
    np.testing.assert_array_equal(q.indices.numpy(), brute_force_indices(z, entries))


def test_tie_goes_to_smallest_index():
    cb = _codebook([[[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]])
    q = quantize(torch.zeros(1, 2, dtype=torch.float64), cb)
    assert q.indices.item() == 0


def test_loss_terms_formula():
    rng = np.random.default_rng(3)
    entries = rng.normal(size=(2, 6, 4))
    z = rng.normal(size=(3, 5, 8))
    q = quantize(torch.from_numpy(z), _codebook(entries))
    zhat = q.zhat.detach().numpy()
    expected = np.mean(np.sum((z - zhat) ** 2, axis=-1))
    assert q.codebook_term.item() == pytest.approx(expected, abs=1e-12)
    assert q.commitment_term.item() == pytest.approx(expected, abs=1e-12)
    assert q.indices.shape == (3, 5, 2)


def test_idempotent_and_deterministic():
    rng = np.random.default_rng(4)
    cb = _codebook(rng.normal(size=(2, 16, 4)))
    z = torch.from_numpy(rng.normal(size=(50, 8)))
    q1, q2 = quantize(z, cb), quantize(z, cb)
    assert torch.equal(q1.indices, q2.indices)
    again = quantize(q1.zhat.detach(), cb)
    assert torch.equal(again.zhat, q1.zhat) and torch.equal(again.indices, q1.indices)
    assert again.codebook_term.item() == 0.0


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        Codebook(10, 3, 4)
    with pytest.raises(DimensionMismatch):
        quantize(torch.zeros(2, 6), Codebook(8, 2, 4))
    with pytest.raises(ValueError):
        Codebook(8, 2, 1)


class TestStraightThrough:
    def test_forward_value_and_gradient_copy(self):
        z = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        zhat = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
        out = straight_through(z, zhat)
        assert torch.equal(out, zhat)
        g = torch.randn(4, 6, dtype=torch.float64)
        out.backward(g)
        assert torch.equal(z.grad, g)
        assert zhat.grad is None

    def test_sum_gives_ones(self):
        z = torch.randn(3, 4, requires_grad=True)
        straight_through(z, torch.zeros(3, 4)).sum().backward()
        assert torch.equal(z.grad, torch.ones(3, 4))

    def test_no_codebook_gradient(self):
        cb = Codebook(4, 2, 3)
        z = torch.randn(5, 4, requires_grad=True)
        q = quantize(z, cb)
        straight_through(z, q.zhat).pow(2).sum().backward()
        assert cb.entries.grad is None or torch.count_nonzero(cb.entries.grad) == 0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            straight_through(torch.zeros(2, 3), torch.zeros(3, 2))


class TestVQLoss:
    def test_arithmetic(self):
        cb = Codebook(4, 2, 3, gamma=0.25)
        q = QuantizedSequence(None, None, torch.tensor(0.8), torch.tensor(0.4))
        assert vq_loss_total(q, cb).item() == pytest.approx(0.9)
        zero = QuantizedSequence(None, None, torch.tensor(0.0), torch.tensor(0.0))
        assert vq_loss_total(zero, cb).item() == 0.0

    def test_gradient_routing_finite_difference(self):
        rng = np.random.default_rng(5)
        cb = _codebook(rng.normal(size=(2, 4, 3)))
        z0 = rng.normal(size=(6, 6))
        z = torch.tensor(z0, requires_grad=True)
        q = quantize(z, cb)
        vq_loss_total(q, cb).backward()
        idx = q.indices.detach()
        zhat0 = q.zhat.detach().numpy()

        # codebook gradient of the total equals that of the codebook term alone
        cb_only = _codebook(cb.entries.detach().numpy())
        quantize(torch.tensor(z0), cb_only).codebook_term.backward()
        assert torch.allclose(cb.entries.grad, cb_only.entries.grad, rtol=0, atol=1e-15)

        # finite differences of codebook term w.r.t. entries (assignment fixed)
        E = cb.entries.detach().numpy().copy()

        def cb_term(E):
            sel = np.concatenate([E[g, idx[:, g]] for g in range(2)], axis=1)
            return np.mean(np.sum((z0 - sel) ** 2, axis=1))

        eps = 1e-6
        for g, v, k in [(0, int(idx[0, 0]), 1), (1, int(idx[2, 1]), 0), (1, int(idx[5, 1]), 2)]:
            Ep, Em = E.copy(), E.copy()
            Ep[g, v, k] += eps
            Em[g, v, k] -= eps
            fd = (cb_term(Ep) - cb_term(Em)) / (2 * eps)
            assert cb.entries.grad[g, v, k].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)

        # encoder-side gradient is gamma * d(commitment)/dz with zhat frozen
        def commit(zv):
            return 0.25 * np.mean(np.sum((zv - zhat0) ** 2, axis=1))

        for n, k in [(0, 0), (3, 4), (5, 5)]:
            zp, zm = z0.copy(), z0.copy()
            zp[n, k] += eps
            zm[n, k] -= eps
            fd = (commit(zp) - commit(zm)) / (2 * eps)
            assert z.grad[n, k].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_terms_nonnegative(self):
        torch.manual_seed(0)
        for _ in range(20):
            cb = Codebook(8, 2, 5)
            q = quantize(torch.randn(7, 8), cb)
            assert q.codebook_term.item() >= 0 and q.commitment_term.item() >= 0


class TestUsageStats:
    def test_single_codeword(self):
        s = usage_stats(np.zeros((10, 2), dtype=int))
        assert s["distinct_codewords"] == 1 and s["entropy"] == 0.0

    def test_uniform_four(self):
        idx = np.array([[0, 0], [0, 1], [1, 0], [1, 1]] * 5)
        s = usage_stats(idx)
        assert s["distinct_codewords"] == 4
        assert s["entropy"] == pytest.approx(2.0)

    def test_bound(self):
        rng = np.random.default_rng(0)
        s = usage_stats(rng.integers(0, 100, size=(50_000, 2)))
        assert s["distinct_codewords"] <= 100**2

    def test_list_of_sequences_and_csv(self, tmp_path):
        s = usage_stats([np.array([[1, 2], [1, 2]]), np.array([[3, 4]])])
        assert s["histogram"] == {(1, 2): 2, (3, 4): 1}
        write_usage_csv(s, tmp_path / "usage.csv")
        assert (tmp_path / "usage.csv").read_text().splitlines() == ["codeword,count", "1-2,2", "3-4,1"]


def test_init_from_latents_picks_observed_points():
    z = torch.from_numpy(np.random.default_rng(1).normal(size=(500, 8)))
    cb = Codebook(8, 2, 10).double()
    cb.init_from_latents(z, seed=0)
    zg = z.view(-1, 2, 4)
    for g in range(2):
        # every entry is one of the latents, and no two coincide
        d = torch.cdist(cb.entries[g].detach(), zg[:, g])
        assert d.min(dim=1).values.max() < 1e-6
        assert len(set(d.argmin(dim=1).tolist())) == 10
    # the seeded codebook spreads the latents over many composite codewords
    idx = quantize(z, cb).indices
    assert len({tuple(r) for r in idx.tolist()}) > 40
    again = Codebook(8, 2, 10).double()
    again.init_from_latents(z, seed=0)
    assert torch.equal(again.entries, cb.entries)
