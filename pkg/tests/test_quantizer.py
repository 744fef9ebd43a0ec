import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from comet import gradcheck
from comet.numerics import DTYPE, DimensionError
from comet.quantizer import (
    TeacherSnapshot,
    UnifiedCodebook,
    activation_stats,
    commitment_loss,
    expand,
    mm_ema_update,
    nearest,
    quantize,
)


def t(x):
    return torch.tensor(x, dtype=DTYPE)


def book(codes, counts=None, gamma=0.99):
    codes = t(codes)
    counts = t(counts) if counts is not None else torch.ones(codes.shape[0], dtype=DTYPE)
    return UnifiedCodebook(codes.clone(), counts, codes * counts[:, None], gamma)


class TestQuantize:
    def test_nearest_with_distance(self):
        q = quantize(t([[0.9, 0.9]]), book([[0.0, 0.0], [1.0, 1.0]]))
        assert q.indices.tolist() == [1]
        assert abs(q.distances.item() - 0.02) < 1e-15

    def test_exact_match(self):
        cb = book(np.arange(10.0).reshape(5, 2))
        q = quantize(t([[6.0, 7.0]]), cb)
        assert q.indices.item() == 3 and q.distances.item() == 0.0

    def test_tie_goes_to_lowest_index(self):
        q = quantize(t([[0.5, 0.0]]), book([[1.0, 0.0], [0.0, 0.0]]))
        assert q.indices.item() == 0

    def test_empty_codebook(self):
        with pytest.raises(ValueError):
            nearest(t([[0.0]]), torch.zeros(0, 1, dtype=DTYPE))

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            quantize(t([[0.0, 1.0, 2.0]]), book([[0.0, 0.0]]))

    def test_straight_through(self):
        z = t([[0.2, 0.1], [0.8, 1.3]]).requires_grad_()
        cb = book([[0.0, 0.0], [1.0, 1.0]])
        q = quantize(z, cb)
        assert torch.equal(q.codes.detach(), cb.codes[q.indices])
        w = t([[1.0, -2.0], [3.0, 0.5]])
        (q.codes * w).sum().backward()
        assert torch.equal(z.grad, w)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation_invariant(self, seed, a, b):
        g = torch.Generator().manual_seed(seed)
        codes = torch.randn(9, 2, dtype=DTYPE, generator=g)
        z = torch.randn(6, 2, dtype=DTYPE, generator=g)
        shift = t([a, b])
        i0, _ = nearest(z, codes)
        i1, _ = nearest(z + shift, codes + shift)
        d = ((z[:, None] - codes) ** 2).sum(-1)
        gap = d.sort(-1).values
        clear = (gap[:, 1] - gap[:, 0]) > 1e-9 * (1 + abs(a) + abs(b)) ** 2
        assert torch.equal(i0[clear], i1[clear])


class TestCommitment:
    def test_zero_when_equal(self):
        z = torch.randn(3, 4, dtype=DTYPE)
        assert commitment_loss(z, z.clone(), 0.25).item() == 0.0

    def test_value(self):
        z, e = t([[0.9, 0.9]]), t([[1.0, 1.0]])
        assert abs(commitment_loss(z, e, 0.25).item() - 0.005) < 1e-15

    def test_zero_beta(self):
        assert commitment_loss(torch.randn(2, 3, dtype=DTYPE), torch.randn(2, 3, dtype=DTYPE), 0.0).item() == 0.0

    def test_gradient_reaches_z_only(self):
        z = torch.randn(2, 3, dtype=DTYPE, requires_grad=True)
        e = torch.randn(2, 3, dtype=DTYPE, requires_grad=True)
        commitment_loss(z, e, 0.5).backward()
        assert e.grad is None
        assert torch.allclose(z.grad, 0.5 * 2 * (z - e).detach() / 2, atol=1e-15)


def ema_oracle(codes, counts, vols, gamma, za, ia, zb, ib, rb, ra, eps=1e-3):
    """Per-assignment loop over the EMA rule, independent of the vectorized route."""
    counts, vols, codes = counts.copy(), vols.copy(), codes.copy()
    K = len(counts)
    n = np.zeros(K)
    s = np.zeros_like(vols)
    for z, i, r in zip(za, ia, rb):
        n[i] += 1
        s[i] += (z + r) / 2
    for z, i, r in zip(zb, ib, ra):
        n[i] += 1
        s[i] += (z + r) / 2
    for i in range(K):
        counts[i] = gamma * counts[i] + (1 - gamma) * n[i]
        vols[i] = gamma * vols[i] + (1 - gamma) * s[i]
        if n[i] > 0 and counts[i] > eps:
            codes[i] = vols[i] / counts[i]
    return codes, counts, vols


class TestEma:
    def test_scalar_example(self):
        cb = UnifiedCodebook(t([[2.0]]), t([2.0]), t([[4.0]]), gamma=0.5)
        two, zero = t([[2.0]]), torch.tensor([0])
        mm_ema_update(cb, two, zero, two, zero, two, two)
        assert (cb.counts.item(), cb.volumes.item(), cb.codes.item()) == (2.0, 4.0, 2.0)

    def test_unassigned_code_keeps_ratio(self):
        cb = book([[1.0, 2.0], [3.0, -1.0]], counts=[2.0, 5.0], gamma=0.9)
        before = cb.codes[1].clone()
        z = t([[0.0, 0.0]])
        mm_ema_update(cb, z, torch.tensor([0]), z, torch.tensor([0]), z, z)
        assert cb.counts[1].item() == pytest.approx(4.5)
        assert torch.equal(cb.codes[1], before)
        assert torch.allclose(cb.volumes[1] / cb.counts[1], before, atol=1e-15)

    def test_full_decay_is_identity(self):
        cb = book(np.random.default_rng(0).normal(size=(4, 3)), gamma=1.0)
        snap = (cb.codes.clone(), cb.counts.clone(), cb.volumes.clone())
        z = torch.randn(5, 3, dtype=DTYPE)
        idx = torch.tensor([0, 1, 1, 3, 2])
        mm_ema_update(cb, z, idx, z, idx, z, z)
        assert torch.equal(cb.codes, snap[0]) and torch.equal(cb.counts, snap[1]) and torch.equal(cb.volumes, snap[2])

    def test_misaligned_intermediaries(self):
        cb = book([[0.0, 0.0]])
        z = torch.zeros(3, 2, dtype=DTYPE)
        idx = torch.zeros(3, dtype=torch.long)
        with pytest.raises(DimensionError):
            mm_ema_update(cb, z, idx, z, idx, z[:2], z)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6), st.floats(0.0, 0.999))
    def test_matches_loop_oracle(self, seed, na, nb, gamma):
        rng = np.random.default_rng(seed)
        K, D = 5, 3
        codes = rng.normal(size=(K, D))
        counts = rng.uniform(0.0, 3.0, K)
        vols = codes * counts[:, None]
        za, zb = rng.normal(size=(na, D)), rng.normal(size=(nb, D))
        rb, ra = rng.normal(size=(na, D)), rng.normal(size=(nb, D))
        ia, ib = rng.integers(0, K, na), rng.integers(0, K, nb)
        cb = UnifiedCodebook(t(codes), t(counts), t(vols), gamma)
        mm_ema_update(cb, t(za), torch.from_numpy(ia), t(zb), torch.from_numpy(ib), t(rb), t(ra))
        ec, en, eo = ema_oracle(codes, counts, vols, gamma, za, ia, zb, ib, rb, ra)
        np.testing.assert_allclose(cb.counts.numpy(), en, rtol=0, atol=1e-12)
        np.testing.assert_allclose(cb.volumes.numpy(), eo, rtol=0, atol=1e-12)
        np.testing.assert_allclose(cb.codes.numpy(), ec, rtol=1e-10, atol=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_consistency_after_many_updates(self, seed):
        rng = np.random.default_rng(seed)
        cb = UnifiedCodebook.initialize(6, 2, seed=seed % 1000, gamma=0.95)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            z = t(rng.normal(size=(n, 2)))
            idx = torch.from_numpy(rng.integers(0, 6, n))
            mm_ema_update(cb, z, idx, z, idx, z, z)
        live = cb.counts > cb.eps
        assert torch.allclose(cb.codes[live], cb.volumes[live] / cb.counts[live, None], atol=1e-9, rtol=0)


class TestExpand:
    def test_prefix_copied(self):
        prev = UnifiedCodebook.initialize(4, 3, seed=1)
        prev.counts = t([0.5, 2.0, 0.0, 1.0])
        prev.volumes = prev.codes * prev.counts[:, None]
        cb, teacher = expand(prev, 2, init_seed=3)
        assert cb.size == 6 and cb.frozen_prefix == 4
        assert torch.equal(cb.codes[:4], prev.codes)
        assert torch.equal(cb.counts[:4], prev.counts) and torch.equal(cb.volumes[:4], prev.volumes)
        assert np.array_equal(teacher.array, prev.codes.numpy())
        assert torch.equal(cb.counts[4:], torch.full((2,), cb.eps, dtype=DTYPE))
        assert torch.allclose(cb.volumes[4:], cb.eps * cb.codes[4:], atol=1e-18)

    def test_zero_new_codes(self):
        prev = UnifiedCodebook.initialize(4, 3, seed=1)
        cb, teacher = expand(prev, 0, init_seed=3)
        assert torch.equal(cb.codes, prev.codes) and teacher.size == 4

    def test_deterministic(self):
        prev = UnifiedCodebook.initialize(4, 3, seed=1)
        a, _ = expand(prev, 5, init_seed=9)
        b, _ = expand(prev, 5, init_seed=9)
        c, _ = expand(prev, 5, init_seed=10)
        assert torch.equal(a.codes, b.codes) and not torch.equal(a.codes[4:], c.codes[4:])

    def test_new_rows_centered_on_active_codes(self):
        prev = UnifiedCodebook.from_codes(t([[10.0, 10.0], [12.0, 10.0], [-50.0, -50.0]]))
        prev.counts = t([1.0, 1.0, 0.0])  # third code is dead
        cb, _ = expand(prev, 4000, init_seed=0)
        assert torch.allclose(cb.codes[3:].mean(0), t([11.0, 10.0]), atol=0.1)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            expand(UnifiedCodebook.initialize(2, 2), -1, 0)


def test_teacher_snapshot_is_frozen():
    live = t([[1.0, 2.0], [3.0, 4.0]])
    snap = TeacherSnapshot(live)
    live[0, 0] = 99.0
    assert snap.array[0, 0] == 1.0
    with pytest.raises(ValueError):
        snap.array[0, 0] = 5.0
    c = snap.codes
    c[1, 1] = -1.0
    assert snap.array[1, 1] == 4.0


def test_from_codes_keeps_rows():
    codes = torch.randn(5, 3, dtype=DTYPE)
    cb = UnifiedCodebook.from_codes(codes)
    assert torch.allclose(cb.codes, codes, atol=1e-15)
    assert not cb.active().any()


class TestActivation:
    def test_classes(self):
        idx = {
            "A": np.array([0] * 50 + [1] * 50),
            "B": np.array([0] * 100),
            "C": np.array([0] * 99 + [2]),
        }
        stats = activation_stats(4, idx, threshold=0.005)
        assert [s.klass for s in stats] == [3, 1, 1, 0]
        assert stats[0].counts == {"A": 50, "B": 100, "C": 99}

    def test_threshold_is_strict(self):
        stats = activation_stats(2, {"A": np.array([0] * 999 + [1])}, threshold=1e-3)
        # one hit out of 1000 equals the threshold and does not count
        assert stats[1].klass == 0

    def test_single_modality_classes(self):
        rng = np.random.default_rng(0)
        stats = activation_stats(8, {"A": rng.integers(0, 8, 500)})
        assert {s.klass for s in stats} <= {0, 1}


@pytest.mark.parametrize("check", gradcheck.select(["quantizer"]), ids=lambda c: c.key)
def test_gradients_match_finite_differences(check):
    assert gradcheck.run_check(check, instances=3).passed
