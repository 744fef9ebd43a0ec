import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comet import synthgen
from comet.synthgen import DataConfig, ModalityRenderer, StageDataset, generate_script, render


def renderer(modality="A", n=8, **kw):
    return ModalityRenderer.create(modality, n, DataConfig(**kw))


class TestScript:
    def test_deterministic(self):
        assert np.array_equal(generate_script(8, 64, 3), generate_script(8, 64, 3))

    def test_full_persistence_is_constant(self):
        s = generate_script(8, 100, 1, p_stay=1.0)
        assert (s == s[0]).all()

    def test_switch_rate_without_persistence(self):
        T = 20_000
        s = generate_script(2, T, 9, p_stay=0.0)
        rate = np.mean(s[1:] != s[:-1])
        # every step is a fresh uniform draw over 2 categories: switch prob 1/2
        se = math.sqrt(0.25 / (T - 1))
        assert abs(rate - 0.5) < 3 * se

    @pytest.mark.parametrize("C,T", [(1, 10), (5, 1)])
    def test_rejects_degenerate_sizes(self, C, T):
        with pytest.raises(ValueError):
            generate_script(C, T, 0)

    @given(st.integers(2, 20), st.integers(2, 40), st.integers(0, 2**31), st.floats(0, 1))
    def test_ids_in_range(self, C, T, seed, p):
        s = generate_script(C, T, seed, p)
        assert s.shape == (T,) and s.min() >= 0 and s.max() < C


class TestRender:
    def test_noiseless_is_embedding(self):
        r = renderer(noise=0.0, nuisance_scale=0.0)
        s = generate_script(8, 16, 0)
        assert np.array_equal(render(s, r, 4), r.embeddings[s])

    def test_locality(self):
        r = renderer()
        s = generate_script(8, 16, 0, p_stay=0.0)
        s2 = s.copy()
        s2[5] = (s[5] + 1) % 8
        diff = np.any(render(s, r, 7) != render(s2, r, 7), axis=1)
        assert diff.tolist() == [t == 5 for t in range(16)]

    def test_noise_scale(self):
        D, sigma = 32, 0.1
        r = renderer(noise=sigma, nuisance_scale=0.0, d_raw=D)
        s = generate_script(8, 4000, 2)
        dev = np.linalg.norm(render(s, r, 3) - r.embeddings[s], axis=1).mean()
        chi_mean = sigma * math.sqrt(2) * math.exp(math.lgamma((D + 1) / 2) - math.lgamma(D / 2))
        assert abs(dev - sigma * math.sqrt(D)) < 0.1 * sigma * math.sqrt(D)
        assert abs(dev - chi_mean) < 0.01 * chi_mean

    def test_unknown_category(self):
        with pytest.raises(IndexError):
            render(np.array([0, 8]), renderer(n=8), 0)

    def test_close_rows_rejected(self):
        r = renderer()
        r.embeddings[1] = r.embeddings[0] + 1e-3
        with pytest.raises(ValueError):
            r.validate()

    def test_growing_vocabulary_keeps_rows(self):
        assert np.array_equal(renderer(n=8).embeddings, renderer(n=24).embeddings[:8])


def stages(n_pairs=40, **kw):
    cfg = DataConfig(pairs_per_stage=n_pairs, **kw)
    specs = synthgen.plan_stage_specs([("A", "B"), ("A", "C")], cfg)
    rends = synthgen.build_renderers(["A", "B", "C"], 16, cfg)
    return specs, rends


class TestStageDataset:
    def test_mediator_renderer_shared(self):
        specs, rends = stages()
        d1 = synthgen.generate_stage_dataset(specs[0], rends, 1)
        d2 = synthgen.generate_stage_dataset(specs[1], rends, 1)
        assert d1.fingerprints["A"] == d2.fingerprints["A"]
        synthgen.check_mediator_consistency([d1, d2])

    def test_inconsistent_mediator_rejected(self):
        specs, rends = stages()
        d1 = synthgen.generate_stage_dataset(specs[0], rends, 1)
        other = dict(rends, A=ModalityRenderer.create("A", 16, DataConfig(world_seed=9)))
        with pytest.raises(ValueError):
            synthgen.generate_stage_dataset(specs[1], other, 1, mediator_fingerprint=d1.fingerprints["A"])
        d2 = synthgen.generate_stage_dataset(specs[1], other, 1)
        with pytest.raises(ValueError):
            synthgen.check_mediator_consistency([d1, d2])

    def test_category_ranges(self):
        specs, rends = stages(n_pairs=200)
        d2 = synthgen.generate_stage_dataset(specs[1], rends, 0)
        old = d2.scripts[d2.scripts < 8]
        assert set(np.unique(old)) <= set(specs[1].shared) == {0, 1}
        assert d2.scripts.max() < 16
        d1 = synthgen.generate_stage_dataset(specs[0], rends, 0)
        assert d1.scripts.max() < 8

    def test_no_overlap(self):
        specs, rends = stages(n_pairs=100, overlap=0.0)
        d2 = synthgen.generate_stage_dataset(specs[1], rends, 0)
        assert d2.scripts.min() >= 8

    def test_bytes_identical_on_regeneration(self):
        specs, rends = stages(n_pairs=100)
        a = synthgen.generate_stage_dataset(specs[0], rends, 5).to_bytes()
        b = synthgen.generate_stage_dataset(specs[0], rends, 5).to_bytes()
        assert a == b

    def test_round_trip(self, tmp_path):
        specs, rends = stages()
        d = synthgen.generate_stage_dataset(specs[1], rends, 2)
        back = synthgen.load_dataset(d.save(tmp_path / "s.cmtd"))
        assert np.array_equal(back.xa, d.xa) and np.array_equal(back.xb, d.xb)
        assert np.array_equal(back.scripts, d.scripts)
        assert back.header() == d.header()

    def test_truncated_file(self):
        specs, rends = stages()
        blob = synthgen.generate_stage_dataset(specs[0], rends, 2).to_bytes()
        with pytest.raises(ValueError):
            StageDataset.from_bytes(blob[:-8])
        with pytest.raises(ValueError):
            StageDataset.from_bytes(b"XXXXXXXX" + blob[8:])

    def test_noiseless_pairs_decode_to_shared_script(self):
        specs, rends = stages(noise=0.0, nuisance_scale=0.0)
        d = synthgen.generate_stage_dataset(specs[1], rends, 3)
        for x, m in ((d.xa, "A"), (d.xb, "C")):
            E = rends[m].embeddings
            decoded = ((x[..., None, :] - E) ** 2).sum(-1).argmin(-1)
            assert np.array_equal(decoded, d.scripts)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31))
    def test_pure_function_of_spec_and_seed(self, seed):
        specs, rends = stages(n_pairs=4)
        spec = replace(specs[1], n_pairs=4)
        a = synthgen.generate_stage_dataset(spec, rends, seed)
        b = synthgen.generate_stage_dataset(spec, rends, seed)
        assert a.to_bytes() == b.to_bytes()
