import numpy as np
import pytest

from tcr.serialization import (
    read_container,
    read_lattice_binary,
    read_lattice_text,
    write_container,
    write_lattice_binary,
    write_lattice_text,
)
from tcr.synthdata import Dataset, TaskSpec, generate_example, generate_split, prototypes
from tcr.views import AugmentSpec, FeatureSeq, make_view_pair, spec_augment


def feats(seed=0, T=20, F=8):
    return FeatureSeq(np.random.default_rng(seed).normal(size=(T, F)))


class TestSpecAugment:
    def test_disabled_is_identity(self):
        x = feats()
        out = spec_augment(x, AugmentSpec(n_time_masks=0, n_freq_masks=0))
        assert np.array_equal(out.frames, x.frames)
        assert out.frames is not x.frames

    def test_deterministic(self):
        x, spec = feats(), AugmentSpec(seed=9)
        assert np.array_equal(spec_augment(x, spec).frames, spec_augment(x, spec).frames)

    def test_exact_frequency_band(self):
        x = feats()
        out = spec_augment(x, AugmentSpec(n_time_masks=0, n_freq_masks=1, freq_mask_width=2, seed=4))
        fill = x.frames.mean()
        masked = [f for f in range(8) if np.all(out.frames[:, f] == fill)]
        assert len(masked) == 2 and masked[1] - masked[0] == 1
        keep = [f for f in range(8) if f not in masked]
        assert np.array_equal(out.frames[:, keep], x.frames[:, keep])

    def test_oversized_masks_are_clipped(self):
        x = feats(T=5, F=4)
        out = spec_augment(x, AugmentSpec(n_time_masks=50, time_mask_frac=3.0, n_freq_masks=1, freq_mask_width=40))
        assert out.shape == x.shape

    @pytest.mark.parametrize("seed", range(30))
    def test_never_masks_every_frame(self, seed):
        x = feats(seed, T=6, F=4)
        spec = AugmentSpec(n_time_masks=20, time_mask_frac=1.0, n_freq_masks=0, seed=seed, fill="zero")
        out = spec_augment(x, spec)
        assert not np.all(out.frames == 0.0, axis=1).all()

    def test_unmasked_cells_bit_identical(self):
        x = feats(3)
        out = spec_augment(x, AugmentSpec(seed=1, fill="zero"))
        changed = out.frames != x.frames
        assert np.all(out.frames[changed] == 0.0)

    def test_scaled_width(self):
        assert AugmentSpec.scaled_to(80).freq_mask_width == 14
        assert AugmentSpec.scaled_to(12).freq_mask_width == 2


class TestViewPair:
    def test_reproducible(self):
        x, spec = feats(), AugmentSpec()
        a = make_view_pair(x, spec, np.random.default_rng(5))
        b = make_view_pair(x, spec, np.random.default_rng(5))
        assert np.array_equal(a.view_a.frames, b.view_a.frames)
        assert np.array_equal(a.view_b.frames, b.view_b.frames)
        assert (a.dropout_seed_a, a.dropout_seed_b) == (b.dropout_seed_a, b.dropout_seed_b)
        assert a.dropout_seed_a != a.dropout_seed_b

    def test_disabled_spec_gives_identical_views(self):
        x = feats()
        pair = make_view_pair(x, AugmentSpec(n_time_masks=0, n_freq_masks=0), np.random.default_rng(0))
        assert np.array_equal(pair.view_a.frames, pair.view_b.frames)

    def test_views_usually_differ(self):
        x, spec = feats(), AugmentSpec(n_time_masks=2, time_mask_frac=0.2, n_freq_masks=1, freq_mask_width=2)
        differ = 0
        for seed in range(100):
            pair = make_view_pair(x, spec, np.random.default_rng(seed))
            differ += not np.array_equal(pair.view_a.frames, pair.view_b.frames)
        assert differ >= 99


class TestSynthData:
    def test_noiseless_single_frame_runs(self):
        spec = TaskSpec(noise_std=0.0, frames_per_token=(1, 1))
        x, y = generate_example(spec, np.random.default_rng(0))
        assert np.array_equal(x.frames, prototypes(spec)[y])
        assert np.all(y[1:] != y[:-1])

    def test_reproducible(self):
        spec = TaskSpec()
        x1, y1 = generate_example(spec, np.random.default_rng(3))
        x2, y2 = generate_example(spec, np.random.default_rng(3))
        assert np.array_equal(x1.frames, x2.frames) and np.array_equal(y1, y2)

    def test_frames_per_token_ratio(self):
        spec = TaskSpec(frames_per_token=(2, 4))
        rng = np.random.default_rng(0)
        ratios = []
        for _ in range(10_000):
            x, y = generate_example(spec, rng)
            ratios.append(x.shape[0] / len(y))
            assert 2 * len(y) <= x.shape[0] <= 4 * len(y)
        assert abs(np.mean(ratios) - 3.0) <= 0.05 * 3.0

    def test_split_determinism_and_disjoint_noise(self):
        spec = TaskSpec()
        a, b = generate_split(spec, 5, 5, seed=1), generate_split(spec, 5, 5, seed=1)
        for (xa, ya), (xb, yb) in zip(a.train + a.eval, b.train + b.eval):
            assert np.array_equal(xa.frames, xb.frames) and np.array_equal(ya, yb)
        train_frames = np.concatenate([x.frames for x, _ in a.train]).ravel()
        eval_frames = np.concatenate([x.frames for x, _ in a.eval]).ravel()
        assert not np.intersect1d(train_frames, eval_frames).size

    def test_roundtrip(self, tmp_path):
        ds = generate_split(TaskSpec(), 4, 3, seed=2)
        ds.save(tmp_path / "d.bin")
        back = Dataset.load(tmp_path / "d.bin")
        assert back.spec == ds.spec
        for (xa, ya), (xb, yb) in zip(ds.train + ds.eval, back.train + back.eval):
            assert xa.frames.tobytes() == xb.frames.tobytes()
            assert np.array_equal(ya, yb)
        ds.save(tmp_path / "e.bin")
        assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            TaskSpec(V=1)
        with pytest.raises(ValueError):
            TaskSpec(frames_per_token=(0, 2))


class TestSerialization:
    def test_container_roundtrip(self, tmp_path):
        arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
        write_container(tmp_path / "c", {"x": 1}, arrays)
        meta, back = read_container(tmp_path / "c")
        assert meta == {"x": 1}
        assert all(np.array_equal(arrays[k], back[k]) for k in arrays)

    def test_lattice_text_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        logp = np.log(rng.dirichlet(np.ones(4), size=(3, 3)))
        logp[0, 1, 2] = -np.inf
        write_lattice_text(tmp_path / "l.txt", logp, [1, 3])
        back, target = read_lattice_text(tmp_path / "l.txt")
        assert back.tobytes() == logp.tobytes()
        assert target.tolist() == [1, 3]
        write_lattice_binary(tmp_path / "l.bin", logp)
        back, target = read_lattice_binary(tmp_path / "l.bin")
        assert back.tobytes() == logp.tobytes() and target is None

    def test_lattice_text_golden(self, tmp_path):
        p = tmp_path / "g.txt"
        p.write_text("# tcr-lattice v1\n1 0 1\n0 0 -0.5 -0.9327521295671886\n")
        logp, target = read_lattice_text(p)
        assert logp.shape == (1, 1, 2) and target is None
        assert logp[0, 0, 0] == -0.5
