"""Synthetic sequences, windowing, scaling, and the RTEN container."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast import data
from flowcast.errors import ConfigError, FormatError


class TestAdvection:
    def test_pure_translation_is_exact_roll(self):
        params = data.AdvectionParams(n_cells=2, velocity=(1.0, 0.0), diffusion=0.0,
                                      growth_decay=0.0, noise=0.0)
        seq = data.synth_advection(3, 1, 25, 32, 32, params)[0]
        for t in range(24):
            np.testing.assert_array_equal(seq.frames[t + 1, 0], np.roll(seq.frames[t, 0], 1, axis=1))

    def test_zero_cells_all_zero(self):
        params = data.AdvectionParams(n_cells=0)
        seq = data.synth_advection(0, 1, 25, 32, 32, params)[0]
        assert np.all(seq.frames == 0)

    def test_determinism_bitwise_100_seeds(self):
        for seed in range(100):
            a = data.synth_advection(seed, 1, 25, 32, 32)
            b = data.synth_advection(seed, 1, 25, 32, 32)
            np.testing.assert_array_equal(a[0].frames, b[0].frames)

    def test_range_and_shape(self):
        seqs = data.synth_advection(5, 3, 26, 32, 32)
        for seq in seqs:
            assert seq.frames.shape == (26, 1, 32, 32)
            assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
            assert np.isfinite(seq.frames).all()

    def test_preconditions(self):
        with pytest.raises(ConfigError):
            data.synth_advection(0, 1, 24, 32, 32)
        with pytest.raises(ConfigError):
            data.synth_advection(0, 1, 25, 48, 32)

    def test_fractional_velocity_stays_valid(self):
        params = data.AdvectionParams(velocity=(0.7, -0.3), noise=0.0, diffusion=0.0)
        seq = data.synth_advection(1, 1, 25, 32, 32, params)[0]
        # bilinear wrap preserves mass up to clipping
        assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
        assert not np.array_equal(seq.frames[1], seq.frames[0])


class TestWindowing:
    def _seq(self, t):
        frames = np.arange(t, dtype=np.float32)[:, None, None, None] * np.ones((1, 1, 4, 4), np.float32)
        return data.RadarSequence(frames=frames / max(t, 1), seed=0, params=data.AdvectionParams())

    def test_exactly_one_sample(self):
        assert len(data.window_samples(self._seq(25))) == 1

    def test_offsets_enumeration(self):
        # 49-frame sequences: offsets 0,5,10,15,20 -> 5 samples
        samples = data.window_samples(self._seq(49))
        offsets = [s for s in range(0, 49 - 25 + 1, 5)]
        assert len(samples) == len(offsets) == 5
        for off, sample in zip(offsets, samples):
            np.testing.assert_array_equal(sample.input[0], self._seq(49).frames[off])

    def test_too_short_gives_empty(self):
        assert data.window_samples(self._seq(24)) == []

    def test_split_and_order(self):
        sample = data.window_samples(self._seq(25))[0]
        assert sample.input.shape[0] == 5 and sample.target.shape[0] == 20
        # input frames strictly precede target frames
        assert sample.input[-1, 0, 0, 0] < sample.target[0, 0, 0, 0]

    def test_no_aliasing(self):
        seq = self._seq(25)
        frames_before = seq.frames.copy()
        sample = data.window_samples(seq)[0]
        sample.input[:] = -1
        sample.target[:] = -1
        np.testing.assert_array_equal(seq.frames, frames_before)

    @given(t=st.integers(0, 80), stride=st.integers(1, 10))
    @settings(max_examples=40, deadline=None)
    def test_offset_count_property(self, t, stride):
        frames = np.zeros((t, 1, 2, 2), dtype=np.float32)
        seq = data.RadarSequence(frames=frames, seed=0, params=data.AdvectionParams())
        got = len(data.window_samples(seq, window=25, stride=stride))
        want = 0 if t < 25 else (t - 25) // stride + 1
        assert got == want


class TestScaling:
    def test_endpoints(self):
        assert data.normalize(np.array(0.0)) == 0.0
        assert data.normalize(np.array(255.0)) == 1.0

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(0)
        for dtype in (np.float32, np.float64):
            raw = rng.integers(0, 256, (16, 16)).astype(dtype)
            np.testing.assert_array_equal(data.denormalize(data.normalize(raw)), raw)

    def test_clamp_warns_with_count(self):
        raw = np.array([-1.0, 100.0, 300.0])
        with pytest.warns(UserWarning, match="2"):
            out = data.normalize(raw)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestRTEN:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_roundtrip_bitexact(self, tmp_path, dtype):
        rng = np.random.default_rng(1)
        arr = rng.standard_normal((3, 1, 5, 7)).astype(dtype)
        path = tmp_path / "t.rten"
        data.save_tensor(path, arr)
        back = data.load_tensor(path)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)

    def test_scalar_roundtrip(self, tmp_path):
        path = tmp_path / "s.rten"
        data.save_tensor(path, np.array(3.25, dtype=np.float64))
        back = data.load_tensor(path)
        assert back.shape == () and back == 3.25

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rten"
        data.save_tensor(path, np.zeros(3, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="offset 0"):
            data.load_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "trunc.rten"
        data.save_tensor(path, np.zeros((4, 4), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="truncated payload"):
            data.load_tensor(path)

    @given(shape=st.lists(st.integers(1, 5), min_size=0, max_size=4),
           use_f64=st.booleans())
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, shape, use_f64):
        import tempfile

        rng = np.random.default_rng(123)
        arr = rng.standard_normal(shape).astype(np.float64 if use_f64 else np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            path = f"{tmp}/p.rten"
            data.save_tensor(path, arr)
            np.testing.assert_array_equal(data.load_tensor(path), arr)


class TestDatasetDir:
    def test_save_load_roundtrip(self, tmp_path):
        seqs = data.synth_advection(2, 2, 25, 32, 32)
        splits = {"train": data.window_samples(seqs[0]), "test": data.window_samples(seqs[1])}
        meta = data.DatasetMeta(h=32, w=32, seed=2)
        data.save_dataset(tmp_path / "ds", splits, meta)
        back, manifest = data.load_dataset(tmp_path / "ds")
        assert manifest["h"] == 32
        for split in splits:
            assert len(back[split]) == len(splits[split])
            np.testing.assert_array_equal(back[split][0].input, splits[split][0].input)
            np.testing.assert_array_equal(back[split][0].target, splits[split][0].target)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            data.load_dataset(tmp_path)
