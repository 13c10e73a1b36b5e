import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beats_forge.exceptions import FormatError, ShapeError, StatsError
from beats_forge.features import (AUDIOSET_STATS, FbankExtractor, FbankMatrix, NormStats,
                                  Waveform, compute_dataset_stats, compute_fbank, load_wav,
                                  mel_center_frequencies, n_frames_for, normalize_fbank,
                                  patchify, povey_window, resample_linear, unpatchify,
                                  write_wav)


def _wav_bytes(pcm, rate=16000, channels=1, codec=1, bits=16, extra_chunk=False):
    data = np.asarray(pcm, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", codec, channels, rate, rate * 2 * channels, 2 * channels, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    if extra_chunk:
        body += b"LIST" + struct.pack("<I", 3) + b"abc\x00"
    body += b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def _tone(freq, seconds=1.0, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return Waveform(0.5 * np.sin(2 * np.pi * freq * t))


class TestWav:
    def test_zeros(self, tmp_path):
        p = tmp_path / "z.wav"
        p.write_bytes(_wav_bytes(np.zeros(16000)))
        w = load_wav(p)
        assert w.sample_rate == 16000 and len(w) == 16000 and not w.samples.any()

    def test_scale_of_most_negative_sample(self, tmp_path):
        p = tmp_path / "m.wav"
        p.write_bytes(_wav_bytes([-32768, 16384, 0]))
        assert load_wav(p).samples.tolist() == [-1.0, 0.5, 0.0]

    @pytest.mark.parametrize("n", [2, 101, 8000])
    def test_8k_resample_length(self, tmp_path, n):
        p = tmp_path / "r.wav"
        p.write_bytes(_wav_bytes(np.arange(n) % 7, rate=8000))
        assert abs(len(load_wav(p)) - (2 * n - 1)) <= 1

    def test_resample_interpolates_midpoints(self):
        out = resample_linear(np.array([0.0, 1.0, 0.0]), 8000)
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 0.5, 0.0])

    def test_first_channel_and_extra_chunk(self, tmp_path):
        p = tmp_path / "s.wav"
        p.write_bytes(_wav_bytes([100, -5, 200, -6], channels=2, extra_chunk=True))
        np.testing.assert_array_equal(load_wav(p).samples * 32768, [100, 200])

    def test_unsupported_codec(self, tmp_path):
        p = tmp_path / "f.wav"
        p.write_bytes(_wav_bytes([0, 0], codec=3))
        with pytest.raises(FormatError, match="offset"):
            load_wav(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "b.wav"
        p.write_bytes(b"RIFX" + b"\0" * 40)
        with pytest.raises(FormatError, match="offset 0"):
            load_wav(p)

    def test_round_trip(self, tmp_path):
        w = Waveform(np.array([0.25, -0.5, 0.0, -1.0]))
        write_wav(tmp_path / "o.wav", w)
        np.testing.assert_array_equal(load_wav(tmp_path / "o.wav").samples, w.samples)


class TestFbank:
    def test_one_second_gives_98_frames(self):
        assert compute_fbank(Waveform(np.zeros(16000))).frames.shape == (98, 128)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(400, 6000))
    def test_frame_count_formula(self, n):
        assert n_frames_for(n) == (n - 400) // 160 + 1
        assert compute_fbank(Waveform(np.ones(n) * 0.1)).n_frames == (n - 400) // 160 + 1

    def test_zero_waveform_hits_floor(self):
        f = compute_fbank(Waveform(np.zeros(800))).frames
        assert np.all(f == math.log(1e-10))

    def test_too_short(self):
        with pytest.raises(ShapeError, match="400"):
            compute_fbank(Waveform(np.zeros(399)))

    def test_povey_symmetry(self):
        w = povey_window()
        assert np.max(np.abs(w - w[::-1])) < 1e-12
        assert w[0] == 0.0 and w.shape == (400,)

    def test_povey_against_formula(self):
        n = 123
        expected = (0.5 - 0.5 * math.cos(2 * math.pi * n / 399)) ** 0.85
        assert povey_window()[n] == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("freq", [1000.0, 440.0, 3000.0, 6000.0])
    def test_tone_lands_on_nearest_center(self, freq):
        # Oracle: filter centers recomputed directly from the mel formula.
        mel = lambda f: 1127.0 * math.log(1.0 + f / 700.0)
        lo, hi = mel(20.0), mel(8000.0)
        centers = [700.0 * (math.exp((lo + (k + 1) * (hi - lo) / 129) / 1127.0) - 1.0)
                   for k in range(128)]
        expected = int(np.argmin([abs(c - freq) for c in centers]))
        f = compute_fbank(_tone(freq)).frames
        assert int(np.argmax(f.mean(axis=0))) == expected
        np.testing.assert_allclose(mel_center_frequencies(), centers, rtol=1e-12)

    def test_rejects_other_rates(self):
        with pytest.raises(ShapeError):
            compute_fbank(Waveform(np.zeros(800), 8000))


class TestNormalization:
    def test_example_cell(self):
        out = normalize_fbank(FbankMatrix(np.full((1, 128), 22.0)), AUDIOSET_STATS).frames
        assert out[0, 0] == pytest.approx((22.0 - 15.41663) / 13.11164, rel=1e-12)
        assert out[0, 0] == pytest.approx(0.5021, abs=1e-4)

    def test_mean_maps_to_zero(self):
        out = normalize_fbank(FbankMatrix(np.full((3, 128), 4.5)), NormStats(4.5, 2.0))
        assert not out.frames.any()

    @pytest.mark.parametrize("std", [0.0, -1.0])
    def test_bad_std(self, std):
        with pytest.raises(StatsError):
            normalize_fbank(FbankMatrix(np.zeros((1, 128))), NormStats(0.0, std))

    def test_two_constant_fbanks(self):
        s = compute_dataset_stats([np.full((4, 128), 1.0), np.full((4, 128), 5.0)])
        assert s.mean == pytest.approx(3.0) and s.std == pytest.approx(2.0)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        fbanks = [rng.normal(3.0, 2.0, size=(rng.integers(10, 60), 128)) for _ in range(7)]
        cells = np.concatenate([f.reshape(-1) for f in fbanks])
        mean = sum(cells) / len(cells)
        std = math.sqrt(sum((c - mean) ** 2 for c in cells) / len(cells))
        s = compute_dataset_stats(fbanks)
        assert abs(s.mean - mean) < 1e-9 and abs(s.std - std) < 1e-9

    def test_zero_variance_warns(self):
        with pytest.warns(RuntimeWarning):
            s = compute_dataset_stats([compute_fbank(Waveform(np.zeros(800)))])
        assert s.mean == pytest.approx(math.log(1e-10)) and s.std == 0.0
        with pytest.raises(StatsError):
            normalize_fbank(FbankMatrix(np.zeros((1, 128))), s)

    def test_empty_corpus(self):
        with pytest.raises(StatsError):
            compute_dataset_stats([])

    def test_normalized_moments(self):
        rng = np.random.default_rng(2)
        waves = [Waveform(rng.normal(0, 0.1, 8000) * rng.uniform(0.1, 1)) for _ in range(5)]
        ex = FbankExtractor().fit(waves)
        cells = np.concatenate([normalize_fbank(compute_fbank(w), ex.stats_).frames.ravel()
                                for w in waves])
        assert abs(cells.mean()) < 1e-9 and abs(cells.std() - 0.5) < 1e-9


class TestPatches:
    def test_exact_grid(self):
        seq = patchify(np.zeros((96, 128)))
        assert seq.patches.shape == (48, 256) and seq.grid == (6, 8)

    def test_padding(self):
        seq = patchify(np.ones((100, 128)), pad_value=-7.0)
        assert seq.patches.shape == (56, 256) and seq.grid == (7, 8)
        last_block = seq.patches[48:].reshape(8, 16, 16)
        assert np.all(last_block[:, :4] == 1.0) and np.all(last_block[:, 4:] == -7.0)

    def test_layout(self):
        f = np.arange(32 * 128, dtype=float).reshape(32, 128)
        seq = patchify(f)
        # Patch 1 is time block 0, frequency block 1; rows flatten time-within-patch major.
        np.testing.assert_array_equal(seq.patches[1].reshape(16, 16), f[:16, 16:32])
        np.testing.assert_array_equal(seq.patches[8].reshape(16, 16), f[16:32, :16])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 80))
    def test_round_trip_and_count(self, n):
        f = np.random.default_rng(n).normal(size=(n, 128))
        seq = patchify(f)
        assert len(seq) == -(-n // 16) * 8
        np.testing.assert_array_equal(unpatchify(seq).frames, f)

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((16, 64)))

    def test_extractor_is_deterministic(self):
        w = _tone(700.0, 0.5)
        ex = FbankExtractor(stats=AUDIOSET_STATS).fit()
        a, b = ex.transform([w])[0], ex.transform([w])[0]
        assert np.array_equal(a.patches, b.patches)
        assert ex.get_params()["stats"] is AUDIOSET_STATS

    def test_extractor_without_data_or_stats(self):
        with pytest.raises(StatsError):
            FbankExtractor().fit()
