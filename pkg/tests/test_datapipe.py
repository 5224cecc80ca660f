import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.io import wavfile

from merbench import datapipe as D
from merbench.datapipe import (AnnotationTable, ConfigError, IngestionError, ValidationError, crop_10s,
                               crop_offset, denormalize, filter_centers, load_audio, log_filterbank, make_split,
                               normalize_spectrogram, normalize_targets, read_annotations, spectrogram, synth_dataset)
from merbench.models import EMOTIONS, MIDLEVEL

SR = D.SAMPLE_RATE


def write_pcm24(path, rate, samples):
    """Minimal 24-bit PCM writer (scipy cannot write this width)."""
    ints = np.round(np.asarray(samples) * (2 ** 23 - 1)).astype("<i4")
    raw = b"".join(int(v).to_bytes(4, "little", signed=True)[:3] for v in ints)
    fmt = struct.pack("<HHIIHH", 1, 1, rate, rate * 3, 3, 24)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


class TestLoadAudio:
    def test_identity_at_native_rate(self, tmp_path):
        sig = np.random.default_rng(0).uniform(-0.9, 0.9, 1000).astype(np.float32)
        wavfile.write(tmp_path / "a.wav", SR, sig)
        np.testing.assert_array_equal(load_audio(tmp_path / "a.wav"), sig.astype(np.float64))

    def test_antiphase_stereo_is_silent(self, tmp_path):
        a = np.random.default_rng(1).integers(-20000, 20000, 500).astype(np.int16)
        wavfile.write(tmp_path / "s.wav", SR, np.stack([a, -a], axis=1))
        assert not load_audio(tmp_path / "s.wav").any()

    def test_resampled_tone_keeps_its_peak(self, tmp_path):
        t = np.arange(44100) / 44100
        wavfile.write(tmp_path / "t.wav", 44100, (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
        sig = load_audio(tmp_path / "t.wav")
        assert len(sig) == SR
        freqs = np.fft.rfftfreq(len(sig), 1 / SR)
        peak = freqs[np.argmax(np.abs(np.fft.rfft(sig)))]
        assert abs(peak - 440) <= freqs[1]

    @pytest.mark.parametrize("kind", ["uint8", "int16", "int32", "pcm24"])
    def test_integer_formats_scaled_to_unit_range(self, tmp_path, kind):
        sig = np.linspace(-0.75, 0.75, 64)
        path = tmp_path / f"{kind}.wav"
        if kind == "pcm24":
            write_pcm24(path, SR, sig)
        elif kind == "uint8":
            wavfile.write(path, SR, np.round(sig * 128 + 128).astype(np.uint8))
        else:
            scale = 2 ** (8 * np.dtype(kind).itemsize - 1)
            wavfile.write(path, SR, np.round(sig * scale).astype(kind))
        got = load_audio(path)
        np.testing.assert_allclose(got, sig, atol=1 / 127)
        assert np.abs(got).max() <= 1.0

    def test_unreadable_file_names_the_path(self, tmp_path):
        bad = tmp_path / "clip.wav"
        bad.write_bytes(b"ID3\x03not a wav")
        with pytest.raises(IngestionError, match="clip.wav"):
            load_audio(bad)


class TestCrop:
    def test_exact_length_is_identity(self):
        wave = np.arange(D.CROP_SAMPLES, dtype=float)
        assert crop_offset(len(wave), 3, "c") == 0
        np.testing.assert_array_equal(crop_10s(wave, 3, "c"), wave)

    def test_deterministic(self):
        wave = np.random.default_rng(0).normal(size=15 * SR)
        np.testing.assert_array_equal(crop_10s(wave, 7, "x"), crop_10s(wave, 7, "x"))
        assert len(crop_10s(wave, 7, "x")) == D.CROP_SAMPLES

    def test_offsets_roughly_uniform(self):
        n = 17 * SR
        offsets = np.array([crop_offset(n, seed, "clip42") for seed in range(100)]) / SR
        assert offsets.min() >= 0 and offsets.max() <= 7
        counts, _ = np.histogram(offsets, bins=5, range=(0, 7))
        assert stats.chisquare(counts).pvalue > 0.001

    def test_short_input_zero_padded(self):
        out = crop_10s(np.ones(100), 0, "c")
        assert len(out) == D.CROP_SAMPLES and out[:100].all() and not out[100:].any()

    def test_empty_waveform(self):
        with pytest.raises(IngestionError):
            crop_10s(np.zeros(0), 0, "c")


class TestSpectrogram:
    def test_ten_seconds_give_313_frames(self):
        spec = spectrogram(np.zeros(D.CROP_SAMPLES))
        assert spec.shape == (1, len(filter_centers()), 313)
        assert D.n_frames(D.CROP_SAMPLES) == int(np.ceil(D.CROP_SAMPLES / D.HOP_SIZE)) == 313

    def test_band_count_near_178(self):
        assert abs(len(filter_centers()) - 178) <= 2

    def test_silence_hits_the_floor(self):
        np.testing.assert_allclose(spectrogram(np.zeros(SR)), -5.0, rtol=0, atol=1e-6)

    def test_tone_peaks_at_nearest_filter(self):
        t = np.arange(2 * SR) / SR
        spec = spectrogram(np.sin(2 * np.pi * 440 * t))[0]
        centers = filter_centers()
        assert np.argmax(spec[:, 5:-5].mean(axis=1)) == np.argmin(np.abs(centers - 440))

    def test_wrong_rate(self):
        with pytest.raises(ConfigError):
            spectrogram(np.zeros(100), sample_rate=44100)

    def test_filterbank_rows_are_triangles_peaking_at_centers(self):
        bank = log_filterbank()
        assert bank.shape == (len(filter_centers()), D.FRAME_SIZE // 2 + 1)
        assert (bank >= 0).all() and (bank <= 1).all() and (bank.sum(axis=1) > 0).all()

    def test_all_values_finite(self):
        wave = np.random.default_rng(0).normal(size=3 * SR)
        assert np.isfinite(spectrogram(wave)).all()


class TestNormalizeSpectrogram:
    def test_max_element(self):
        out = normalize_spectrogram(np.array([[0.5, 3.0], [1.0, 2.0]]))
        assert out.max() == pytest.approx(np.log10(1 + 1e-5), rel=1e-12)
        assert out.max() == pytest.approx(4.34e-6, rel=1e-3)

    def test_all_zero(self):
        np.testing.assert_array_equal(normalize_spectrogram(np.zeros((3, 4))), np.full((3, 4), -5.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.125, 0.5, 2.0, 4.0, 1024.0]))
    def test_scale_invariance(self, seed, c):
        # power-of-two gains keep the division exact in floating point
        mag = np.random.default_rng(seed).exponential(size=(6, 9))
        np.testing.assert_array_equal(normalize_spectrogram(c * mag), normalize_spectrogram(mag))

    def test_monotone(self):
        mag = np.sort(np.random.default_rng(2).exponential(size=50))
        assert (np.diff(normalize_spectrogram(mag)) >= 0).all()


def table(emotions, mid=None, ids=None):
    emotions = np.atleast_2d(np.asarray(emotions, dtype=float))
    ids = ids or [f"c{i}" for i in range(len(emotions))]
    return AnnotationTable(ids, emotions, None if mid is None else np.atleast_2d(np.asarray(mid, dtype=float)))


class TestTargets:
    def test_emotion_endpoints(self):
        out = normalize_targets(table([[1.0] * 4 + [7.83] * 4]))
        np.testing.assert_array_equal(out.emotions, [[0.0] * 4 + [1.0] * 4])

    def test_midlevel_midpoint(self):
        out = normalize_targets(table([[4.0] * 8], [[5.5] * 7]))
        np.testing.assert_allclose(out.midlevel, 0.5, rtol=0, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        emo, mid = rng.uniform(1.0, 7.83, (5, 8)), rng.uniform(1, 10, (5, 7))
        out = normalize_targets(table(emo, mid))
        assert ((out.emotions >= 0) & (out.emotions <= 1)).all()
        np.testing.assert_allclose(denormalize(out.emotions, D.EMOTION_RANGE), emo, rtol=0, atol=1e-12)
        np.testing.assert_allclose(denormalize(out.midlevel, D.MIDLEVEL_RANGE), mid, rtol=0, atol=1e-12)

    def test_out_of_range_lists_clip(self):
        with pytest.raises(ValidationError, match="bad_clip"):
            normalize_targets(table([[4.0] * 8, [8.0] + [4.0] * 7], ids=["ok", "bad_clip"]))
        with pytest.raises(ValidationError, match="m1"):
            normalize_targets(table([[4.0] * 8], [[0.5] * 7], ids=["m1"]))

    def test_csv_reading_joins_by_clip(self, tmp_path):
        emo = tmp_path / "emo.csv"
        emo.write_text("clip_id," + ",".join(EMOTIONS) + "\nb," + ",".join(["2"] * 8) + "\na,"
                       + ",".join(["3"] * 8) + "\n")
        mid = tmp_path / "mid.csv"
        mid.write_text("clip_id," + ",".join(MIDLEVEL) + "\na," + ",".join(["1"] * 7) + "\nb,"
                       + ",".join(["9"] * 7) + "\n")
        t = read_annotations(emo, mid)
        assert t.clip_ids == ["b", "a"]
        np.testing.assert_array_equal(t.midlevel[:, 0], [9, 1])

    def test_csv_missing_column_and_missing_midlevel_rows(self, tmp_path):
        emo = tmp_path / "emo.csv"
        emo.write_text("clip_id,anger\nx,1\n")
        with pytest.raises(IngestionError, match="missing columns"):
            read_annotations(emo)
        emo.write_text("clip_id," + ",".join(EMOTIONS) + "\nx," + ",".join(["2"] * 8) + "\n")
        mid = tmp_path / "mid.csv"
        mid.write_text("clip_id," + ",".join(MIDLEVEL) + "\n")
        with pytest.raises(ValidationError, match="x"):
            read_annotations(emo, mid)


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(360, (288, 36, 36)), (10, (8, 1, 1)), (400, (320, 40, 40))])
    def test_sizes(self, n, sizes):
        assert make_split(n, 0).sizes() == sizes

    def test_deterministic_and_seed_dependent(self):
        assert make_split(100, 4) == make_split(100, 4)
        assert make_split(100, 4).train != make_split(100, 5).train

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 2000), st.integers(0, 2**32 - 1))
    def test_partition_property(self, n, seed):
        s = make_split(n, seed)
        parts = [set(s.train), set(s.val), set(s.test)]
        assert set().union(*parts) == set(range(n)) and sum(map(len, parts)) == n
        for got, frac in zip(s.sizes(), (0.8, 0.1, 0.1)):
            assert abs(got - frac * n) <= 1

    def test_too_small(self):
        with pytest.raises(ConfigError):
            make_split(9, 0)


class TestSynthetic:
    def test_equal_concepts_without_noise_render_identically(self):
        z = np.tile(np.random.default_rng(0).uniform(size=(1, 7)), (2, 1))
        img = D.render_concepts(z, (16, 20))
        assert img[0].tobytes() == img[1].tobytes()

    def test_zero_concepts_map_to_clipped_offset(self):
        np.testing.assert_array_equal(D.emotions_from_concepts(np.zeros((1, 7)))[0],
                                      np.clip(D.MIXING_OFFSET, 0, 1))

    def test_mixing_is_full_rank(self):
        assert D.MIXING.shape == (8, 7) and np.linalg.matrix_rank(D.MIXING) == 7

    def test_concepts_recoverable_by_least_squares(self):
        data = synth_dataset(500, (32, 64), seed=3)
        patterns = D.concept_patterns((32, 64)).reshape(7, -1)
        feats = data.x.reshape(500, -1).astype(np.float64) @ patterns.T
        design = np.hstack([feats, np.ones((500, 1))])
        coef, *_ = np.linalg.lstsq(design, data.y_midlevel, rcond=None)
        resid = data.y_midlevel - design @ coef
        r2 = 1 - resid.var(axis=0) / data.y_midlevel.var(axis=0)
        assert (r2 >= 0.9).all(), r2

    def test_sample_invariants(self):
        data = synth_dataset(40, (16, 12), seed=1)
        assert data.x.shape == (40, 1, 16, 12) and data.x.dtype == np.float32
        assert np.isfinite(data.x).all()
        for arr in (data.y_emotion, data.y_midlevel):
            assert ((arr >= 0) & (arr <= 1)).all()
        np.testing.assert_allclose(data.y_emotion, D.emotions_from_concepts(data.y_midlevel.astype(np.float64)),
                                   atol=1e-6)

    def test_seeded(self):
        a, b = synth_dataset(20, (8, 8), seed=5), synth_dataset(20, (8, 8), seed=5)
        assert a.x.tobytes() == b.x.tobytes()
        assert a.x.tobytes() != synth_dataset(20, (8, 8), seed=6).x.tobytes()

    @pytest.mark.parametrize("n,shape", [(19, (16, 16)), (20, (6, 16)), (20, (16, 1))])
    def test_degenerate(self, n, shape):
        with pytest.raises(ConfigError):
            synth_dataset(n, shape)


class TestCorpus:
    def test_cache_round_trip(self, tmp_path):
        data = synth_dataset(200, (8, 10), seed=0)
        manifest = D.write_cache(data, tmp_path, digest="abc")
        assert D.read_manifest(tmp_path)["n"] == 200
        back = D.read_cache(tmp_path)
        assert back.clip_ids == data.clip_ids
        assert back.x.tobytes() == data.x.tobytes()
        np.testing.assert_array_equal(back.y_midlevel, data.y_midlevel)
        assert manifest.name == "manifest.json"

    def test_missing_cache(self, tmp_path):
        with pytest.raises(IngestionError):
            D.read_cache(tmp_path)

    def test_prepare_from_wav_files(self, tmp_path):
        rng = np.random.default_rng(0)
        ids = ["a", "b"]
        for i, c in enumerate(ids):
            wavfile.write(tmp_path / f"{c}.wav", SR, (0.3 * rng.normal(size=(11 + i) * SR)).astype(np.float32))
        (tmp_path / "emo.csv").write_text("clip_id," + ",".join(EMOTIONS) + "\n"
                                          + "".join(f"{c}," + ",".join(["4"] * 8) + "\n" for c in ids))
        data = D.prepare_corpus(tmp_path, tmp_path / "emo.csv", seed=1)
        again = D.prepare_corpus(tmp_path, tmp_path / "emo.csv", seed=1)
        assert data.x.shape == (2, 1, len(filter_centers()), 313)
        assert data.x.tobytes() == again.x.tobytes()
        assert all(0 <= o <= 2 for o in data.offsets)
        assert data.y_midlevel is None

    def test_prepare_reports_missing_audio(self, tmp_path):
        (tmp_path / "emo.csv").write_text("clip_id," + ",".join(EMOTIONS) + "\nz," + ",".join(["4"] * 8) + "\n")
        with pytest.raises(IngestionError, match="z.wav"):
            D.prepare_corpus(tmp_path, tmp_path / "emo.csv")
