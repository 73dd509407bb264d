import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selafd import radar
from selafd.errors import ConfigurationError, InputError
from selafd.radar import (CwRecording, IngestConfig, SpectrogramSample,
                          StftParams, LABELS)


def tone(freq_hz, n=2048, fs=1000.0, label="walking"):
    t = np.arange(n) / fs
    return CwRecording(samples=np.exp(2j * np.pi * freq_hz * t),
                       sample_rate=fs, label=label)


class TestStft:
    def test_frame_count_exact(self):
        p = StftParams(window_len=200, hop=10, fft_len=256)
        rec = tone(100.0, n=2000)
        sp = radar.stft(rec, p)
        assert sp.td.shape == (256, (2000 - 200) // 10 + 1)

    def test_param_validation(self):
        with pytest.raises(ConfigurationError):
            StftParams(window_len=200, hop=0, fft_len=256)
        with pytest.raises(ConfigurationError):
            StftParams(window_len=300, hop=10, fft_len=256)

    def test_too_short_recording_rejected(self):
        p = StftParams(window_len=256, hop=16, fft_len=256)
        with pytest.raises(InputError):
            radar.stft(tone(10.0, n=100), p)

    def test_bin_centered_tone_peaks_at_analytic_bin(self):
        # window == fft: a periodic-Hann windowed bin-centered tone occupies
        # exactly the peak bin and its two neighbours at -6 dB
        p = StftParams(window_len=256, hop=64, fft_len=256)
        fs = 1000.0
        k = 40                                   # analytic bin offset from DC
        f = k * fs / p.fft_len
        sp = radar.stft(tone(f, n=2048, fs=fs), p)
        expected_row = p.fft_len // 2 + k
        peaks = sp.td.argmax(axis=0)
        assert np.all(peaks == expected_row)
        # everything beyond the 3-bin cluster sits below peak - 31 dB
        for col in range(sp.td.shape[1]):
            outside = np.delete(sp.td[:, col],
                                [expected_row - 1, expected_row, expected_row + 1])
            assert outside.max() < sp.td[expected_row, col] - 31.0

    def test_padded_fft_still_peaks_at_tone_bin(self):
        p = StftParams(window_len=200, hop=50, fft_len=256)
        fs = 1000.0
        k = -30
        f = k * fs / p.fft_len
        sp = radar.stft(tone(f, n=1000, fs=fs), p)
        assert np.all(sp.td.argmax(axis=0) == p.fft_len // 2 + k)

    def test_zero_signal_gives_uniform_floor(self):
        p = StftParams(window_len=128, hop=64, fft_len=128)
        rec = CwRecording(samples=np.zeros(512, dtype=np.complex128),
                          sample_rate=1000.0, label="walking")
        sp = radar.stft(rec, p)
        assert np.ptp(sp.td) == 0.0

    def test_parseval_per_frame(self):
        p = StftParams(window_len=200, hop=100, fft_len=256)
        rng = np.random.default_rng(0)
        sig = rng.normal(size=1000) + 1j * rng.normal(size=1000)
        rec = CwRecording(samples=sig, sample_rate=1000.0, label="walking")
        spec, _, _ = radar.stft_complex(rec, p)
        w = radar.hann_window(p.window_len)
        for fr in range(spec.shape[1]):
            seg = sig[fr * p.hop: fr * p.hop + p.window_len] * w
            freq_e = np.sum(np.abs(spec[:, fr]) ** 2) / p.fft_len
            time_e = np.sum(np.abs(seg) ** 2)
            assert abs(freq_e - time_e) / time_e < 1e-9

    def test_conjugation_flips_doppler_axis(self):
        p = StftParams(window_len=128, hop=64, fft_len=128)
        rec = tone(150.0, n=1024)
        sp = radar.stft(rec, p)
        sp_conj = radar.stft(
            CwRecording(np.conj(rec.samples), rec.sample_rate, rec.label), p)
        # row 0 is the self-mirrored Nyquist bin; the rest flip
        np.testing.assert_allclose(sp_conj.td[1:], sp.td[1:][::-1], atol=1e-9)

    def test_doppler_axis_centered(self):
        p = StftParams(window_len=128, hop=64, fft_len=128)
        sp = radar.stft(tone(100.0, n=512), p)
        assert sp.doppler_axis[64] == 0.0
        assert sp.doppler_axis[0] < 0 < sp.doppler_axis[-1]
        assert np.all(np.diff(sp.doppler_axis) > 0)

    def test_defaults_follow_sample_rate(self):
        p = StftParams.defaults(1000.0)
        assert (p.window_len, p.hop, p.fft_len) == (200, 10, 256)


class TestSynth:
    def test_same_seed_bit_identical(self):
        a = radar.synth_activity("drinking", seed=7)
        b = radar.synth_activity("drinking", seed=7)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_different_seeds_differ(self):
        a = radar.synth_activity("drinking", seed=7)
        b = radar.synth_activity("drinking", seed=8)
        assert a.samples.tobytes() != b.samples.tobytes()

    def test_unknown_label_rejected(self):
        with pytest.raises(InputError):
            radar.synth_activity("jumping", seed=0)

    def test_falling_frequency_extremum_dominates_all_classes(self):
        p = StftParams.defaults(1000.0)
        extremum = {}
        for label in LABELS:
            worst = 0.0
            for seed in range(5):
                rec = radar.synth_activity(label, seed=seed, snr_db=30.0)
                sp = radar.stft(rec, p)
                peak_hz = sp.doppler_axis[sp.td.argmax(axis=0)]
                worst = max(worst, float(np.max(np.abs(peak_hz))))
            extremum[label] = worst
        others = max(v for k, v in extremum.items() if k != "falling")
        assert extremum["falling"] > others

    def test_components_match_generator_frequency_law(self):
        rng = np.random.default_rng(3)
        comps = radar.activity_components("falling", 2.0, 1000.0, rng)
        peak = max(float(np.max(np.abs(f))) for _, f in comps)
        assert 320.0 <= peak <= 350.0

    def test_corpus_is_balanced_and_manifested(self, tmp_path):
        entries = radar.synth_corpus(tmp_path, per_class=3, seed=1)
        assert len(entries) == 18
        for label in LABELS:
            assert sum(e.label == label for e in entries) == 3
        again = radar.read_corpus_manifest(tmp_path / "manifest.txt")
        assert again == entries
        recs = radar.load_corpus(tmp_path)
        assert len(recs) == 18

    def test_corpus_rerun_hash_identical(self, tmp_path):
        radar.synth_corpus(tmp_path / "a", per_class=2, seed=5)
        radar.synth_corpus(tmp_path / "b", per_class=2, seed=5)
        for e in radar.read_corpus_manifest(tmp_path / "a" / "manifest.txt"):
            a = (tmp_path / "a" / e.path).read_bytes()
            b = (tmp_path / "b" / e.path).read_bytes()
            assert a == b


class TestRasterize:
    def _sample(self, td):
        p = StftParams(window_len=2, hop=1, fft_len=2)
        return SpectrogramSample(td=np.asarray(td, dtype=np.float64),
                                 label="walking", sample_rate=1000.0, params=p,
                                 doppler_axis=np.zeros(td.shape[0]),
                                 time_axis=np.zeros(td.shape[1]))

    def test_constant_map_becomes_zeros(self):
        img = radar.rasterize(self._sample(np.full((4, 4), 7.0)), out_size=8)
        np.testing.assert_array_equal(img, np.zeros((1, 8, 8)))
        # configured standardization still applies to the degenerate zeros
        img = radar.rasterize(self._sample(np.full((4, 4), 7.0)), out_size=8,
                              mean=0.5, std=0.5)
        np.testing.assert_array_equal(img, np.full((1, 8, 8), -1.0))

    def test_2x2_to_4x4_corners_and_centers(self):
        td = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = radar.bilinear_resize(td, 4, 4)
        assert (out[0, 0], out[0, 3], out[3, 0], out[3, 3]) == (0.0, 1.0, 2.0, 3.0)
        assert out[0, 1] == pytest.approx(1.0 / 3.0)
        assert out[1, 0] == pytest.approx(2.0 / 3.0)

    def test_native_size_without_normalization_round_trips(self):
        rng = np.random.default_rng(4)
        td = rng.normal(size=(16, 16))
        img = radar.rasterize(self._sample(td), out_size=16, normalize=False)
        assert np.max(np.abs(img[0] - td)) < 1e-12

    def test_channel_replication(self):
        td = np.arange(16.0).reshape(4, 4)
        img = radar.rasterize(self._sample(td), out_size=4, channels=3)
        assert img.shape == (3, 4, 4)
        np.testing.assert_array_equal(img[0], img[2])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 12), st.integers(2, 12))
    def test_never_emits_nan_or_inf(self, seed, h, w):
        rng = np.random.default_rng(seed)
        td = rng.normal(scale=rng.uniform(0, 100), size=(h, w))
        if rng.uniform() < 0.3:
            td[:] = td[0, 0]
        img = radar.rasterize(self._sample(td), out_size=8)
        assert np.all(np.isfinite(img))


class TestRecordingIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rec = radar.synth_activity("sitting", seed=11, source_id="sit_0")
        path = tmp_path / "r.cwrec"
        radar.save_recording(path, rec)
        back = radar.load_recording(path)
        assert back.samples.tobytes() == rec.samples.tobytes()
        assert (back.sample_rate, back.label, back.source_id) == \
            (rec.sample_rate, rec.label, rec.source_id)

    def test_truncated_payload_rejected(self, tmp_path):
        rec = radar.synth_activity("sitting", seed=11)
        path = tmp_path / "r.cwrec"
        radar.save_recording(path, rec)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(InputError):
            radar.load_recording(path)


class TestIngest:
    def test_empty_directory(self, tmp_path):
        recs, skips = radar.ingest_uog(tmp_path, IngestConfig())
        assert recs == [] and skips == []

    def test_native_round_trip_and_skip_isolation(self, tmp_path):
        rec = radar.synth_activity("walking", seed=2, source_id="w0")
        radar.save_recording(tmp_path / "w0.cwrec", rec)
        (tmp_path / "broken.cwrec").write_bytes(b"garbage")
        recs, skips = radar.ingest_uog(tmp_path, IngestConfig(pattern="*.cwrec"))
        assert len(recs) == 1
        assert recs[0].samples.tobytes() == rec.samples.tobytes()
        assert len(skips) == 1 and "broken" in skips[0]["path"]

    def test_text_iq_format_with_label_map(self, tmp_path):
        (tmp_path / "fall_001.dat").write_text("hdr\n1.0 0.0\n0.0 1.0\n")
        cfg = IngestConfig(format="text_iq", pattern="*.dat", sample_rate=500.0,
                           header_lines=1, label_map={"fall": "falling"})
        recs, skips = radar.ingest_uog(tmp_path, cfg)
        assert not skips
        np.testing.assert_array_equal(recs[0].samples, [1.0, 1.0j])
        assert recs[0].label == "falling"

    def test_soft_count_check_warns(self, tmp_path, caplog):
        radar.save_recording(tmp_path / "a.cwrec",
                             radar.synth_activity("walking", seed=1))
        cfg = IngestConfig(pattern="*.cwrec", expected_count=radar.UOG_EXPECTED_COUNT)
        with caplog.at_level("WARNING", logger="selafd.radar"):
            recs, _ = radar.ingest_uog(tmp_path, cfg)
        assert len(recs) == 1
        assert any("1753" in r.message for r in caplog.records)


class TestSplit:
    def test_600_samples_80_20_per_class(self):
        labels = [lab for lab in LABELS for _ in range(100)]
        sp = radar.split(labels, ratio=0.8, seed=0)
        assert len(sp.train_idx) == 480 and len(sp.test_idx) == 120
        for lab in LABELS:
            n = sum(labels[i] == lab for i in sp.train_idx)
            assert n == 80

    def test_same_seed_identical(self):
        labels = [lab for lab in LABELS for _ in range(10)]
        assert radar.split(labels, 0.8, 3) == radar.split(labels, 0.8, 3)
        assert radar.split(labels, 0.8, 3).hash() == radar.split(labels, 0.8, 3).hash()

    def test_disjoint_and_covering_for_many_seeds(self):
        labels = [lab for lab in LABELS for _ in range(7)]
        everything = set(range(len(labels)))
        for seed in range(100):
            sp = radar.split(labels, 0.7, seed)
            train, test = set(sp.train_idx), set(sp.test_idx)
            assert not train & test
            assert train | test == everything

    def test_tiny_class_rejected(self):
        with pytest.raises(InputError):
            radar.split(["walking", "falling"], 0.8, 0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(InputError):
            radar.split(["a", "a", "b", "b"], 1.0, 0)
