"""Tests for corpus pairing, ingestion, cropping and synthetic mixing."""

import numpy as np
import pytest

from denvoc import data as data_mod
from denvoc.dsp import Waveform


class TestWavIO:
    def test_write_read_round_trip(self, tmp_path, speech_1s):
        path = tmp_path / "x.wav"
        data_mod.write_wav(path, speech_1s)
        back = data_mod.read_wav(path)
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - speech_1s.samples)) < 1.0 / 32000

    def test_duration_from_header(self, tmp_path):
        path = tmp_path / "d.wav"
        data_mod.write_wav(path, Waveform(np.zeros(24000) + 0.01, 16000))
        assert data_mod.wav_duration(path) == pytest.approx(1.5)


class TestResample:
    def test_identity_passthrough_bitwise(self, speech_1s):
        out = data_mod.resample(speech_1s, 16000)
        assert np.array_equal(out.samples, speech_1s.samples)

    def test_48k_to_16k_length(self):
        w = Waveform(np.random.default_rng(0).standard_normal(144000) * 0.1, 48000)
        out = data_mod.resample(w, 16000)
        assert len(out) == 48000  # 3 s at 16 kHz
        assert out.sample_rate == 16000

    def test_preserves_tone_frequency(self):
        sr = 48000
        t = np.arange(sr) / sr
        w = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), sr)
        out = data_mod.resample(w, 16000)
        spec = np.abs(np.fft.rfft(out.samples))
        peak_hz = np.argmax(spec) * 16000 / len(out)
        assert peak_hz == pytest.approx(440, abs=2)


class TestManifest:
    def test_build_pairs_and_counts(self, tiny_corpus):
        m = data_mod.build_manifest(tiny_corpus / "clean", tiny_corpus / "noisy")
        assert m.counts == {"test": 12}
        ids = [p.id for p in m.pairs]
        assert ids == sorted(ids)

    def test_orphan_excluded_with_warning(self, tiny_corpus, tmp_path, caplog):
        import shutil

        clean2 = tmp_path / "clean"
        shutil.copytree(tiny_corpus / "clean", clean2)
        data_mod.write_wav(tmp_path / "orphan_noisy.wav",
                           Waveform(np.zeros(1600) + 0.01, 16000))
        noisy2 = tmp_path / "noisy"
        shutil.copytree(tiny_corpus / "noisy", noisy2)
        data_mod.write_wav(noisy2 / "orphan.wav", Waveform(np.zeros(1600) + 0.01, 16000))
        with caplog.at_level("WARNING"):
            m = data_mod.build_manifest(clean2, noisy2)
        assert len(m.pairs) == 12
        assert any("orphan" in r.message for r in caplog.records)

    def test_empty_intersection_is_error(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        with pytest.raises(ValueError, match="no paired"):
            data_mod.build_manifest(tmp_path / "a", tmp_path / "b")

    def test_save_load_round_trip_deterministic(self, tiny_corpus, tmp_path):
        m = data_mod.build_manifest(tiny_corpus / "clean", tiny_corpus / "noisy")
        p1, p2 = tmp_path / "m1.jsonl", tmp_path / "m2.jsonl"
        m.save(p1)
        data_mod.Manifest.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestIngest:
    def test_resamples_and_aligns(self, tiny_corpus):
        m = data_mod.build_manifest(tiny_corpus / "clean", tiny_corpus / "noisy")
        pair = m.pairs[0]  # stored at 48 kHz on the clean side
        clean, noisy = data_mod.ingest(pair)
        assert clean.sample_rate == noisy.sample_rate == 16000
        assert len(clean) == len(noisy)

    def test_already_16k_passthrough(self, tiny_corpus):
        m = data_mod.build_manifest(tiny_corpus / "clean", tiny_corpus / "noisy")
        pair = m.pairs[5]
        raw = data_mod.read_wav(pair.clean_path)
        clean, _ = data_mod.ingest(pair)
        assert np.array_equal(clean.samples, raw.samples[: len(clean)])

    def test_corrupt_file_skipped_batch_continues(self, tiny_corpus, tmp_path, caplog):
        import shutil

        root = tmp_path / "corpus"
        shutil.copytree(tiny_corpus, root)
        (root / "noisy" / "utt03.wav").write_bytes(b"not a wav file")
        m = data_mod.build_manifest(root / "clean", root / "noisy")
        with caplog.at_level("ERROR"):
            out = list(data_mod.ingest_all(m))
        assert len(out) == 11
        assert any("utt03" in r.message for r in caplog.records)


class TestRandomSegment:
    def _pair(self, n=2000):
        clean = Waveform(np.arange(n, dtype=float) / n, 16000)
        noisy = Waveform((np.arange(n, dtype=float) + 5000) / n, 16000)
        return clean, noisy

    def test_fixed_seed_reproducible(self):
        clean, noisy = self._pair()
        a = data_mod.random_segment(clean, noisy, 500, np.random.default_rng(3))
        b = data_mod.random_segment(clean, noisy, 500, np.random.default_rng(3))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_crop_alignment_shared_offset(self):
        clean, noisy = self._pair()
        c, n = data_mod.random_segment(clean, noisy, 300, np.random.default_rng(0))
        # the encoded index offset between the two signals must be preserved
        assert np.allclose(n - c, 5000 / 2000)

    def test_short_clip_zero_padded(self):
        clean, noisy = self._pair(n=100)
        c, n = data_mod.random_segment(clean, noisy, 256, np.random.default_rng(0))
        assert len(c) == 256
        assert np.array_equal(c[:100], clean.samples)
        assert np.all(c[100:] == 0) and np.all(n[100:] == 0)


class TestSynthMix:
    def test_zero_db_equal_powers(self, speech_1s, noise_1s):
        mixed = data_mod.synth_mix(speech_1s, noise_1s, 0.0)
        added = mixed.samples - speech_1s.samples
        snr = 10 * np.log10(np.mean(speech_1s.samples**2) / np.mean(added**2))
        assert abs(snr) < 1e-6

    @pytest.mark.parametrize("snr_db", [-5.0, 3.7, 12.5])
    def test_requested_snr_achieved(self, speech_1s, noise_1s, snr_db):
        mixed = data_mod.synth_mix(speech_1s, noise_1s, snr_db)
        added = mixed.samples - speech_1s.samples
        measured = 10 * np.log10(np.mean(speech_1s.samples**2) / np.mean(added**2))
        assert measured == pytest.approx(snr_db, abs=1e-6)

    def test_infinite_snr_returns_clean(self, speech_1s, noise_1s):
        mixed = data_mod.synth_mix(speech_1s, noise_1s, np.inf)
        assert np.array_equal(mixed.samples, speech_1s.samples)

    def test_silent_clean_rejected(self, noise_1s):
        silent = Waveform(np.zeros(16000), 16000)
        with pytest.raises(ValueError, match="silent"):
            data_mod.synth_mix(silent, noise_1s, 5.0)

    def test_short_noise_tiled(self, speech_1s):
        short = Waveform(np.random.default_rng(1).standard_normal(900), 16000)
        mixed = data_mod.synth_mix(speech_1s, short, 10.0)
        assert len(mixed) == len(speech_1s)
        added = mixed.samples - speech_1s.samples
        measured = 10 * np.log10(np.mean(speech_1s.samples**2) / np.mean(added**2))
        assert measured == pytest.approx(10.0, abs=1e-6)


class TestSyntheticSpeech:
    def test_deterministic_and_bounded(self):
        a = data_mod.synthetic_speech(seed=5)
        b = data_mod.synthetic_speech(seed=5)
        assert np.array_equal(a.samples, b.samples)
        assert np.max(np.abs(a.samples)) <= 0.31
        assert np.mean(a.samples**2) > 0
