"""Shared fixtures: synthetic utterances and a tiny on-disk corpus."""

import numpy as np
import pytest

from denvoc import data as data_mod
from denvoc.dsp import Waveform


@pytest.fixture(scope="session")
def speech_1s() -> Waveform:
    return data_mod.synthetic_speech(duration=1.0, seed=7)


@pytest.fixture(scope="session")
def noise_1s() -> Waveform:
    rng = np.random.default_rng(99)
    return Waveform(0.1 * rng.standard_normal(16000), 16000)


def make_pair(seed: int, duration: float = 0.6, snr_db: float = 5.0):
    clean = data_mod.synthetic_speech(duration=duration, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    noise = Waveform(rng.standard_normal(len(clean)), clean.sample_rate)
    noisy = data_mod.synth_mix(clean, noise, snr_db)
    return clean, noisy


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 paired clean/noisy WAVs at 16 kHz; two clean files stored at 48 kHz."""
    root = tmp_path_factory.mktemp("corpus")
    clean_dir = root / "clean"
    noisy_dir = root / "noisy"
    clean_dir.mkdir()
    noisy_dir.mkdir()
    for i in range(12):
        clean, noisy = make_pair(seed=i, duration=0.7, snr_db=5.0)
        if i < 2:  # exercise resampling on ingestion
            up = data_mod.resample(clean, 48000)
            data_mod.write_wav(clean_dir / f"utt{i:02d}.wav", up)
        else:
            data_mod.write_wav(clean_dir / f"utt{i:02d}.wav", clean)
        data_mod.write_wav(noisy_dir / f"utt{i:02d}.wav", noisy)
    return root
