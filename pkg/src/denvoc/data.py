"""Corpus handling for paired clean/noisy speech directories.

Pairs files by basename, resamples everything to 16 kHz on ingestion, crops
aligned training segments, and fabricates desk-scale fixtures by mixing noise
into clean signals at an exact SNR.
"""

from __future__ import annotations

import json
import logging
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dsp import Waveform

log = logging.getLogger(__name__)

TARGET_SR = 16000


@dataclass
class UtterancePair:
    id: str
    clean_path: Path
    noisy_path: Path
    duration: float
    split: str  # "train" | "test"

    def as_record(self) -> dict:
        return {
            "id": self.id,
            "clean_path": str(self.clean_path),
            "noisy_path": str(self.noisy_path),
            "duration": round(self.duration, 6),
            "split": self.split,
        }


@dataclass
class Manifest:
    pairs: list[UtterancePair] = field(default_factory=list)
    sample_rate: int = TARGET_SR

    def split(self, name: str) -> list[UtterancePair]:
        return [p for p in self.pairs if p.split == name]

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pairs:
            out[p.split] = out.get(p.split, 0) + 1
        return out

    def save(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            for p in self.pairs:
                fh.write(json.dumps(p.as_record(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        pairs = []
        with Path(path).open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                pairs.append(
                    UtterancePair(
                        id=rec["id"],
                        clean_path=Path(rec["clean_path"]),
                        noisy_path=Path(rec["noisy_path"]),
                        duration=float(rec["duration"]),
                        split=rec["split"],
                    )
                )
        return cls(pairs=pairs)

    def merged_with(self, other: "Manifest") -> "Manifest":
        return Manifest(pairs=self.pairs + other.pairs)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a mono WAV file; integer PCM is scaled to [-1, 1]."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples=samples, sample_rate=int(sr))


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM, clipping to [-1, 1]."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate, np.round(clipped * 32767.0).astype(np.int16))


def wav_duration(path) -> float:
    """Duration in seconds from the WAV header only."""
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()


def resample(w: Waveform, target_sr: int = TARGET_SR) -> Waveform:
    """Polyphase resampling (Kaiser-windowed); identity when rates match."""
    if w.sample_rate == target_sr:
        return w
    g = math.gcd(w.sample_rate, target_sr)
    samples = resample_poly(w.samples, target_sr // g, w.sample_rate // g,
                            window=("kaiser", 5.0))
    return Waveform(samples=samples, sample_rate=target_sr)


# ---------------------------------------------------------------------------
# Manifest construction and ingestion
# ---------------------------------------------------------------------------


def build_manifest(clean_dir, noisy_dir, split: str = "test") -> Manifest:
    """Pair WAV files by basename, lexicographically ordered.

    Orphans on either side are logged and excluded; an empty intersection is
    an error.
    """
    clean_dir, noisy_dir = Path(clean_dir), Path(noisy_dir)
    clean_files = {p.stem: p for p in clean_dir.glob("*.wav")}
    noisy_files = {p.stem: p for p in noisy_dir.glob("*.wav")}
    common = sorted(clean_files.keys() & noisy_files.keys())
    for orphan in sorted(clean_files.keys() ^ noisy_files.keys()):
        side = "clean" if orphan in clean_files else "noisy"
        log.warning("unpaired %s file excluded: %s", side, orphan)
    if not common:
        raise ValueError(f"no paired WAV files between {clean_dir} and {noisy_dir}")
    pairs = [
        UtterancePair(
            id=stem,
            clean_path=clean_files[stem],
            noisy_path=noisy_files[stem],
            duration=wav_duration(clean_files[stem]),
            split=split,
        )
        for stem in common
    ]
    return Manifest(pairs=pairs)


def ingest(pair: UtterancePair, target_sr: int = TARGET_SR) -> tuple[Waveform, Waveform]:
    """Load one pair at the target rate, truncated to the shorter signal."""
    clean = resample(read_wav(pair.clean_path), target_sr)
    noisy = resample(read_wav(pair.noisy_path), target_sr)
    n = min(len(clean), len(noisy))
    return (
        Waveform(clean.samples[:n], target_sr),
        Waveform(noisy.samples[:n], target_sr),
    )


def ingest_all(manifest: Manifest, target_sr: int = TARGET_SR):
    """Yield ``(pair, clean, noisy)``; corrupt files are logged and skipped."""
    for pair in manifest.pairs:
        try:
            clean, noisy = ingest(pair, target_sr)
        except Exception as exc:  # noqa: BLE001 - batch must survive bad files
            log.error("skipping %s: %s", pair.id, exc)
            continue
        yield pair, clean, noisy


def random_segment(
    clean: Waveform, noisy: Waveform, seg_len: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Crop the same ``seg_len``-sample window from both signals.

    Shorter clips are zero-padded on the right at offset 0.
    """
    if seg_len <= 0:
        raise ValueError(f"seg_len must be positive, got {seg_len}")
    n = min(len(clean), len(noisy))
    if n <= seg_len:
        pad = seg_len - n
        return (
            np.pad(clean.samples[:n], (0, pad)),
            np.pad(noisy.samples[:n], (0, pad)),
        )
    start = int(rng.integers(0, n - seg_len + 1))
    return (
        clean.samples[start : start + seg_len].copy(),
        noisy.samples[start : start + seg_len].copy(),
    )


def synth_mix(clean: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add noise scaled so the full-clip SNR equals ``snr_db`` exactly.

    Noise shorter than the clean signal is tiled; ``snr_db = inf`` returns the
    clean signal unchanged. A silent clean signal has no defined SNR.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    p_clean = float(np.mean(clean.samples**2))
    if p_clean <= 0:
        raise ValueError("clean signal is silent; SNR is undefined")
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(clean.samples.copy(), clean.sample_rate)
    n = len(clean)
    noise_samples = noise.samples
    if len(noise_samples) < n:
        reps = int(np.ceil(n / len(noise_samples)))
        noise_samples = np.tile(noise_samples, reps)
    noise_samples = noise_samples[:n]
    p_noise = float(np.mean(noise_samples**2))
    if p_noise <= 0:
        raise ValueError("noise signal is silent; cannot scale to a finite SNR")
    scale = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + scale * noise_samples, clean.sample_rate)


# ---------------------------------------------------------------------------
# Synthetic fixtures
# ---------------------------------------------------------------------------


def synthetic_speech(
    duration: float = 1.0,
    sample_rate: int = TARGET_SR,
    seed: int = 0,
    f0_range: tuple[float, float] = (100.0, 220.0),
) -> Waveform:
    """Deterministic speech-like signal: drifting-pitch harmonics under a
    syllabic energy envelope. Good enough to exercise spectral models and
    metrics without shipping corpus audio."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(*f0_range)
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sample_rate
    x = np.zeros(n)
    for k in range(1, 9):
        x += (1.0 / k) * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    # syllable-rate amplitude modulation, never fully silent
    env = 0.35 + 0.65 * 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * t
                                          + rng.uniform(0, 2 * np.pi)))
    x = x * env + 0.003 * rng.standard_normal(n)
    x = 0.3 * x / np.max(np.abs(x))
    return Waveform(samples=x, sample_rate=sample_rate)
