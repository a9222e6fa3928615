"""Objective speech quality metrics and corpus aggregation.

Intrusive metrics take ``(ref, deg)`` in that order — ``ref`` is the clean
reference. PESQ is only ever delegated to an external implementation; when
none is configured it is reported as unavailable together with the composite
measures that depend on it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .dsp import Waveform

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("pesq", "csig", "cbak", "covl", "ssnr", "stoi")

PESQ_BIN_ENV = "DENVOC_PESQ_BIN"

SSNR_FLOOR_DB = -10.0
SSNR_CAP_DB = 35.0


def _frame_view(x: np.ndarray, flen: int, hop: int) -> np.ndarray:
    """Full frames of ``x`` as rows; discards the ragged tail."""
    n_frames = 1 + (len(x) - flen) // hop if len(x) >= flen else 0
    if n_frames <= 0:
        return np.empty((0, flen))
    idx = np.arange(flen)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def _check_pair(ref: Waveform, deg: Waveform):
    if len(ref) != len(deg):
        raise ValueError(f"length mismatch: ref {len(ref)} vs deg {len(deg)}")
    if ref.sample_rate != deg.sample_rate:
        raise ValueError("sample rates differ")


# ---------------------------------------------------------------------------
# Segmental SNR
# ---------------------------------------------------------------------------


def ssnr(
    ref: Waveform,
    deg: Waveform,
    frame_ms: float = 32.0,
    overlap: float = 0.5,
    floor_db: float = SSNR_FLOOR_DB,
    cap_db: float = SSNR_CAP_DB,
    silence_range_db: float = 40.0,
) -> float:
    """Mean of per-frame SNRs, each clamped to ``[floor_db, cap_db]``.

    Frames whose reference energy sits more than ``silence_range_db`` below
    the loudest frame are treated as silence and excluded.
    """
    _check_pair(ref, deg)
    flen = int(round(frame_ms * 1e-3 * ref.sample_rate))
    hop = max(1, int(round(flen * (1.0 - overlap))))
    ref_frames = _frame_view(ref.samples, flen, hop)
    deg_frames = _frame_view(deg.samples, flen, hop)
    if ref_frames.shape[0] == 0:
        raise ValueError("signal shorter than one analysis frame")
    sig_energy = np.sum(ref_frames**2, axis=1)
    err_energy = np.sum((ref_frames - deg_frames) ** 2, axis=1)
    peak = sig_energy.max()
    if peak <= 0:
        raise ValueError("reference signal is silent")
    active = sig_energy > peak * 10.0 ** (-silence_range_db / 10.0)
    sig_energy, err_energy = sig_energy[active], err_energy[active]
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(sig_energy / np.maximum(err_energy, 1e-300))
    return float(np.mean(np.clip(snr, floor_db, cap_db)))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

_STOI_SR = 10000
_STOI_FRAME = 256
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_MIN_FREQ = 150.0
_STOI_SEG = 30  # frames per 384 ms analysis segment
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def _third_octave_matrix() -> np.ndarray:
    freqs = np.linspace(0, _STOI_SR / 2, _STOI_NFFT // 2 + 1)
    k = np.arange(_STOI_BANDS)
    f_low = _STOI_MIN_FREQ * 2.0 ** ((2 * k - 1) / 6.0)
    f_high = _STOI_MIN_FREQ * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((_STOI_BANDS, freqs.size))
    for i in range(_STOI_BANDS):
        lo = int(np.argmin((freqs - f_low[i]) ** 2))
        hi = int(np.argmin((freqs - f_high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    w = 0.5 * (1 - np.cos(2 * np.pi * np.arange(_STOI_FRAME) / _STOI_FRAME))
    hop = _STOI_FRAME // 2
    xf = _frame_view(x, _STOI_FRAME, hop) * w
    yf = _frame_view(y, _STOI_FRAME, hop) * w
    if xf.shape[0] == 0:
        return x[:0], y[:0]
    energies = 20 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energies > energies.max() - _STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    # 50% Hann overlap-add sums to unity, so plain OLA restores the signal
    out_len = (xf.shape[0] - 1) * hop + _STOI_FRAME if xf.shape[0] else 0
    xs, ys = np.zeros(out_len), np.zeros(out_len)
    for m in range(xf.shape[0]):
        xs[m * hop : m * hop + _STOI_FRAME] += xf[m]
        ys[m * hop : m * hop + _STOI_FRAME] += yf[m]
    return xs, ys


def _stoi_band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = 0.5 * (1 - np.cos(2 * np.pi * np.arange(_STOI_FRAME) / _STOI_FRAME))
    frames = _frame_view(x, _STOI_FRAME, _STOI_FRAME // 2) * w
    spec = np.abs(np.fft.rfft(frames, n=_STOI_NFFT, axis=1)) ** 2
    return np.sqrt(obm @ spec.T)  # [bands, frames]


def stoi(ref: Waveform, deg: Waveform) -> float:
    """Short-time intelligibility score in [0, 1].

    Resamples to 10 kHz, drops silent frames (judged on the reference),
    decomposes into 15 one-third-octave bands, and averages the clipped,
    normalized correlation between band envelopes over 384 ms segments.
    """
    _check_pair(ref, deg)
    x = data_mod.resample(ref, _STOI_SR).samples
    y = data_mod.resample(deg, _STOI_SR).samples
    x, y = _remove_silent_frames(x, y)
    if x.size < (_STOI_SEG - 1) * (_STOI_FRAME // 2) + _STOI_FRAME:
        raise ValueError("fewer than 384 ms of active speech after silence removal")
    obm = _third_octave_matrix()
    xb = _stoi_band_envelopes(x, obm)
    yb = _stoi_band_envelopes(y, obm)
    n_seg = xb.shape[1] - _STOI_SEG + 1
    if n_seg < 1:
        raise ValueError("fewer than 384 ms of active speech after silence removal")
    clip_gain = 10.0 ** (-_STOI_BETA_DB / 20.0)
    total = 0.0
    for m in range(n_seg):
        xs = xb[:, m : m + _STOI_SEG]
        ys = yb[:, m : m + _STOI_SEG]
        alpha = np.sqrt(
            np.sum(xs**2, axis=1, keepdims=True)
            / (np.sum(ys**2, axis=1, keepdims=True) + _EPS)
        )
        ys_clip = np.minimum(alpha * ys, xs * (1 + clip_gain))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = ys_clip - ys_clip.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + _EPS
        total += float(np.sum(np.sum(xc * yc, axis=1) / denom))
    score = total / (n_seg * _STOI_BANDS)
    return float(np.clip(score, 0.0, 1.0))


# ---------------------------------------------------------------------------
# LPC log-likelihood ratio
# ---------------------------------------------------------------------------


def _autocorrelation(frame: np.ndarray, order: int) -> np.ndarray:
    n = len(frame)
    return np.array([np.dot(frame[: n - k], frame[k:]) for k in range(order + 1)])


def _levinson(r: np.ndarray, order: int) -> np.ndarray:
    """LPC polynomial [1, a1..a_order] from autocorrelation via Levinson-Durbin."""
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1 : 0 : -1])
        k = -acc / err
        a[1:i] = a[1:i] + k * a[i - 1 : 0 : -1]
        a[i] = k
        err *= 1.0 - k * k
        if err <= 0:
            break
    return a


def llr(ref: Waveform, deg: Waveform, order: int = 10, trim: float = 0.95) -> float:
    """LPC log-likelihood ratio; 0 for identical (or gain-scaled) inputs.

    30 ms Hann frames with 7.5 ms hop; frame values are sorted and the
    smallest ``trim`` fraction averaged.
    """
    _check_pair(ref, deg)
    sr = ref.sample_rate
    flen = int(round(0.030 * sr))
    hop = flen // 4
    w = np.hanning(flen)
    ref_frames = _frame_view(ref.samples, flen, hop) * w
    deg_frames = _frame_view(deg.samples, flen, hop) * w
    values = []
    for rf, df in zip(ref_frames, deg_frames):
        r_ref = _autocorrelation(rf, order)
        r_deg = _autocorrelation(df, order)
        if r_ref[0] <= 0 or r_deg[0] <= 0:
            continue
        a_ref = _levinson(r_ref, order)
        a_deg = _levinson(r_deg, order)
        # quadratic forms against the Toeplitz autocorrelation of the reference
        num = _toeplitz_quadratic(a_deg, r_ref)
        den = _toeplitz_quadratic(a_ref, r_ref)
        if num <= 0 or den <= 0:
            continue
        values.append(math.log(num / den))
    if not values:
        raise ValueError("no analyzable frames for LLR")
    values = np.sort(values)
    kept = values[: max(1, int(round(len(values) * trim)))]
    return float(np.mean(kept))


def _toeplitz_quadratic(a: np.ndarray, r: np.ndarray) -> float:
    """a @ Toeplitz(r) @ a computed from autocorrelation lags."""
    order = len(a) - 1
    total = r[0] * np.dot(a, a)
    for k in range(1, order + 1):
        total += 2.0 * r[k] * np.dot(a[:-k], a[k:])
    return float(total)


# ---------------------------------------------------------------------------
# Weighted spectral slope
# ---------------------------------------------------------------------------

_WSS_CENT_FREQ = np.array([
    50.000, 120.000, 190.000, 260.000, 330.000, 400.000, 470.000,
    540.000, 617.372, 703.378, 798.717, 904.128, 1020.38, 1148.30,
    1288.72, 1442.54, 1610.70, 1794.16, 1993.93, 2211.08, 2446.71,
    2701.97, 2978.04, 3276.17, 3597.63,
])
_WSS_BANDWIDTH = np.array([
    70.0000, 70.0000, 70.0000, 70.0000, 70.0000, 70.0000, 70.0000,
    77.3724, 86.0056, 95.3398, 105.411, 116.256, 127.914, 140.423,
    153.823, 168.154, 183.457, 199.776, 217.153, 235.631, 255.255,
    276.072, 298.126, 321.465, 346.136,
])


def _wss_filters(sr: int, n_fftby2: int) -> np.ndarray:
    max_freq = sr / 2
    min_factor = math.exp(-30.0 / (2 * 2.303))
    filters = np.zeros((_WSS_CENT_FREQ.size, n_fftby2))
    j = np.arange(n_fftby2)
    for i in range(_WSS_CENT_FREQ.size):
        f0 = (_WSS_CENT_FREQ[i] / max_freq) * n_fftby2
        bw = (_WSS_BANDWIDTH[i] / max_freq) * n_fftby2
        norm = math.log(_WSS_BANDWIDTH[0]) - math.log(_WSS_BANDWIDTH[i])
        f = np.exp(-11.0 * ((j - math.floor(f0)) / bw) ** 2 + norm)
        filters[i] = np.where(f > min_factor, f, 0.0)
    return filters


def _nearest_peaks(slope: np.ndarray, energy: np.ndarray) -> np.ndarray:
    peaks = np.zeros(slope.size)
    for i in range(slope.size):
        n = i
        if slope[i] > 0:
            while n < slope.size and slope[n] > 0:
                n += 1
            peaks[i] = energy[n]
        else:
            while n >= 0 and slope[n] <= 0:
                n -= 1
            peaks[i] = energy[n + 1]
    return peaks


def wss(ref: Waveform, deg: Waveform, trim: float = 0.95) -> float:
    """Weighted spectral slope distance over 25 critical bands; 0 iff equal slopes."""
    _check_pair(ref, deg)
    sr = ref.sample_rate
    flen = int(round(0.030 * sr))
    hop = flen // 4
    n_fft = 2 ** math.ceil(math.log2(2 * flen))
    n_fftby2 = n_fft // 2
    filters = _wss_filters(sr, n_fftby2)
    w = np.hanning(flen)
    ref_frames = _frame_view(ref.samples, flen, hop) * w
    deg_frames = _frame_view(deg.samples, flen, hop) * w
    if ref_frames.shape[0] == 0:
        raise ValueError("signal shorter than one analysis frame")
    k_max, k_locmax = 20.0, 1.0
    distortions = []
    for rf, df in zip(ref_frames, deg_frames):
        spec_r = np.abs(np.fft.fft(rf, n_fft)[:n_fftby2]) ** 2
        spec_d = np.abs(np.fft.fft(df, n_fft)[:n_fftby2]) ** 2
        e_r = 10 * np.log10(np.maximum(filters @ spec_r, 1e-10))
        e_d = 10 * np.log10(np.maximum(filters @ spec_d, 1e-10))
        s_r, s_d = np.diff(e_r), np.diff(e_d)
        peaks_r = _nearest_peaks(s_r, e_r)
        peaks_d = _nearest_peaks(s_d, e_d)
        w_r = (k_max / (k_max + e_r.max() - e_r[:-1])) * (
            k_locmax / (k_locmax + peaks_r - e_r[:-1])
        )
        w_d = (k_max / (k_max + e_d.max() - e_d[:-1])) * (
            k_locmax / (k_locmax + peaks_d - e_d[:-1])
        )
        weights = (w_r + w_d) / 2
        distortions.append(float(np.sum(weights * (s_r - s_d) ** 2) / np.sum(weights)))
    distortions = np.sort(distortions)
    kept = distortions[: max(1, int(round(len(distortions) * trim)))]
    return float(np.mean(kept))


# ---------------------------------------------------------------------------
# Composite measures and PESQ adapter
# ---------------------------------------------------------------------------


def composite(pesq: float, llr_value: float, wss_value: float, ssnr_value: float):
    """MOS predictors for signal, background and overall quality, each in [1, 5]."""
    csig = 3.093 - 1.029 * llr_value + 0.603 * pesq - 0.009 * wss_value
    cbak = 1.634 + 0.478 * pesq - 0.007 * wss_value + 0.063 * ssnr_value
    covl = 1.594 + 0.805 * pesq - 0.512 * llr_value - 0.007 * wss_value
    clamp = lambda v: float(min(5.0, max(1.0, v)))  # noqa: E731
    return clamp(csig), clamp(cbak), clamp(covl)


_PESQ_CACHE: dict[tuple[str, str], float] = {}


def _content_key(ref: Waveform, deg: Waveform) -> tuple[str, str]:
    return (
        hashlib.sha1(ref.samples.tobytes()).hexdigest(),
        hashlib.sha1(deg.samples.tobytes()).hexdigest(),
    )


def pesq_available() -> bool:
    try:
        import pesq  # noqa: F401

        return True
    except ImportError:
        pass
    binary = os.environ.get(PESQ_BIN_ENV)
    return bool(binary and shutil.which(binary))


def pesq_adapter(ref: Waveform, deg: Waveform) -> float | None:
    """Wideband PESQ (MOS-LQO) via an external implementation.

    Prefers the ``pesq`` python package, then the binary named by
    ``DENVOC_PESQ_BIN``. Returns None when neither is configured — the score
    is never fabricated. Results are cached on signal content.
    """
    _check_pair(ref, deg)
    if ref.sample_rate != 16000:
        raise ValueError("PESQ adapter expects 16 kHz input")
    key = _content_key(ref, deg)
    if key in _PESQ_CACHE:
        return _PESQ_CACHE[key]
    score = None
    try:
        from pesq import pesq as _pesq

        score = float(_pesq(16000, ref.samples, deg.samples, "wb"))
    except ImportError:
        binary = os.environ.get(PESQ_BIN_ENV)
        if binary and shutil.which(binary):
            score = _run_pesq_binary(binary, ref, deg)
    if score is not None:
        _PESQ_CACHE[key] = score
    return score


def _run_pesq_binary(binary: str, ref: Waveform, deg: Waveform) -> float | None:
    with tempfile.TemporaryDirectory() as tmp:
        ref_path = os.path.join(tmp, "ref.wav")
        deg_path = os.path.join(tmp, "deg.wav")
        data_mod.write_wav(ref_path, ref)
        data_mod.write_wav(deg_path, deg)
        proc = subprocess.run(
            [binary, "+16000", "+wb", ref_path, deg_path],
            capture_output=True,
            text=True,
            check=False,
        )
    match = re.search(r"\(MOS-LQO\)[^\d-]*(-?\d+\.?\d*)", proc.stdout)
    if match:
        return float(match.group(1))
    log.warning("PESQ binary produced no parsable score (exit %d)", proc.returncode)
    return None


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Per-utterance metric values plus corpus means (unweighted)."""

    per_utterance: dict[str, dict[str, float | None]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def means(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for col in METRIC_COLUMNS:
            vals = [
                row[col]
                for row in self.per_utterance.values()
                if row.get(col) is not None
            ]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def render_table(self) -> str:
        header = " ".join(f"{c.upper():>6}" for c in METRIC_COLUMNS)
        fmt = lambda v: f"{v:6.2f}" if v is not None else "   n/a"  # noqa: E731
        lines = [f"{'utterance':<24} {header}"]
        for uid, row in self.per_utterance.items():
            lines.append(
                f"{uid:<24} " + " ".join(fmt(row.get(c)) for c in METRIC_COLUMNS)
            )
        means = self.means
        lines.append(f"{'mean':<24} " + " ".join(fmt(means[c]) for c in METRIC_COLUMNS))
        return "\n".join(lines)

    def save(self, path) -> None:
        payload = {
            "config": self.config,
            "per_utterance": self.per_utterance,
            "means": self.means,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            per_utterance=payload["per_utterance"], config=payload.get("config", {})
        )


def evaluate_pair(ref: Waveform, deg: Waveform) -> dict[str, float | None]:
    """All six metrics for one utterance; unavailable ones come back as None."""
    row: dict[str, float | None] = {c: None for c in METRIC_COLUMNS}
    row["ssnr"] = ssnr(ref, deg)
    try:
        row["stoi"] = stoi(ref, deg)
    except ValueError as exc:
        log.warning("STOI unavailable: %s", exc)
    pesq_score = pesq_adapter(ref, deg)
    row["pesq"] = pesq_score
    if pesq_score is not None:
        try:
            llr_v = llr(ref, deg)
            wss_v = wss(ref, deg)
            row["csig"], row["cbak"], row["covl"] = composite(
                pesq_score, llr_v, wss_v, row["ssnr"]
            )
        except ValueError as exc:
            log.warning("composite measures unavailable: %s", exc)
    return row


def evaluate_pairs(items, config: dict | None = None) -> MetricsReport:
    """Evaluate ``(id, ref, deg)`` triples into a report.

    Per-utterance metric failures are logged and marked unavailable; an empty
    input is an error.
    """
    report = MetricsReport(config=config or {})
    for uid, ref, deg in items:
        report.per_utterance[uid] = evaluate_pair(ref, deg)
    if not report.per_utterance:
        raise ValueError("no utterances to evaluate")
    return report
