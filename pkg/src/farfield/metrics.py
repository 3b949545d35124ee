"""Evaluation against scene ground truth, and log-Mel ASR features."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stft import StftConfig, TimeSignal, stft

SDR_CAP_DB = 100.0
LOG_FLOOR = 1e-10
# 25 ms Hann window, 12.5 ms shift at 16 kHz
FEATURE_STFT = StftConfig(400, 200, "hann", 512)


@dataclass
class SdrReport:
    sdr_db: float
    input_sdr_db: float

    @property
    def improvement_db(self) -> float:
        return self.sdr_db - self.input_sdr_db


@dataclass
class FeatureMatrix:
    features: np.ndarray
    mel_channels: int
    normalized: bool


def _as_vector(x, name):
    if isinstance(x, TimeSignal):
        if x.num_channels != 1:
            raise ValueError(f"{name} must be single-channel, got {x.num_channels} channels")
        return x.samples[0]
    x = np.asarray(x, dtype=float)
    if x.ndim == 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 1:
        raise ValueError(f"{name} must be a single-channel signal")
    return x


def sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB.

    The estimate is trimmed or zero-padded to the reference length, the
    reference is scaled by the least-squares factor ``alpha`` and
    ``10 log10(|alpha r|^2 / |alpha r - s|^2)`` is returned.
    """
    s = _as_vector(estimate, "estimate")
    r = _as_vector(reference, "reference")
    if s.size < r.size:
        s = np.pad(s, (0, r.size - s.size))
    s = s[:r.size]
    ref_power = r @ r
    if ref_power == 0:
        raise ValueError("reference has zero power")
    target = (s @ r) / ref_power * r
    error = target - s
    target_power = target @ target
    error_power = error @ error
    if target_power == 0:
        return -SDR_CAP_DB
    if error_power <= target_power * 10 ** (-SDR_CAP_DB / 10):
        return SDR_CAP_DB
    return float(10 * np.log10(target_power / error_power))


def sdr_report(estimate, reference, unprocessed) -> SdrReport:
    return SdrReport(sdr(estimate, reference), sdr(unprocessed, reference))


def snr(signal, noise) -> float:
    """Power ratio of two equal-length signals in dB."""
    s = np.asarray(signal.samples if isinstance(signal, TimeSignal) else signal, dtype=float)
    n = np.asarray(noise.samples if isinstance(noise, TimeSignal) else noise, dtype=float)
    noise_power = np.mean(n ** 2)
    if noise_power == 0:
        return math.inf
    return float(10 * np.log10(np.mean(s ** 2) / noise_power))


def snr_gain(clean_in, noise_in, clean_out, noise_out) -> float:
    """Output SNR minus input SNR, both from separately processed components."""
    return snr(clean_out, noise_out) - snr(clean_in, noise_in)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=float) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(mel_channels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-style filters spanning 0 Hz to Nyquist, shape (mel_channels, F).

    Filter ``k`` rises linearly from edge ``k`` to edge ``k + 1`` and falls
    to edge ``k + 2``, where the ``mel_channels + 2`` edges are equally
    spaced on the Mel scale. Peak height is 1.
    """
    num_bins = fft_size // 2 + 1
    if mel_channels > num_bins:
        raise ValueError(f"mel_channels={mel_channels} exceeds the {num_bins} frequency bins")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), mel_channels + 2))
    freqs = np.arange(num_bins) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mean_variance_normalize(features: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Utterance-level per-dimension mean and variance normalization of (T, D) features.

    Dimensions whose standard deviation is at or below ``floor`` are constant
    up to rounding and map to zero.
    """
    centered = features - features.mean(axis=0)
    std = features.std(axis=0)
    live = std > floor
    return np.where(live, centered / np.where(live, std, 1.0), 0.0)


def log_mel_features(signal, cfg: StftConfig | None = None, mel_channels: int = 40,
                     apply_mvn: bool = True, sample_rate: int | None = None) -> FeatureMatrix:
    """``MVN(log(sum_f b[k, f] |X[t, f]|^2))`` for a single-channel signal."""
    if not isinstance(signal, TimeSignal):
        if sample_rate is None:
            raise ValueError("sample_rate is required for raw arrays")
        signal = TimeSignal(np.asarray(signal, dtype=float), sample_rate)
    if signal.num_channels != 1:
        raise ValueError("log-Mel features need a single-channel signal")
    cfg = cfg or FEATURE_STFT
    spec = stft(signal, cfg).data[:, :, 0]
    bank = mel_filterbank(mel_channels, cfg.fft_size, signal.sample_rate)
    energies = (np.abs(spec) ** 2) @ bank.T
    features = np.log(np.maximum(energies, LOG_FLOOR))
    if apply_mvn:
        features = mean_variance_normalize(features)
    return FeatureMatrix(features, mel_channels, apply_mvn)
