"""Short-time Fourier analysis and overlap-add synthesis.

Shapes used throughout the package:
    TimeSignal.samples        (M, L)   channels x samples
    ComplexSpectrogram.data   (T, F, M) frames x frequency bins x channels

The analysis pads the signal by ``window_length - shift`` samples on both
sides (reflect mode), so every original sample is covered by the full
complement of ``window_length / shift`` windows and the inverse transform
reconstructs the whole signal, not just its interior.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WINDOWS = ("sqrt_hann", "hann", "rect")


@dataclass(frozen=True)
class TimeSignal:
    """Multi-channel waveform, ``samples`` has shape (channels, length)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"samples must be (channels, length), got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise ValueError("a signal needs at least one channel")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> "TimeSignal":
        return TimeSignal(self.samples[index:index + 1], self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 512
    shift: int = 128
    window: str = "sqrt_hann"
    fft_size: int | None = None

    def __post_init__(self):
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.window_length)
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}, expected one of {WINDOWS}")
        if not 0 < self.shift <= self.window_length <= self.fft_size:
            raise ValueError(
                "need 0 < shift <= window_length <= fft_size, got "
                f"shift={self.shift}, window_length={self.window_length}, fft_size={self.fft_size}"
            )
        if self.window_length % self.shift or self.window_length // self.shift < 2:
            raise ValueError(
                f"window_length / shift must be an integer >= 2, got {self.window_length}/{self.shift}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_length - self.shift

    def num_frames(self, num_samples: int) -> int:
        return -(-(num_samples + self.pad) // self.shift)

    def frequencies(self, sample_rate: int) -> np.ndarray:
        return np.arange(self.num_bins) * sample_rate / self.fft_size


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided STFT, ``data`` has shape (frames, bins, channels).

    ``num_samples`` remembers the length of the analysed signal so the
    inverse transform can trim its padding; it is ``None`` for spectrograms
    that were not produced by :func:`stft`.
    """

    data: np.ndarray
    config: StftConfig
    sample_rate: int
    num_samples: int | None = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"spectrogram data must be (frames, bins, channels), got {data.shape}")
        if data.shape[1] != self.config.num_bins:
            raise ValueError(
                f"expected {self.config.num_bins} frequency bins for fft_size "
                f"{self.config.fft_size}, got {data.shape[1]}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_bins(self) -> int:
        return self.data.shape[1]

    @property
    def num_channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(data, self.config, self.sample_rate, self.num_samples)


def analysis_window(cfg: StftConfig) -> np.ndarray:
    n = np.arange(cfg.window_length)
    # periodic Hann: the shifted copies sum to a constant for shift | length
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.window_length)
    if cfg.window == "sqrt_hann":
        return np.sqrt(hann)
    if cfg.window == "hann":
        return hann
    return np.ones(cfg.window_length)


def synthesis_window(cfg: StftConfig) -> np.ndarray:
    """Dual window of the analysis window for overlap-add with ``cfg.shift``.

    For sqrt-Hann this is the analysis window scaled by ``2 * shift / N``.
    """
    window = analysis_window(cfg)
    overlap = np.zeros(cfg.shift)
    for start in range(0, cfg.window_length, cfg.shift):
        overlap += window[start:start + cfg.shift] ** 2
    return window / np.tile(overlap, cfg.window_length // cfg.shift)


def stft(signal: TimeSignal, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    """Transform a multi-channel signal to a (T, F, M) spectrogram."""
    cfg = cfg or StftConfig()
    x = signal.samples
    length = x.shape[1]
    if length == 0:
        raise ValueError("cannot transform an empty signal")

    num_frames = cfg.num_frames(length)
    padded = np.pad(x, ((0, 0), (cfg.pad, cfg.pad)), mode="reflect" if length > 1 else "edge")
    total = (num_frames - 1) * cfg.shift + cfg.window_length
    padded = np.pad(padded, ((0, 0), (0, total - padded.shape[1])))

    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_length, axis=1)
    frames = frames[:, ::cfg.shift][:, :num_frames]  # (M, T, N)
    spec = np.fft.rfft(frames * analysis_window(cfg), n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(spec.transpose(1, 2, 0), cfg, signal.sample_rate, length)


def istft(spec: ComplexSpectrogram, num_samples: int | None = None) -> TimeSignal:
    """Overlap-add synthesis; inverse of :func:`stft` up to rounding."""
    cfg = spec.config
    if spec.num_bins != cfg.num_bins:
        raise ValueError("spectrogram does not match its configuration")
    if num_samples is None:
        num_samples = spec.num_samples
    if num_samples is None:
        num_samples = spec.num_frames * cfg.shift - cfg.pad

    frames = np.fft.irfft(spec.data.transpose(2, 0, 1), n=cfg.fft_size, axis=-1)
    frames = frames[..., :cfg.window_length] * synthesis_window(cfg)

    num_channels, num_frames = frames.shape[:2]
    total = (num_frames - 1) * cfg.shift + cfg.window_length
    out = np.zeros((num_channels, total))
    ratio = cfg.window_length // cfg.shift
    # frames t, t+ratio, ... never overlap, so each phase is one reshape-add
    for phase in range(ratio):
        block = frames[:, phase::ratio]
        start = phase * cfg.shift
        stop = start + block.shape[1] * cfg.window_length
        out[:, start:stop] += block.reshape(num_channels, -1)

    out = out[:, cfg.pad:cfg.pad + num_samples]
    if out.shape[1] < num_samples:
        out = np.pad(out, ((0, 0), (0, num_samples - out.shape[1])))
    return TimeSignal(out, spec.sample_rate)
