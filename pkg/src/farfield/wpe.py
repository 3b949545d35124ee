"""Weighted prediction error (WPE) dereverberation, offline variant.

Every frequency bin is processed independently. For one bin with
observation ``y`` of shape (T, M) the algorithm alternates

1. variance update: ``lambda[t]`` is the channel mean of ``|d[t]|**2``
   averaged over a +-``context`` frame window (truncated and renormalised
   at the edges), floored at ``variance_floor``;
2. filter update: with the stacked delayed history
   ``ybar[t] = [y[t-delay], ..., y[t-delay-taps+1]]`` (zeros before frame
   0) solve ``R C = P`` where ``R = sum_t ybar ybar^H / lambda`` and
   ``P = sum_t ybar y^H / lambda``, then ``d = y - C^H ybar``.

The variance is initialised from the observation itself.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .stft import ComplexSpectrogram

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 6
    iterations: int = 3
    context: int = 1
    variance_floor: float = 1e-10
    diagonal_loading: float = 1e-6

    def __post_init__(self):
        if self.taps < 1:
            raise ValueError("taps must be >= 1")
        if self.delay < 1:
            raise ValueError("delay must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.context < 0:
            raise ValueError("context must be >= 0")
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be positive")
        if self.diagonal_loading < 0:
            raise ValueError("diagonal_loading must be >= 0")


@dataclass
class WpeResult:
    """Output of :func:`wpe`.

    Attributes:
        dereverberated: spectrogram of shape (T, F, M).
        filters: stacked prediction filters, shape (F, M * taps, M). Row
            ``k * M + m`` holds the coefficients applied to channel ``m``
            delayed by ``delay + k`` frames.
        variances: final variance estimate, shape (T, F).
        objective: negative log-likelihood after each iteration's filter
            update, summed over frequency.
    """

    dereverberated: ComplexSpectrogram
    filters: np.ndarray
    variances: np.ndarray
    objective: np.ndarray


def stack_history(y: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """Delayed stacked observation vectors.

    Args:
        y: observation of one frequency bin, shape (T, M), or (T, F, M).

    Returns:
        Array with the last axis of size ``M * taps``; entry ``[t, k*M + m]``
        is ``y[t - delay - k, m]`` (zero when the index is negative).
    """
    num_frames = y.shape[0]
    out = np.zeros(y.shape[:-1] + (taps * y.shape[-1],), dtype=np.result_type(y, np.complex128))
    num_channels = y.shape[-1]
    for k in range(taps):
        shift = delay + k
        if shift < num_frames:
            out[shift:, ..., k * num_channels:(k + 1) * num_channels] = y[:num_frames - shift]
    return out


def smooth_variance(power: np.ndarray, context: int, floor: float) -> np.ndarray:
    """Channel-mean power averaged over a +-``context`` frame window.

    Args:
        power: ``|d|**2`` of shape (T, ..., M).
    """
    power = power.mean(axis=-1)
    if context > 0:
        num_frames = power.shape[0]
        csum = np.concatenate([np.zeros((1,) + power.shape[1:]), np.cumsum(power, axis=0)])
        idx = np.arange(num_frames)
        lo = np.maximum(idx - context, 0)
        hi = np.minimum(idx + context + 1, num_frames)
        counts = (hi - lo).reshape((-1,) + (1,) * (power.ndim - 1))
        power = (csum[hi] - csum[lo]) / counts
    return np.maximum(power, floor)


def wpe_objective(observation, filters, variances, delay: int, floor: float | None = None) -> float:
    """Negative log-likelihood ``sum ||d||^2 / lambda + M log lambda`` (no constant).

    Args:
        observation: ComplexSpectrogram or array of shape (T, F, M).
        filters: stacked filters, shape (F, M * taps, M).
        variances: shape (T, F).
        delay: prediction delay in frames.
        floor: if given, raise when any variance is below it.
    """
    y = observation.data if isinstance(observation, ComplexSpectrogram) else np.asarray(observation)
    variances = np.asarray(variances, dtype=float)
    if floor is not None and np.any(variances < floor):
        raise ValueError("variance below the configured floor")
    if np.any(variances <= 0):
        raise ValueError("variances must be positive")
    num_channels = y.shape[-1]
    taps = filters.shape[1] // num_channels
    d = y - np.einsum("fkm,tfk->tfm", filters.conj(), stack_history(y, taps, delay))
    power = np.sum(np.abs(d) ** 2, axis=-1)
    return float(np.sum(power / variances + num_channels * np.log(variances)))


def _solve_filters(R, P, loading):
    """Hermitian solve of ``R C = P`` with relative diagonal loading.

    Returns ``None`` when the system is degenerate.
    """
    size = R.shape[0]
    scale = np.trace(R).real / size
    if not np.isfinite(scale) or scale <= 0:
        return None
    R = R + loading * scale * np.eye(size)
    try:
        factor = scipy.linalg.cho_factor(R, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, P, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    try:
        with np.errstate(all="ignore"):
            C = scipy.linalg.solve(R, P, assume_a="gen", check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    return C if np.all(np.isfinite(C)) else None


def filter_update(y, variances, taps, delay, loading=0.0):
    """Closed-form prediction filter for one bin at fixed variances.

    Args:
        y: observation (T, M).
        variances: (T,).

    Returns:
        ``(filters, dereverberated)`` with shapes (M*taps, M) and (T, M);
        filters are ``None`` if the normal equations are degenerate.
    """
    ybar = stack_history(y, taps, delay)
    weighted = ybar / variances[:, None]
    R = weighted.T @ ybar.conj()
    P = weighted.T @ y.conj()
    # R is Hermitian by construction; symmetrise away rounding
    R = 0.5 * (R + R.conj().T)
    C = _solve_filters(R, P, loading)
    if C is None:
        return None, y.copy()
    return C, y - ybar @ C.conj()


def wpe_single_frequency(y: np.ndarray, cfg: WpeConfig):
    """Run WPE on one frequency bin.

    Args:
        y: observation of shape (T, M).

    Returns:
        ``(d, filters, variances, objective_per_iteration)``.
    """
    num_frames, num_channels = y.shape
    size = num_channels * cfg.taps
    filters = np.zeros((size, num_channels), dtype=np.complex128)
    d = y.astype(np.complex128, copy=True)
    objective = np.zeros(cfg.iterations)
    if not np.any(y):
        variances = np.full(num_frames, cfg.variance_floor)
        objective[:] = num_frames * num_channels * np.log(cfg.variance_floor)
        return d, filters, variances, objective

    for it in range(cfg.iterations):
        variances = smooth_variance(np.abs(d) ** 2, cfg.context, cfg.variance_floor)
        C, d_new = filter_update(y, variances, cfg.taps, cfg.delay, cfg.diagonal_loading)
        if C is None:
            log.warning("WPE normal equations are degenerate; passing the bin through")
            filters[:] = 0
            d = y.astype(np.complex128, copy=True)
        else:
            filters, d = C, d_new
        power = np.sum(np.abs(d) ** 2, axis=-1)
        objective[it] = np.sum(power / variances + num_channels * np.log(variances))
    return d, filters, variances, objective


def wpe(observation: ComplexSpectrogram, cfg: WpeConfig | None = None, threads: int = 1) -> WpeResult:
    """Dereverberate a (T, F, M) spectrogram.

    Bins are independent; ``threads > 1`` maps them over a thread pool and
    gives bit-identical results.
    """
    cfg = cfg or WpeConfig()
    y = observation.data
    num_frames, num_bins, num_channels = y.shape
    if not np.all(np.isfinite(y)):
        raise ValueError("observation contains non-finite values")
    if num_frames <= cfg.delay + cfg.taps:
        raise ValueError(
            f"need more than delay + taps = {cfg.delay + cfg.taps} frames, got {num_frames}"
        )

    def run(f):
        return wpe_single_frequency(y[:, f, :], cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(num_bins)))
    else:
        results = [run(f) for f in range(num_bins)]

    d = np.stack([r[0] for r in results], axis=1)
    filters = np.stack([r[1] for r in results])
    variances = np.stack([r[2] for r in results], axis=1)
    objective = np.sum([r[3] for r in results], axis=0)
    return WpeResult(observation.with_data(d), filters, variances, objective)
