"""Time-frequency masks: oracle IBMs and cACGMM spatial clustering.

Masks are stored as (C, T, F) arrays. With ``I`` sources the class count
is ``C = I + 1`` and, by convention, the last class is the noise class.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from .stft import ComplexSpectrogram

log = logging.getLogger(__name__)


@dataclass
class MaskSet:
    masks: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=float)
        if masks.ndim != 3:
            raise ValueError(f"masks must be (classes, frames, bins), got {masks.shape}")
        if np.any(masks < 0) or np.any(masks > 1):
            raise ValueError("mask values must lie in [0, 1]")
        self.masks = masks

    @property
    def num_classes(self) -> int:
        return self.masks.shape[0]

    def __getitem__(self, c):
        return self.masks[c]

    def permuted(self, order) -> "MaskSet":
        return MaskSet(self.masks[list(order)])


@dataclass
class CacgmmState:
    """Fitted complex angular central Gaussian mixture.

    Attributes:
        weights: class priors, shape (F, C).
        shapes: shape matrices, (F, C, M, M), Hermitian with trace M.
        log_likelihood: total log-likelihood after each E-step.
        permutation: (F, C) class order applied by frequency alignment;
            ``aligned[c, :, f] = raw[permutation[f, c], :, f]``.
    """

    weights: np.ndarray
    shapes: np.ndarray
    log_likelihood: np.ndarray
    permutation: np.ndarray = field(default=None)


def ideal_binary_mask(images) -> MaskSet:
    """One-hot mask selecting the class with the largest multichannel power.

    Args:
        images: sequence of per-class ComplexSpectrogram (or (T, F, M)
            arrays), e.g. source early images followed by the residual.
            Ties go to the lowest class index.
    """
    data = [im.data if isinstance(im, ComplexSpectrogram) else np.asarray(im) for im in images]
    if len(data) < 2:
        raise ValueError("an IBM needs at least two classes")
    if any(d.shape != data[0].shape for d in data):
        raise ValueError("all class images must have the same shape")
    power = np.stack([np.sum(np.abs(d) ** 2, axis=-1) for d in data])
    winner = np.argmax(power, axis=0)
    masks = (winner[None] == np.arange(len(data))[:, None, None]).astype(float)
    return MaskSet(masks)


def _unit_vectors(y):
    """Project (T, M) observations onto the unit sphere; zero rows stay zero."""
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    valid = norm[..., 0] > 0
    z = np.where(norm > 0, y / np.where(norm > 0, norm, 1.0), 0.0)
    return z, valid


def _acg_quadratic_form(z, shapes, eigenvalue_floor):
    """Stabilised shapes, their log-determinants and ``z^H B^-1 z``.

    Args:
        z: (T, M) unit vectors.
        shapes: (C, M, M) Hermitian matrices.
    """
    num_channels = shapes.shape[-1]
    shapes = 0.5 * (shapes + np.swapaxes(shapes.conj(), -1, -2))
    vals, vecs = np.linalg.eigh(shapes)
    floor = eigenvalue_floor * np.trace(shapes, axis1=-2, axis2=-1).real / num_channels
    vals = np.maximum(vals, floor[:, None])
    # (C, T, M): projections of z on the eigenvectors
    proj = np.einsum("cmk,tm->ctk", vecs.conj(), z)
    quad = np.einsum("ctk,ck->ct", np.abs(proj) ** 2, 1.0 / vals)
    logdet = np.sum(np.log(vals), axis=-1)
    stable = np.einsum("cmk,ck,cnk->cmn", vecs, vals, vecs.conj())
    return stable, logdet, quad


def _log_acg(logdet, quad, num_channels):
    # log of Gamma(M) / (2 pi^M det B) * (z^H B^-1 z)^-M on the unit sphere
    const = gammaln(num_channels) - math.log(2.0) - num_channels * math.log(math.pi)
    return const - logdet[:, None] - num_channels * np.log(np.maximum(quad, 1e-300))


def _m_step(z, valid, gamma, shapes, quad, eigenvalue_floor):
    """Prior update and one fixed-point step for the shape matrices."""
    num_channels = z.shape[-1]
    w = gamma * valid[None, :]
    mass = w.sum(axis=1)
    weights = mass / max(mass.sum(), 1e-300)
    new = num_channels * np.einsum("ct,tm,tn->cmn", w / np.maximum(quad, 1e-300), z, z.conj())
    new /= np.maximum(mass, 1e-300)[:, None, None]
    trace = np.trace(new, axis1=-2, axis2=-1).real
    empty = trace <= 0
    new[empty] = shapes[empty]
    trace[empty] = np.trace(shapes[empty], axis1=-2, axis2=-1).real
    new *= (num_channels / trace)[:, None, None]
    return weights, new


def cacgmm_single_frequency(y, num_classes, iterations, initialization, eigenvalue_floor=1e-10):
    """EM for a cACG mixture on one frequency bin.

    Args:
        y: observations (T, M).
        initialization: initial posteriors (C, T).

    Returns:
        ``(posteriors (C, T), weights (C,), shapes (C, M, M),
        log_likelihood (iterations,))``.
    """
    num_frames, num_channels = y.shape
    z, valid = _unit_vectors(y)
    gamma = np.asarray(initialization, dtype=float).copy()
    shapes = np.broadcast_to(np.eye(num_channels, dtype=complex), (num_classes, num_channels, num_channels)).copy()
    if not valid.any():
        uniform = np.full((num_classes, num_frames), 1.0 / num_classes)
        weights = np.full(num_classes, 1.0 / num_classes)
        return uniform, weights, shapes, np.zeros(iterations)

    _, _, quad = _acg_quadratic_form(z, shapes, eigenvalue_floor)
    history = np.zeros(iterations)
    for it in range(iterations):
        weights, shapes = _m_step(z, valid, gamma, shapes, quad, eigenvalue_floor)
        shapes, logdet, quad = _acg_quadratic_form(z, shapes, eigenvalue_floor)
        with np.errstate(divide="ignore"):
            log_joint = np.log(weights)[:, None] + _log_acg(logdet, quad, num_channels)
        top = np.max(log_joint, axis=0)
        log_evidence = top + np.log(np.sum(np.exp(log_joint - top), axis=0))
        gamma = np.exp(log_joint - log_evidence)
        # zero-norm bins carry no spatial information: fall back to the priors
        gamma[:, ~valid] = weights[:, None]
        history[it] = np.sum(log_evidence[valid])
    return gamma, weights, shapes, history


def dirichlet_initialization(num_classes, num_frames, num_bins, seed):
    rng = np.random.default_rng(seed)
    return np.moveaxis(rng.dirichlet(np.ones(num_classes), size=(num_frames, num_bins)), -1, 0)


def cacgmm_em(observation, num_classes: int, iterations: int = 20, seed: int = 0,
              initialization=None, align: bool = True, eigenvalue_floor: float = 1e-10):
    """Unsupervised spatial clustering with a cACG mixture per frequency.

    Args:
        observation: ComplexSpectrogram or (T, F, M) array with M >= 2.
        num_classes: number of mixture components C.
        iterations: EM iterations.
        seed: seeds the symmetric Dirichlet draw of the initial posteriors.
        initialization: optional initial posteriors (C, T, F) replacing the
            random draw.
        align: resolve the per-frequency label permutation afterwards.

    Returns:
        ``(MaskSet, CacgmmState)``.
    """
    y = observation.data if isinstance(observation, ComplexSpectrogram) else np.asarray(observation)
    num_frames, num_bins, num_channels = y.shape
    if num_channels < 2:
        raise ValueError("spatial clustering needs at least two channels")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if num_classes > num_frames:
        raise ValueError(f"num_classes={num_classes} exceeds the number of frames {num_frames}")
    if initialization is None:
        initialization = dirichlet_initialization(num_classes, num_frames, num_bins, seed)
    initialization = np.asarray(initialization, dtype=float)
    if initialization.shape != (num_classes, num_frames, num_bins):
        raise ValueError(f"initialization must have shape {(num_classes, num_frames, num_bins)}")

    posteriors = np.zeros((num_classes, num_frames, num_bins))
    weights = np.zeros((num_bins, num_classes))
    shapes = np.zeros((num_bins, num_classes, num_channels, num_channels), dtype=complex)
    history = np.zeros(iterations)
    for f in range(num_bins):
        if not np.any(y[:, f]):
            log.warning("frequency bin %d is all zero; returning uniform posteriors", f)
        gamma, pi, b, ll = cacgmm_single_frequency(
            y[:, f], num_classes, iterations, initialization[:, :, f], eigenvalue_floor
        )
        posteriors[:, :, f] = gamma
        weights[f], shapes[f] = pi, b
        history += ll

    masks = MaskSet(np.clip(posteriors, 0.0, 1.0))
    permutation = np.tile(np.arange(num_classes), (num_bins, 1))
    if align and num_classes > 1:
        masks, permutation = align_frequency_permutations(masks, return_permutation=True)
        weights = np.take_along_axis(weights, permutation, axis=1)
        shapes = np.take_along_axis(shapes, permutation[:, :, None, None], axis=1)
    return masks, CacgmmState(weights, shapes, history, permutation)


def _profile_correlation(reference, candidate):
    """Pearson correlation matrix between (C, T) activity profiles."""
    def standardize(p):
        p = p - p.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(p, axis=1, keepdims=True)
        return p / np.where(norm > 0, norm, 1.0)

    return standardize(reference) @ standardize(candidate).T


def align_frequency_permutations(masks, return_permutation: bool = False):
    """Greedy frequency permutation alignment of per-bin class posteriors.

    Bins are visited outward from the most confident one (largest mean of
    the per-bin maximum posterior). Each visited bin gets the class
    permutation that maximises the summed correlation between its
    temporal activity profiles and the mean profile of the bins aligned so
    far.
    """
    masks = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks, dtype=float)
    num_classes, _, num_bins = masks.shape
    permutation = np.tile(np.arange(num_classes), (num_bins, 1))
    if num_classes < 2:
        aligned = MaskSet(masks.copy())
        return (aligned, permutation) if return_permutation else aligned

    confidence = masks.max(axis=0).mean(axis=0)
    start = int(np.argmax(confidence))
    order = [start]
    for step in range(1, num_bins):
        for f in (start - step, start + step):
            if 0 <= f < num_bins:
                order.append(f)

    aligned = masks.copy()
    profile_sum = masks[:, :, start].copy()
    for f in order[1:]:
        corr = _profile_correlation(profile_sum, masks[:, :, f])
        rows, cols = linear_sum_assignment(corr, maximize=True)
        perm = cols[np.argsort(rows)]
        permutation[f] = perm
        aligned[:, :, f] = masks[perm, :, f]
        profile_sum += aligned[:, :, f]
    result = MaskSet(aligned)
    return (result, permutation) if return_permutation else result


def identify_noise_class(masks) -> int:
    """Index of the class whose temporal activity is flattest.

    Flatness is the coefficient of variation of the frequency-averaged
    mask over time; the smallest value marks the noise class.
    """
    masks = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    profile = masks.mean(axis=2)
    cv = profile.std(axis=1) / np.maximum(profile.mean(axis=1), 1e-12)
    return int(np.argmin(cv))


def move_class_last(masks, index: int) -> MaskSet:
    masks = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    order = [c for c in range(masks.shape[0]) if c != index] + [index]
    return MaskSet(masks[order])
