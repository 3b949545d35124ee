"""Mask-based spatial covariance estimation and MVDR / GEV beamforming.

Shapes: covariances (F, M, M), steering vectors and weights (F, M).
The beamformer output is ``w[f]^H y[t, f]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .masks import MaskSet
from .stft import ComplexSpectrogram

log = logging.getLogger(__name__)

LOADING = 1e-6  # relative to trace / M
TIE_TOLERANCE = 1e-10


class BeamformingError(ValueError):
    """Raised when a beamformer cannot be computed from the statistics."""


@dataclass
class CovarianceSet:
    phi_target: np.ndarray
    phi_interference: np.ndarray
    mask_mass: np.ndarray
    interference_mass: np.ndarray | None = None


@dataclass
class Rtf:
    vector: np.ndarray
    reference_channel: int = 0


@dataclass
class BeamformerWeights:
    w: np.ndarray
    kind: str
    reference_channel: int = 0


def _hermitize(phi):
    return 0.5 * (phi + np.swapaxes(phi.conj(), -1, -2))


def masked_covariance(y, mask):
    """``sum_t mask y y^H / sum_t mask`` per frequency.

    Args:
        y: (T, F, M) observations.
        mask: (T, F) weights.

    Returns:
        ``(phi, mass)`` with shapes (F, M, M) and (F,). Frequencies with
        zero mask mass fall back to uniform weights.
    """
    mask = np.asarray(mask, dtype=float)
    mass = mask.sum(axis=0)
    dead = mass <= 0
    if np.any(dead):
        log.warning("zero mask mass at %d frequencies; using uniform weights there", int(dead.sum()))
        mask = mask.copy()
        mask[:, dead] = 1.0
    norm = mask.sum(axis=0)
    phi = np.einsum("tf,tfm,tfn->fmn", mask, y, y.conj()) / norm[:, None, None]
    return _hermitize(phi), mass


def estimate_covariances(spec, masks, target_class: int, interference_classes=None) -> CovarianceSet:
    """Target and interference spatial covariances from class masks.

    ``interference_classes`` defaults to every class except the target;
    their masks are summed.
    """
    y = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    masks = masks.masks if isinstance(masks, MaskSet) else np.asarray(masks)
    if masks.shape[1:] != y.shape[:2]:
        raise ValueError(f"mask shape {masks.shape[1:]} does not match spectrogram {y.shape[:2]}")
    if interference_classes is None:
        interference_classes = [c for c in range(masks.shape[0]) if c != target_class]
    interference_classes = list(interference_classes)
    if target_class in interference_classes:
        raise ValueError("the target class cannot also be an interference class")
    phi_target, mass = masked_covariance(y, masks[target_class])
    phi_interference, imass = masked_covariance(y, masks[interference_classes].sum(axis=0))
    return CovarianceSet(phi_target, phi_interference, mass, imass)


def _principal_vector(matrix, pivot):
    """Principal eigenvector of a Hermitian matrix with a deterministic tie rule.

    A degenerate top eigenspace is represented by the projection of
    ``pivot`` (a vector, or a channel index meaning that unit vector) onto
    it, which does not depend on the basis the eigensolver returns.
    """
    vals, vecs = np.linalg.eigh(matrix)
    top = vals[-1]
    tied = vals >= top - TIE_TOLERANCE * max(abs(top), np.finfo(float).tiny)
    if tied.sum() == 1:
        return vecs[:, -1]
    basis = vecs[:, tied]
    if np.ndim(pivot) == 0:
        return basis @ basis[pivot].conj()
    return basis @ (basis.conj().T @ pivot)


def estimate_rtf(cov: CovarianceSet, reference_channel: int = 0, subtract_interference: bool = False) -> Rtf:
    """Relative transfer function from the principal eigenvector of the target covariance."""
    phi = cov.phi_target - cov.phi_interference if subtract_interference else cov.phi_target
    phi = _hermitize(phi)
    out = np.zeros(phi.shape[:2], dtype=complex)
    for f in range(phi.shape[0]):
        h = _principal_vector(phi[f], reference_channel)
        if abs(h[reference_channel]) <= 1e-12 * np.linalg.norm(h):
            raise BeamformingError(
                f"reference channel {reference_channel} is dead at frequency {f}"
            )
        out[f] = h / h[reference_channel]
        out[f, reference_channel] = 1.0
    return Rtf(out, reference_channel)


def loaded(phi, loading=LOADING):
    """Add ``loading * trace / M`` to the diagonal of each (M, M) matrix."""
    num_channels = phi.shape[-1]
    trace = np.trace(phi, axis1=-2, axis2=-1).real
    return phi + (loading * trace / num_channels)[..., None, None] * np.eye(num_channels)


def mvdr_weights(cov: CovarianceSet, rtf: Rtf, loading: float = LOADING) -> BeamformerWeights:
    """``w = Phi^-1 h / (h^H Phi^-1 h)`` with diagonally loaded interference covariance."""
    phi = loaded(cov.phi_interference, loading)
    h = rtf.vector
    try:
        num = np.linalg.solve(phi, h[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise BeamformingError("interference covariance is singular after loading") from exc
    denom = np.einsum("fm,fm->f", h.conj(), num)
    if not np.all(np.isfinite(num)) or np.any(np.abs(denom) == 0):
        raise BeamformingError("interference covariance is singular after loading")
    return BeamformerWeights(num / denom[:, None], "mvdr_rtf", rtf.reference_channel)


def gev_weights(cov: CovarianceSet, reference_channel: int = 0, loading: float = LOADING) -> BeamformerWeights:
    """Max-SNR beamformer: principal generalized eigenvector of (Phi_dd, Phi_nn).

    Solved in the whitened domain ``L^-1 Phi_dd L^-H`` with ``Phi_nn = L L^H``.
    When the top generalized eigenvalue is degenerate the weight is the
    Phi_nn-orthogonal projection of the reference unit vector onto that
    eigenspace (``e_ref`` itself when ``Phi_dd`` is proportional to
    ``Phi_nn``). Weights are scaled to unit norm with a real, non-negative reference
    component.
    """
    phi_n = _hermitize(loaded(cov.phi_interference, loading))
    phi_d = _hermitize(cov.phi_target)
    num_bins, num_channels = phi_d.shape[:2]
    w = np.zeros((num_bins, num_channels), dtype=complex)
    for f in range(num_bins):
        try:
            chol = np.linalg.cholesky(phi_n[f])
        except np.linalg.LinAlgError as exc:
            raise BeamformingError(f"interference covariance not positive definite at frequency {f}") from exc
        inv = np.linalg.inv(chol)
        whitened = _hermitize(inv @ phi_d[f] @ inv.conj().T)
        # ties: project the whitened reference direction L^H e_ref
        u = _principal_vector(whitened, chol[reference_channel].conj())
        v = inv.conj().T @ u
        v /= np.linalg.norm(v)
        ref = v[reference_channel]
        if abs(ref) > 0:
            v *= abs(ref) / ref
        w[f] = v
    return BeamformerWeights(w, "gev", reference_channel)


def blind_analytic_normalization(weights: BeamformerWeights, cov: CovarianceSet) -> BeamformerWeights:
    """Scale each ``w`` by ``sqrt(w^H Phi Phi w / M) / (w^H Phi w)`` with the interference covariance."""
    phi = cov.phi_interference
    w = weights.w
    num_channels = w.shape[-1]
    pw = np.einsum("fmn,fn->fm", phi, w)
    num = np.sqrt(np.einsum("fm,fm->f", pw.conj(), pw).real / num_channels)
    den = np.einsum("fm,fm->f", w.conj(), pw).real
    gain = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return BeamformerWeights(w * gain[:, None], weights.kind, weights.reference_channel)


def apply_beamformer(spec: ComplexSpectrogram, weights: BeamformerWeights) -> ComplexSpectrogram:
    w = weights.w if isinstance(weights, BeamformerWeights) else np.asarray(weights)
    if w.shape != (spec.num_bins, spec.num_channels):
        raise ValueError(f"weights of shape {w.shape} do not match spectrogram (F, M) = "
                         f"{(spec.num_bins, spec.num_channels)}")
    out = np.einsum("fm,tfm->tf", w.conj(), spec.data)
    return spec.with_data(out[..., None])
