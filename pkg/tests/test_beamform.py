import numpy as np
import pytest

from farfield.beamform import (
    BeamformerWeights,
    BeamformingError,
    CovarianceSet,
    Rtf,
    apply_beamformer,
    blind_analytic_normalization,
    estimate_covariances,
    estimate_rtf,
    gev_weights,
    loaded,
    masked_covariance,
    mvdr_weights,
)
from farfield.masks import MaskSet
from farfield.stft import ComplexSpectrogram, StftConfig
from conftest import crandn
from oracles import apply_loop, constrained_min_variance, masked_covariance_loop


def random_pd(rng, num_bins, num_channels):
    a = crandn(rng, num_bins, num_channels, num_channels)
    return a @ np.swapaxes(a.conj(), -1, -2) + 0.1 * np.eye(num_channels)


def cov_set(target, interference):
    return CovarianceSet(target, interference, np.ones(len(target)))


def spec_of(y):
    fft_size = 2 * (y.shape[1] - 1)
    return ComplexSpectrogram(y, StftConfig(fft_size, fft_size // 2), 16000)


def test_full_mask_single_channel_is_mean_power():
    rng = np.random.default_rng(0)
    y = crandn(rng, 20, 3, 1)
    phi, mass = masked_covariance(y, np.ones((20, 3)))
    assert np.allclose(phi[:, 0, 0], np.mean(np.abs(y[:, :, 0]) ** 2, axis=0), rtol=1e-14)
    assert np.all(mass == 20)


def test_one_hot_frame_mask_gives_outer_product():
    rng = np.random.default_rng(1)
    y = crandn(rng, 10, 2, 3)
    mask = np.zeros((10, 2))
    mask[4] = 1
    phi, _ = masked_covariance(y, mask)
    for f in range(2):
        assert np.allclose(phi[f], np.outer(y[4, f], y[4, f].conj()), rtol=0, atol=1e-15)


def test_covariances_match_loop_oracle():
    rng = np.random.default_rng(2)
    y = crandn(rng, 16, 2, 3)
    masks = rng.dirichlet(np.ones(3), size=(16, 2)).transpose(2, 0, 1)
    cov = estimate_covariances(y, MaskSet(masks), 0)
    target = masked_covariance_loop(y, masks[0])
    interference = masked_covariance_loop(y, masks[1] + masks[2])
    assert np.max(np.abs(cov.phi_target - target)) <= 1e-12 * np.max(np.abs(target))
    assert np.max(np.abs(cov.phi_interference - interference)) <= 1e-12 * np.max(np.abs(interference))
    only_first = estimate_covariances(y, masks, 0, interference_classes=[1])
    oracle = masked_covariance_loop(y, masks[1])
    assert np.max(np.abs(only_first.phi_interference - oracle)) <= 1e-12 * np.max(np.abs(oracle))


def test_covariances_hermitian_psd():
    rng = np.random.default_rng(3)
    y = crandn(rng, 30, 5, 4)
    masks = rng.dirichlet(np.ones(2), size=(30, 5)).transpose(2, 0, 1)
    cov = estimate_covariances(y, masks, 1)
    for phi in (cov.phi_target, cov.phi_interference):
        assert np.allclose(phi, np.swapaxes(phi.conj(), -1, -2), atol=1e-10)
        trace = np.trace(phi, axis1=-2, axis2=-1).real
        assert np.all(np.linalg.eigvalsh(phi) >= -1e-8 * trace[:, None])


def test_zero_mask_mass_falls_back_to_uniform():
    rng = np.random.default_rng(4)
    y = crandn(rng, 12, 2, 2)
    mask = np.ones((12, 2))
    mask[:, 1] = 0
    phi, mass = masked_covariance(y, mask)
    assert mass[1] == 0
    assert np.allclose(phi[1], masked_covariance_loop(y, np.ones((12, 2)))[1])


def test_covariance_errors():
    y = np.ones((4, 2, 2), complex)
    with pytest.raises(ValueError):
        estimate_covariances(y, np.ones((2, 4, 3)) / 2, 0)
    with pytest.raises(ValueError):
        estimate_covariances(y, np.ones((2, 4, 2)) / 2, 0, interference_classes=[0, 1])


def test_rtf_from_rank_one():
    rng = np.random.default_rng(5)
    h = crandn(rng, 4, 3)
    phi = np.einsum("fm,fn->fmn", h, h.conj())
    rtf = estimate_rtf(cov_set(phi, np.eye(3)[None].repeat(4, 0)))
    assert np.allclose(rtf.vector, h / h[:, :1], atol=1e-10)
    assert np.all(rtf.vector[:, 0] == 1.0)


def test_rtf_of_identity_is_reference_vector():
    phi = np.eye(3)[None].repeat(2, 0).astype(complex)
    for ref in range(3):
        rtf = estimate_rtf(cov_set(phi, phi), reference_channel=ref)
        assert np.allclose(rtf.vector, np.eye(3)[ref])


def test_rtf_perturbation():
    rng = np.random.default_rng(6)
    h = crandn(rng, 6, 4)
    phi = np.einsum("fm,fn->fmn", h, h.conj()) + 1e-6 * np.eye(4)
    rtf = estimate_rtf(cov_set(phi, phi))
    assert np.max(np.abs(rtf.vector - h / h[:, :1])) < 1e-4


def test_rtf_with_interference_subtraction():
    rng = np.random.default_rng(7)
    h = crandn(rng, 3, 3)
    noise = random_pd(rng, 3, 3)
    target = np.einsum("fm,fn->fmn", h, h.conj()) + noise
    rtf = estimate_rtf(cov_set(target, noise), subtract_interference=True)
    assert np.allclose(rtf.vector, h / h[:, :1], atol=1e-9)


def test_rtf_dead_reference_channel():
    h = np.array([[0.0, 1.0, 1.0]], complex)
    phi = np.einsum("fm,fn->fmn", h, h.conj())
    with pytest.raises(BeamformingError):
        estimate_rtf(cov_set(phi, phi))


def test_mvdr_single_channel_is_passthrough():
    rng = np.random.default_rng(8)
    phi = np.abs(crandn(rng, 5, 1, 1)) + 0.1
    w = mvdr_weights(cov_set(phi, phi), Rtf(np.ones((5, 1), complex)))
    assert np.allclose(w.w, 1.0)


def test_mvdr_white_interference_is_matched_filter():
    rng = np.random.default_rng(9)
    h = crandn(rng, 4, 3)
    h /= h[:, :1]
    eye = np.eye(3)[None].repeat(4, 0).astype(complex)
    w = mvdr_weights(cov_set(eye, eye), Rtf(h), loading=0.0)
    expected = h / np.sum(np.abs(h) ** 2, axis=1, keepdims=True)
    assert np.allclose(w.w, expected, atol=1e-14)


def test_mvdr_matches_constrained_oracle_and_is_distortionless():
    rng = np.random.default_rng(10)
    phi = random_pd(rng, 6, 4)
    h = crandn(rng, 6, 4)
    h /= h[:, :1]
    w = mvdr_weights(cov_set(phi, phi), Rtf(h))
    distortion = np.einsum("fm,fm->f", w.w.conj(), h)
    assert np.max(np.abs(distortion - 1)) < 1e-8
    phi_loaded = loaded(phi)
    for f in range(6):
        oracle = constrained_min_variance(phi_loaded[f], h[f])
        assert np.max(np.abs(w.w[f] - oracle)) <= 1e-8 * np.max(np.abs(oracle))


def test_mvdr_first_order_stationarity():
    rng = np.random.default_rng(11)
    phi = random_pd(rng, 4, 4)
    h = crandn(rng, 4, 4)
    h /= h[:, :1]
    w = mvdr_weights(cov_set(phi, phi), Rtf(h)).w
    phi_loaded = loaded(phi)
    for f in range(4):
        base = np.vdot(w[f], phi_loaded[f] @ w[f]).real
        delta = crandn(rng, 1000, 4)
        # project onto the constraint null space {delta : delta^H h = 0}
        delta -= np.outer(delta @ h[f].conj(), h[f]) / np.vdot(h[f], h[f]).real
        delta *= 1e-3 / np.linalg.norm(delta, axis=1, keepdims=True)
        perturbed = w[f] + delta
        assert np.max(np.abs(perturbed.conj() @ h[f] - 1)) < 1e-8
        values = np.einsum("km,mn,kn->k", perturbed.conj(), phi_loaded[f], perturbed).real
        assert np.all(values - base >= -1e-10)


def test_mvdr_distortionless_on_synthetic_spectrogram():
    rng = np.random.default_rng(12)
    h = crandn(rng, 5, 3)
    h /= h[:, :1]
    s = crandn(rng, 40, 5)
    y = h[None] * s[:, :, None]
    w = mvdr_weights(cov_set(random_pd(rng, 5, 3), random_pd(rng, 5, 3)), Rtf(h))
    out = apply_beamformer(spec_of(y), w).data[:, :, 0]
    assert np.allclose(out, s, atol=1e-10)


def test_gev_diagonal_case():
    target = np.diag([2.0, 1.0]).astype(complex)[None]
    noise = np.eye(2, dtype=complex)[None]
    w = gev_weights(cov_set(target, noise)).w[0]
    assert np.allclose(w, [1.0, 0.0])
    target = np.diag([1.0, 2.0, 1.0]).astype(complex)[None]
    assert np.allclose(gev_weights(cov_set(target, np.eye(3)[None])).w[0], [0, 1, 0])


def test_gev_equal_covariances_tie_rule():
    rng = np.random.default_rng(13)
    phi = random_pd(rng, 3, 3)
    for ref in range(3):
        w = gev_weights(cov_set(phi, phi), reference_channel=ref, loading=0.0).w
        assert np.allclose(w, np.eye(3)[ref], atol=1e-8)


def test_gev_beats_random_directions():
    rng = np.random.default_rng(14)
    target = random_pd(rng, 3, 3)
    noise = random_pd(rng, 3, 3)
    w = gev_weights(cov_set(target, noise), loading=0.0).w
    for f in range(3):
        def ratio(v):
            return (np.einsum("km,mn,kn->k", v.conj(), target[f], v).real
                    / np.einsum("km,mn,kn->k", v.conj(), noise[f], v).real)
        best = ratio(w[f][None])[0]
        candidates = crandn(rng, 10000, 3)
        candidates /= np.linalg.norm(candidates, axis=1, keepdims=True)
        assert best >= ratio(candidates).max()
        scales = crandn(rng, 10, 1)
        assert np.allclose(ratio(scales * w[f][None]), best, rtol=1e-12)


def test_gev_normalisation():
    rng = np.random.default_rng(15)
    w = gev_weights(cov_set(random_pd(rng, 4, 3), random_pd(rng, 4, 3))).w
    assert np.allclose(np.linalg.norm(w, axis=1), 1.0)
    assert np.all(np.abs(w[:, 0].imag) < 1e-15) and np.all(w[:, 0].real >= 0)


def test_gev_rejects_indefinite_interference():
    bad = -np.eye(2, dtype=complex)[None]
    with pytest.raises(BeamformingError):
        gev_weights(cov_set(np.eye(2)[None], bad))


def test_apply_selector_and_loop_oracle():
    rng = np.random.default_rng(16)
    y = crandn(rng, 12, 3, 4)
    selector = np.zeros((3, 4), complex)
    selector[:, 0] = 1
    out = apply_beamformer(spec_of(y), BeamformerWeights(selector, "mvdr_rtf"))
    assert np.array_equal(out.data[:, :, 0], y[:, :, 0])
    w = crandn(rng, 3, 4)
    fast = apply_beamformer(spec_of(y), w).data[:, :, 0]
    slow = apply_loop(y, w)
    assert np.max(np.abs(fast - slow)) <= 1e-12 * np.max(np.abs(slow))
    with pytest.raises(ValueError):
        apply_beamformer(spec_of(y), crandn(rng, 3, 2))


def test_blind_analytic_normalization_gain():
    rng = np.random.default_rng(17)
    noise = random_pd(rng, 2, 3)
    weights = BeamformerWeights(crandn(rng, 2, 3), "gev")
    out = blind_analytic_normalization(weights, cov_set(noise, noise))
    for f in range(2):
        w = weights.w[f]
        pw = noise[f] @ w
        gain = np.sqrt(np.vdot(pw, pw).real / 3) / np.vdot(w, pw).real
        assert np.allclose(out.w[f], gain * w)
