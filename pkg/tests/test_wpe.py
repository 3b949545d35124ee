import numpy as np
import pytest

from farfield.metrics import sdr
from farfield.scene import RoomSpec, SceneSpec, render_scene, speech_like
from farfield.stft import ComplexSpectrogram, StftConfig, istft, stft
from farfield.wpe import (
    WpeConfig,
    filter_update,
    smooth_variance,
    stack_history,
    wpe,
    wpe_objective,
    wpe_single_frequency,
)
from conftest import crandn
from oracles import wpe_normal_equations

TINY_FLOOR = 1e-300


def as_spec(y, fft_size=None):
    """Wrap a (T, F, M) array in a spectrogram whose config matches F."""
    num_bins = y.shape[1]
    fft_size = fft_size or 2 * (num_bins - 1)
    cfg = StftConfig(fft_size, fft_size // 2)
    return ComplexSpectrogram(y, cfg, 16000)


def bin_objective(y, filters, variances, delay):
    return wpe_objective(y[:, None, :], filters[None], variances[:, None], delay)


def half_step_trace(y, taps, delay, iterations, loading):
    """Objective after every variance update and every filter update of one bin."""
    num_channels = y.shape[1]
    filters = np.zeros((taps * num_channels, num_channels), complex)
    d = y.copy()
    trace = []
    variances = smooth_variance(np.abs(d) ** 2, 0, TINY_FLOOR)
    trace.append(bin_objective(y, filters, variances, delay))
    for _ in range(iterations):
        filters, d = filter_update(y, variances, taps, delay, loading)
        trace.append(bin_objective(y, filters, variances, delay))
        variances = smooth_variance(np.abs(d) ** 2, 0, TINY_FLOOR)
        trace.append(bin_objective(y, filters, variances, delay))
    return np.array(trace)


def test_stack_history_layout():
    y = np.arange(1, 13).reshape(6, 2).astype(complex)
    stacked = stack_history(y, taps=2, delay=1)
    # row t holds [y[t-1, 0], y[t-1, 1], y[t-2, 0], y[t-2, 1]]
    assert stacked[3].tolist() == [y[2, 0], y[2, 1], y[1, 0], y[1, 1]]
    assert not np.any(stacked[0]) and not np.any(stacked[1, 2:])


@pytest.mark.parametrize("loading", [0.0, 1e-6, 1e-3])
def test_filter_update_matches_brute_force_normal_equations(loading):
    rng = np.random.default_rng(7)
    for trial in range(12):
        num_frames = int(rng.integers(12, 31))
        num_channels = int(rng.integers(1, 3))
        taps = int(rng.integers(1, 4))
        delay = int(rng.integers(1, 4))
        y = crandn(rng, num_frames, num_channels)
        variances = rng.uniform(0.1, 3.0, num_frames)
        filters, _ = filter_update(y, variances, taps, delay, loading)
        oracle = wpe_normal_equations(y, variances, taps, delay, loading)
        assert np.max(np.abs(filters - oracle)) <= 1e-8 * np.max(np.abs(oracle))


def test_scalar_prediction_ridge_oracle():
    # y_t = s_t + c y_{t-delay}: the single tap predicts with conj(filter) = c
    rng = np.random.default_rng(3)
    c, delay, num_frames = 0.6 - 0.3j, 2, 20000
    s = crandn(rng, num_frames) / np.sqrt(2)
    y = np.zeros(num_frames, complex)
    for t in range(num_frames):
        y[t] = s[t] + (c * y[t - delay] if t >= delay else 0)
    past = np.concatenate([np.zeros(delay), y[:-delay]])
    least_squares = np.sum(y * past.conj()) / np.sum(np.abs(past) ** 2)
    # with context 0 the weights 1/|d_t|^2 depend on s_t itself and bias the
    # estimate of a stationary source; a few frames of smoothing remove that
    cfg = WpeConfig(taps=1, delay=delay, iterations=3, context=3)
    _, filters, _, _ = wpe_single_frequency(y[:, None], cfg)
    tap = np.conj(filters[0, 0])
    assert abs(tap - c) < 1e-2
    assert abs(tap - least_squares) < 1e-2

    # at fixed variances the update is the closed-form weighted ridge ratio
    lam = rng.uniform(0.5, 2.0, num_frames)
    loading = 1e-6
    r = np.sum(np.abs(past) ** 2 / lam)
    ridge = np.sum(past * y.conj() / lam) / (r * (1 + loading))
    filters, d = filter_update(y[:, None], lam, 1, delay, loading)
    assert filters[0, 0] == pytest.approx(ridge, rel=1e-10)
    assert np.allclose(d[:, 0], y - np.conj(ridge) * past, atol=1e-12)


def test_all_zero_observation_passes_through():
    y = np.zeros((40, 5, 2), complex)
    result = wpe(as_spec(y), WpeConfig())
    assert not np.any(result.dereverberated.data)
    assert not np.any(result.filters)
    assert np.all(result.variances == WpeConfig().variance_floor)


def test_zero_band_inside_nonzero_input():
    rng = np.random.default_rng(0)
    y = crandn(rng, 60, 4, 2)
    y[:, 2] = 0
    result = wpe(as_spec(y), WpeConfig(taps=3, delay=2))
    assert not np.any(result.dereverberated.data[:, 2])
    assert not np.any(result.filters[2])
    assert np.all(np.isfinite(result.dereverberated.data))


def test_objective_trivial_value():
    rng = np.random.default_rng(1)
    y = crandn(rng, 15, 3, 2)
    filters = np.zeros((3, 4, 2), complex)
    assert wpe_objective(y, filters, np.ones((15, 3)), 2) == pytest.approx(np.sum(np.abs(y) ** 2))


def test_objective_rejects_low_variance():
    y = np.ones((10, 1, 1), complex)
    with pytest.raises(ValueError):
        wpe_objective(y, np.zeros((1, 1, 1)), np.full((10, 1), 1e-12), 1, floor=1e-10)
    with pytest.raises(ValueError):
        wpe_objective(y, np.zeros((1, 1, 1)), np.zeros((10, 1)), 1)


def test_variance_step_does_not_increase_objective():
    rng = np.random.default_rng(2)
    y = crandn(rng, 20, 3, 2)
    filters = 0.1 * crandn(rng, 3, 4, 2)
    delay = 1
    d = y - np.einsum("fkm,tfk->tfm", filters.conj(), stack_history(y, 2, delay))
    before = rng.uniform(0.2, 4.0, (20, 3))
    after = smooth_variance(np.abs(d) ** 2, 0, TINY_FLOOR)
    assert wpe_objective(y, filters, after, delay) <= wpe_objective(y, filters, before, delay)


def test_filter_step_does_not_increase_objective():
    rng = np.random.default_rng(3)
    y = crandn(rng, 20, 3, 2)
    variances = rng.uniform(0.2, 4.0, (20, 3))
    start = 0.1 * crandn(rng, 3, 4, 2)
    updated = np.stack([filter_update(y[:, f], variances[:, f], 2, 1)[0] for f in range(3)])
    before = wpe_objective(y, start, variances, 1)
    after = wpe_objective(y, updated, variances, 1)
    assert after <= before + 1e-9 * abs(before)


@pytest.mark.parametrize("loading", [0.0, 1e-6])
def test_alternating_updates_are_monotone_on_random_input(loading):
    rng = np.random.default_rng(4)
    for _ in range(10):
        y = crandn(rng, 60, 2)
        trace = half_step_trace(y, taps=3, delay=2, iterations=4, loading=loading)
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))


def test_alternating_updates_are_monotone_on_rendered_scene(reverberant_scene):
    y = stft(reverberant_scene.mixture).data
    for f in range(5, y.shape[1], 16):
        trace = half_step_trace(y[:, f], taps=10, delay=6, iterations=4, loading=0.0)
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))


def test_convergence_within_three_iterations(reverberant_scene):
    result = wpe(stft(reverberant_scene.mixture), WpeConfig(iterations=4))
    obj = result.objective
    assert (obj[2] - obj[3]) / abs(obj[2]) < 0.01
    assert np.all(result.variances >= WpeConfig().variance_floor)


def test_equivariance_to_complex_scaling():
    rng = np.random.default_rng(5)
    y = crandn(rng, 80, 3, 2)
    c = 2.5 * np.exp(0.7j)
    cfg = WpeConfig(taps=3, delay=2, variance_floor=1e-200)
    a = wpe(as_spec(y), cfg)
    b = wpe(as_spec(c * y), cfg)
    def rel(u, v):
        return np.max(np.abs(u - v)) / np.max(np.abs(v))
    assert rel(b.dereverberated.data, c * a.dereverberated.data) < 1e-8
    assert rel(b.filters, a.filters) < 1e-8
    assert rel(b.variances, abs(c) ** 2 * a.variances) < 1e-8


def test_frequency_independence_is_bit_exact():
    rng = np.random.default_rng(6)
    y = crandn(rng, 70, 9, 2)
    cfg = WpeConfig(taps=4, delay=2)
    joint = wpe(as_spec(y), cfg)
    for f in range(9):
        d, filters, variances, _ = wpe_single_frequency(y[:, f], cfg)
        assert np.array_equal(d, joint.dereverberated.data[:, f])
        assert np.array_equal(filters, joint.filters[f])
        assert np.array_equal(variances, joint.variances[:, f])


def test_thread_pool_gives_identical_results():
    rng = np.random.default_rng(8)
    y = crandn(rng, 50, 17, 2)
    a = wpe(as_spec(y), WpeConfig(taps=3, delay=2), threads=1)
    b = wpe(as_spec(y), WpeConfig(taps=3, delay=2), threads=4)
    assert np.array_equal(a.dereverberated.data, b.dereverberated.data)
    assert np.array_equal(a.objective, b.objective)


def test_anechoic_scene_is_left_nearly_unchanged():
    for voiced in (0.7, 0.0):
        spec = SceneSpec(RoomSpec((6, 5, 3)), [[3.0, 2.0, 1.4], [3.1, 2.0, 1.4]], [[4.5, 3.5, 1.6]],
                         [speech_like(3.0, 16000, 2, voiced_fraction=voiced)])
        y = stft(render_scene(spec).mixture).data
        d = wpe(as_spec(y, 512), WpeConfig()).dereverberated.data
        change = np.linalg.norm(d - y, axis=(0, 2)) / np.linalg.norm(y, axis=(0, 2))
        assert change.max() < 0.05


def test_dereverberation_improves_sdr(reverberant_scene):
    scene = reverberant_scene
    out = istft(wpe(stft(scene.mixture)).dereverberated)
    reference = scene.early[0].channel(0)
    gain = sdr(out.channel(0), reference) - sdr(scene.mixture.channel(0), reference)
    assert gain >= 2.0


def test_smoothing_renormalises_edges():
    power = np.array([[4.0, 0.0], [1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])
    lam = smooth_variance(power, 1, 1e-10)
    means = power.mean(axis=1)
    assert lam[0] == pytest.approx((means[0] + means[1]) / 2)
    assert lam[1] == pytest.approx(means[:3].mean())
    assert lam[3] == pytest.approx((means[2] + means[3]) / 2)
    assert np.all(smooth_variance(np.zeros((3, 2)), 1, 1e-10) == 1e-10)


def test_preconditions():
    y = np.ones((10, 3, 1), complex)
    with pytest.raises(ValueError):
        wpe(as_spec(y), WpeConfig(taps=5, delay=5))
    bad = np.ones((40, 3, 1), complex)
    spec = as_spec(bad)
    object.__setattr__(spec, "data", np.where(np.arange(40)[:, None, None] == 3, np.nan, bad))
    with pytest.raises(ValueError):
        wpe(spec, WpeConfig(taps=2, delay=2))
    for kwargs in (dict(taps=0), dict(delay=0), dict(iterations=0), dict(context=-1),
                   dict(variance_floor=0), dict(diagonal_loading=-1)):
        with pytest.raises(ValueError):
            WpeConfig(**kwargs)
