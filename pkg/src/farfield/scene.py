"""Image-method room simulation and ground-truth scene rendering.

A rendered :class:`Scene` keeps every component of the mixture so that the
enhancement stages can be scored against known references: per-source
reverberant images, their early/late parts and the additive noise image.
"""
from __future__ import annotations

import functools
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml
from scipy.signal import butter, fftconvolve, lfilter, sosfilt

from .io import ConfigError, read_wav, write_wav
from .stft import TimeSignal

log = logging.getLogger(__name__)

MIN_DISTANCE = 0.1  # m, floor for the 1/d amplitude law
COVERAGE = 1.2  # AIR length and image set cover this multiple of t60


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple
    t60: float = 0.0
    speed_of_sound: float = 343.0
    max_image_order: int | None = None

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"room dimensions must be three positive lengths, got {self.dimensions}")
        if self.t60 < 0:
            raise ValueError("t60 must be >= 0")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")
        if self.max_image_order is not None and self.max_image_order < 0:
            raise ValueError("max_image_order must be >= 0")
        object.__setattr__(self, "dimensions", dims)

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dimensions
        return lx * ly * lz

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2 * (lx * ly + ly * lz + lx * lz)

    def check_inside(self, position, what: str = "position") -> np.ndarray:
        position = np.asarray(position, dtype=float)
        if position.shape != (3,):
            raise ValueError(f"{what} must be a 3-vector, got shape {position.shape}")
        if np.any(position <= 0) or np.any(position >= np.asarray(self.dimensions)):
            raise ValueError(f"{what} {position.tolist()} is not strictly inside the room {self.dimensions}")
        return position


def eyring_reflection_coefficient(room: RoomSpec) -> float:
    """Uniform wall pressure reflection coefficient from Eyring's formula.

    ``t60 = 24 ln(10) V / (-c S ln(1 - alpha))`` with ``beta = sqrt(1 - alpha)``.
    """
    if room.t60 == 0:
        return 0.0
    return math.exp(-12 * math.log(10) * room.volume / (room.speed_of_sound * room.surface * room.t60))


def reflection_coefficient(room: RoomSpec, sample_rate: int = 16000) -> float:
    """Uniform reflection coefficient whose image-method AIR decays in ``room.t60``.

    With a uniform coefficient the axial image chains decay slower than the
    mean-free-path estimate, and coincident images add coherently once
    they outnumber the samples, so Eyring's value gives responses whose
    Schroeder curve reaches -60 dB 1.5-1.8x too late. The coefficient is
    found by bisection instead: a reference AIR (source at the room centre,
    microphone offset by a tenth of each dimension, length ``COVERAGE *
    t60``) must cross -60 dB at ``t60``.
    """
    if room.t60 == 0:
        return 0.0
    return _calibrated_beta(room.dimensions, room.t60, room.speed_of_sound, int(sample_rate))


@functools.lru_cache(maxsize=64)
def _calibrated_beta(dims, t60, c, sample_rate):
    dims = np.asarray(dims)
    src = 0.5 * dims
    mic = 0.5 * dims + 0.1 * dims
    length = int(math.ceil(COVERAGE * t60 * sample_rate))
    orders = np.ceil(length / sample_rate * c / (2 * dims)).astype(int) + 1
    axes = []
    for a in range(3):
        m = np.arange(-orders[a], orders[a] + 1)
        off = np.concatenate([2 * m * dims[a] + src[a], 2 * m * dims[a] - src[a]]) - mic[a]
        axes.append((off, np.concatenate([np.abs(2 * m), np.abs(2 * m - 1)])))
    (dx, nx), (dy, ny), (dz, nz) = axes
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2).ravel()
    count = (nx[:, None, None] + ny[None, :, None] + nz[None, None, :]).ravel()
    delay = np.rint(dist / c * sample_rate).astype(np.int64)
    keep = delay < length
    # AIR(beta) = sum_n beta^n * taps[n]: one row of summed 1/d per reflection count
    taps = np.zeros((count[keep].max() + 1, length))
    np.add.at(taps, (count[keep], delay[keep]), 1.0 / np.maximum(dist[keep], MIN_DISTANCE))
    orders_n = np.arange(taps.shape[0])

    def crossing_time(beta):
        edc = energy_decay_curve(beta ** orders_n @ taps)
        k = int(np.argmax(edc <= -60.0))
        if edc[k] > -60.0:
            return math.inf
        frac = (edc[k - 1] + 60.0) / (edc[k - 1] - edc[k])
        return (k - 1 + frac) / sample_rate

    lo, hi = 1e-6, 1.0 - 1e-9
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if crossing_time(mid) > t60:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def default_air_length(room: RoomSpec, src, mic, sample_rate: int) -> int:
    distance = np.linalg.norm(np.asarray(src, float) - np.asarray(mic, float))
    direct = int(round(distance / room.speed_of_sound * sample_rate))
    return max(direct + 1, int(math.ceil(COVERAGE * room.t60 * sample_rate)))


def _axis_images(source, mic, length, order, beta):
    """Per-axis image offsets to the mic and their reflection counts."""
    m = np.arange(-order, order + 1)
    offsets = np.concatenate([2 * m * length + source, 2 * m * length - source]) - mic
    counts = np.concatenate([np.abs(2 * m), np.abs(2 * m - 1)])
    gains = beta ** counts if beta > 0 else (counts == 0).astype(float)
    return offsets, gains


def simulate_air(room: RoomSpec, src, mic, sample_rate: int, length: int | None = None) -> np.ndarray:
    """Image-method acoustic impulse response from ``src`` to ``mic``.

    Each image contributes ``beta**reflections / max(d, MIN_DISTANCE)`` at
    sample ``round(d / c * fs)``. Images arriving after ``length`` samples
    are dropped.
    """
    src = room.check_inside(src, "source")
    mic = room.check_inside(mic, "microphone")
    if length is None:
        length = default_air_length(room, src, mic, sample_rate)
    beta = reflection_coefficient(room, sample_rate)
    c = room.speed_of_sound
    max_distance = length / sample_rate * c
    dims = np.asarray(room.dimensions)

    needed = np.ceil(max_distance / (2 * dims)).astype(int) + 1
    if beta == 0:
        orders = np.zeros(3, dtype=int)
    elif room.max_image_order is None:
        orders = needed
    else:
        orders = np.minimum(needed, room.max_image_order)
        if np.any(room.max_image_order < needed - 1):
            warnings.warn(
                f"max_image_order={room.max_image_order} does not cover the requested "
                f"{length / sample_rate:.3f} s response (needs about {int(needed.max()) - 1})",
                stacklevel=2,
            )

    (dx, gx), (dy, gy), (dz, gz) = (
        _axis_images(src[a], mic[a], dims[a], orders[a], beta) for a in range(3)
    )
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
    gain = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    delay = np.rint(dist / c * sample_rate).astype(np.int64)
    keep = (delay < length) & (gain > 0)
    amplitude = gain[keep] / np.maximum(dist[keep], MIN_DISTANCE)
    return np.bincount(delay[keep], weights=amplitude, minlength=length)


def split_air(air, early_boundary_ms: float, sample_rate: int):
    """Split an AIR at ``early_boundary_ms`` after its direct-path peak.

    The early part keeps taps up to and including ``peak + boundary``; both
    parts have the full AIR length so ``early + late == air`` exactly.
    """
    if early_boundary_ms < 0:
        raise ValueError("early_boundary_ms must be >= 0")
    air = np.asarray(air, dtype=float)
    peak = int(np.argmax(np.abs(air)))
    cut = peak + int(round(early_boundary_ms * 1e-3 * sample_rate)) + 1
    early = np.zeros_like(air)
    late = np.zeros_like(air)
    early[:cut] = air[:cut]
    late[cut:] = air[cut:]
    return early, late


def energy_decay_curve(air) -> np.ndarray:
    """Schroeder backward-integrated energy decay in dB (0 dB at t=0)."""
    energy = np.cumsum(np.asarray(air, float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


def decay_time(air, sample_rate: int, level_db: float = -60.0) -> float:
    """Time in seconds at which the Schroeder curve first falls to ``level_db``."""
    edc = energy_decay_curve(air)
    below = np.flatnonzero(edc <= level_db)
    if below.size == 0:
        return math.inf
    return below[0] / sample_rate


def speech_like(duration: float, sample_rate: int, rng: np.random.Generator | int | None = None,
                voiced_fraction: float = 0.7) -> TimeSignal:
    """Synthetic source with speech-like temporal and spectral structure.

    Syllables of 80-300 ms separated by short gaps. Voiced syllables are
    jittered glottal pulse trains with a gliding pitch fed to a parallel
    bank of random formant resonators; unvoiced ones are noise bursts with
    high-frequency resonances.
    ``voiced_fraction=0`` gives an amplitude-modulated noise source with
    short temporal correlation.
    """
    rng = np.random.default_rng(rng)
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.1 * sample_rate)))
    while pos < n:
        seg = int(rng.uniform(0.08, 0.3) * sample_rate)
        seg = min(seg, n - pos)
        if seg < 16:
            break
        if rng.random() < voiced_fraction:
            excitation = _pulse_train(seg, sample_rate, rng)
            excitation += 0.05 * rng.standard_normal(seg)
            centres = rng.uniform([250, 900, 2000, 3300], [900, 2200, 3200, 4500])
            gains = [1.0, 0.6, 0.35, 0.2]
            tilt = 0.1
        else:
            # fricative: noise with a high resonance
            excitation = rng.standard_normal(seg)
            centres = rng.uniform([2500, 4500], [4500, 7000])
            gains = [1.0, 0.7]
            tilt = 0.3
        # parallel formant bank plus a little of the flat excitation
        segment = tilt * excitation
        for centre, gain in zip(centres, gains):
            segment = segment + gain * _resonate(excitation, centre, 80 + 0.1 * centre, sample_rate)
        segment *= np.sin(np.pi * np.arange(seg) / seg) ** 0.5
        out[pos:pos + seg] = segment / (np.std(segment) + 1e-12) * rng.uniform(0.3, 1.0)
        gap = rng.uniform(0.02, 0.15) if rng.random() < 0.8 else rng.uniform(0.2, 0.4)
        pos += seg + int(gap * sample_rate)
    # speech carries almost nothing below ~100 Hz; removing it also keeps the
    # strong DC gain of image-method AIRs from dominating the SNR scaling
    out = sosfilt(butter(4, 100.0, "highpass", fs=sample_rate, output="sos"), out)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return TimeSignal(out, sample_rate)


def _pulse_train(n, sample_rate, rng):
    f0_start, f0_end = rng.uniform(90, 230, size=2)
    x = np.zeros(n)
    t = 0.0
    while t < n:
        f0 = f0_start + (f0_end - f0_start) * t / n
        x[int(t)] = 1.0
        t += sample_rate / f0 * (1 + 0.03 * rng.standard_normal())
    # glottal roll-off
    return lfilter([1.0], [1.0, -0.9], x)


def _resonate(x, freq, bandwidth, sample_rate):
    r = math.exp(-math.pi * bandwidth / sample_rate)
    theta = 2 * math.pi * freq / sample_rate
    return lfilter([1 - r], [1.0, -2 * r * math.cos(theta), r * r], x)


@dataclass
class SceneSpec:
    room: RoomSpec
    mic_positions: np.ndarray
    source_positions: np.ndarray
    source_signals: list
    noise: object = "white_gaussian"
    snr_db: float = math.inf
    sample_rate: int = 16000
    early_boundary_ms: float = 50.0
    seed: int = 0

    def __post_init__(self):
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))
        self.source_positions = np.atleast_2d(np.asarray(self.source_positions, dtype=float))
        if self.mic_positions.shape[1] != 3 or self.source_positions.shape[1] != 3:
            raise ValueError("positions must be given as rows of (x, y, z)")
        if len(self.source_signals) != len(self.source_positions):
            raise ValueError("need one source signal per source position")
        if len(self.source_signals) < 1:
            raise ValueError("a scene needs at least one source")
        for sig in self.source_signals:
            if sig.num_channels != 1:
                raise ValueError("source signals must be single-channel")
            if sig.sample_rate != self.sample_rate:
                raise ValueError(f"source sample rate {sig.sample_rate} != scene rate {self.sample_rate}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if isinstance(self.noise, str) and self.noise != "white_gaussian":
            raise ValueError(f"unknown noise type {self.noise!r}")
        for k, pos in enumerate(self.mic_positions):
            self.room.check_inside(pos, f"microphone {k}")
        for k, pos in enumerate(self.source_positions):
            self.room.check_inside(pos, f"source {k}")

    @property
    def num_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def num_sources(self) -> int:
        return len(self.source_positions)


@dataclass
class Scene:
    """Rendered scene; all signals have shape (M, L) and share one length.

    ``mixture == sum(images) + noise_image`` and ``images[i] == early[i] +
    late[i]`` hold sample-exactly because the sums are formed here.
    """

    mixture: TimeSignal
    images: list
    early: list
    late: list
    noise_image: TimeSignal
    airs: np.ndarray
    spec: SceneSpec = field(repr=False)

    @property
    def sample_rate(self) -> int:
        return self.mixture.sample_rate


def render_scene(spec: SceneSpec) -> Scene:
    fs = spec.sample_rate
    length = max(sig.num_samples for sig in spec.source_signals)
    air_length = max(
        default_air_length(spec.room, s, m, fs)
        for s in spec.source_positions for m in spec.mic_positions
    )
    airs = np.stack([
        np.stack([simulate_air(spec.room, s, m, fs, air_length) for m in spec.mic_positions])
        for s in spec.source_positions
    ])

    images, early_images, late_images = [], [], []
    for i, sig in enumerate(spec.source_signals):
        dry = np.zeros(length)
        dry[:sig.num_samples] = sig.samples[0]
        early = np.zeros((spec.num_mics, length))
        late = np.zeros((spec.num_mics, length))
        for m in range(spec.num_mics):
            e, l = split_air(airs[i, m], spec.early_boundary_ms, fs)
            early[m] = fftconvolve(dry, e)[:length]
            late[m] = fftconvolve(dry, l)[:length]
        early_images.append(TimeSignal(early, fs))
        late_images.append(TimeSignal(late, fs))
        images.append(TimeSignal(early + late, fs))

    speech = np.zeros((spec.num_mics, length))
    for image in images:
        speech = speech + image.samples
    noise = _noise_image(spec, speech, length)
    return Scene(
        mixture=TimeSignal(speech + noise, fs),
        images=images,
        early=early_images,
        late=late_images,
        noise_image=TimeSignal(noise, fs),
        airs=airs,
        spec=spec,
    )


def _noise_image(spec: SceneSpec, speech, length):
    if spec.snr_db == math.inf:
        return np.zeros_like(speech)
    if isinstance(spec.noise, TimeSignal):
        if spec.noise.num_channels != spec.num_mics or spec.noise.num_samples < length:
            raise ValueError(
                f"supplied noise must have {spec.num_mics} channels and >= {length} samples"
            )
        raw = spec.noise.samples[:, :length].copy()
    else:
        raw = np.random.default_rng(spec.seed).standard_normal((spec.num_mics, length))
    signal_power = np.mean(speech[0] ** 2)
    noise_power = np.mean(raw[0] ** 2)
    if signal_power == 0:
        raise ValueError("cannot scale noise to an SNR: the sources are silent at the reference mic")
    if noise_power == 0:
        raise ValueError("cannot scale noise to an SNR: the noise is silent at the reference mic")
    return raw * math.sqrt(signal_power / (noise_power * 10 ** (spec.snr_db / 10)))


# -- config files -----------------------------------------------------------

def _as_snr(value):
    if value is None:
        return math.inf
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "none", "off"):
            return math.inf
        return float(value)
    return float(value)


def _load_signal(entry, sample_rate, base_dir, default_seed):
    if isinstance(entry, str):
        path = Path(entry)
        if not path.is_absolute():
            path = Path(base_dir) / path
        sig = read_wav(path)
        if sig.sample_rate != sample_rate:
            raise ConfigError(f"{path}: sample rate {sig.sample_rate} != scene rate {sample_rate}")
        return sig.channel(0)
    if not isinstance(entry, dict):
        raise ConfigError(f"bad source signal entry {entry!r}")
    kind = entry.get("type", "speech_like")
    duration = float(entry.get("duration", 3.0))
    seed = entry.get("seed", default_seed)
    if kind == "speech_like":
        return speech_like(duration, sample_rate, seed, entry.get("voiced_fraction", 0.7))
    if kind == "white":
        rng = np.random.default_rng(seed)
        return TimeSignal(0.1 * rng.standard_normal(int(round(duration * sample_rate))), sample_rate)
    raise ConfigError(f"unknown source signal type {kind!r}")


def scene_spec_from_config(tree: dict, base_dir=".") -> SceneSpec:
    """Build a :class:`SceneSpec` from a config tree.

    Keys: ``sample_rate``, ``seed``, ``room`` (``dimensions``, ``t60``,
    ``speed_of_sound``, ``max_image_order``), ``mics`` (list of xyz),
    ``sources`` (list of ``{position, signal}``), ``snr_db``, ``noise``
    (``white_gaussian`` or a WAV path) and ``early_boundary_ms``.
    """
    try:
        fs = int(tree.get("sample_rate", 16000))
        seed = int(tree.get("seed", 0))
        room_tree = tree["room"]
        room = RoomSpec(
            dimensions=room_tree["dimensions"],
            t60=float(room_tree.get("t60", 0.0)),
            speed_of_sound=float(room_tree.get("speed_of_sound", 343.0)),
            max_image_order=room_tree.get("max_image_order"),
        )
        sources = tree["sources"]
        positions = [s["position"] for s in sources]
        signals = [
            _load_signal(s.get("signal", {}), fs, base_dir, seed + 1 + k)
            for k, s in enumerate(sources)
        ]
        noise = tree.get("noise", "white_gaussian")
        if noise != "white_gaussian":
            path = Path(noise)
            noise = read_wav(path if path.is_absolute() else Path(base_dir) / path)
        return SceneSpec(
            room=room,
            mic_positions=tree["mics"],
            source_positions=positions,
            source_signals=signals,
            noise=noise,
            snr_db=_as_snr(tree.get("snr_db")),
            sample_rate=fs,
            early_boundary_ms=float(tree.get("early_boundary_ms", 50.0)),
            seed=seed,
        )
    except KeyError as exc:
        raise ConfigError(f"scene config is missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene config: {exc}") from exc


def scene_parameters(spec: SceneSpec) -> dict:
    return {
        "sample_rate": spec.sample_rate,
        "seed": spec.seed,
        "room": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec.room).items()},
        "reflection_coefficient": reflection_coefficient(spec.room, spec.sample_rate),
        "eyring_reflection_coefficient": eyring_reflection_coefficient(spec.room),
        "mics": spec.mic_positions.tolist(),
        "sources": spec.source_positions.tolist(),
        "snr_db": "inf" if spec.snr_db == math.inf else float(spec.snr_db),
        "noise": spec.noise if isinstance(spec.noise, str) else "supplied",
        "early_boundary_ms": spec.early_boundary_ms,
    }


def export_scene(scene: Scene, directory, subtype: str = "float32") -> list[Path]:
    """Write the scene as WAV files plus a ``manifest.txt`` of parameters."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [write_wav(directory / "mixture.wav", scene.mixture, subtype)]
    for i in range(len(scene.images)):
        paths.append(write_wav(directory / f"image_{i}.wav", scene.images[i], subtype))
        paths.append(write_wav(directory / f"early_{i}.wav", scene.early[i], subtype))
        paths.append(write_wav(directory / f"late_{i}.wav", scene.late[i], subtype))
    paths.append(write_wav(directory / "noise.wav", scene.noise_image, subtype))
    manifest = {
        "scene": scene_parameters(scene.spec),
        "num_samples": scene.mixture.num_samples,
        "air_length": int(scene.airs.shape[-1]),
        "files": [p.name for p in paths],
    }
    manifest_path = directory / "manifest.txt"
    manifest_path.write_text(yaml.safe_dump(manifest, sort_keys=True))
    return paths + [manifest_path]
