"""Batch enhancement pipeline: WPE -> masks -> per-source beamforming -> metrics.

The pipeline is configured by a plain config tree (see README for the
keys) and writes its artifacts into an output directory:

    enhanced_<k>.wav     one enhanced signal per extracted source
    metrics.txt          key=value report (when ground truth is available)
    manifest.txt         resolved config, seeds, timings, artifact list
    intermediate/        optional binary tensor dumps and mask heatmaps
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import linear_sum_assignment

from . import beamform as bf
from .io import ConfigError, read_tensor, read_wav, save_mask_images, write_report, write_tensor, write_wav
from .masks import MaskSet, cacgmm_em, identify_noise_class, ideal_binary_mask, move_class_last
from .metrics import sdr
from .scene import Scene, render_scene, scene_parameters, scene_spec_from_config
from .stft import ComplexSpectrogram, StftConfig, TimeSignal, istft, stft
from .wpe import WpeConfig, wpe

MASK_MODES = ("oracle", "clustering", "none")
BEAMFORMERS = ("mvdr", "gev", "none")


class StageError(RuntimeError):
    """A numerical failure inside one pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    use_wpe: bool = True
    masks: str = "oracle"
    beamformer: str = "mvdr"
    wpe: WpeConfig = field(default_factory=WpeConfig)
    em_iterations: int = 20
    em_classes: int | None = None
    em_seed: int = 0
    mask_input: str = "wpe"
    noise_class: object = "auto"
    reference_channel: int = 0
    postfilter: bool = False
    subtract_interference: bool = False
    num_sources: int | None = None
    threads: int = 1
    dump_intermediate: bool = False
    evaluate: bool = True
    wav_subtype: str = "float32"

    @classmethod
    def from_tree(cls, tree: dict) -> "PipelineConfig":
        stages = tree.get("stages", {}) or {}
        stft_tree = tree.get("stft", {}) or {}
        wpe_tree = tree.get("wpe", {}) or {}
        em = tree.get("clustering", {}) or {}
        bf_tree = tree.get("beamformer", {}) or {}
        try:
            cfg = cls(
                stft=StftConfig(**stft_tree),
                use_wpe=bool(stages.get("wpe", True)),
                masks=str(stages.get("masks", "oracle")),
                beamformer=str(stages.get("beamformer", "mvdr")),
                wpe=WpeConfig(**wpe_tree),
                em_iterations=int(em.get("iterations", 20)),
                em_classes=em.get("classes"),
                em_seed=int(em.get("seed", tree.get("seed", 0))),
                mask_input=str(em.get("mask_input", "wpe")),
                noise_class=em.get("noise_class", "auto"),
                reference_channel=int(bf_tree.get("reference_channel", 0)),
                postfilter=bool(bf_tree.get("postfilter", False)),
                subtract_interference=bool(bf_tree.get("subtract_interference", False)),
                num_sources=tree.get("num_sources"),
                threads=int(tree.get("threads", 1)),
                dump_intermediate=bool(tree.get("dump_intermediate", False)),
                evaluate=bool(tree.get("evaluate", True)),
                wav_subtype=str(tree.get("wav_subtype", "float32")),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid pipeline config: {exc}") from exc
        if cfg.masks not in MASK_MODES:
            raise ConfigError(f"stages.masks must be one of {MASK_MODES}, got {cfg.masks!r}")
        if cfg.beamformer not in BEAMFORMERS:
            raise ConfigError(f"stages.beamformer must be one of {BEAMFORMERS}, got {cfg.beamformer!r}")
        if cfg.beamformer != "none" and cfg.masks == "none":
            raise ConfigError("stage 'beamformer' needs masks: set stages.masks to oracle or clustering")
        if cfg.mask_input not in ("wpe", "observation"):
            raise ConfigError("clustering.mask_input must be 'wpe' or 'observation'")
        return cfg


@dataclass
class GroundTruth:
    """Per-source references (M-channel early images) and the residual."""

    early: list
    residual: TimeSignal


@dataclass
class EnhancementResult:
    outputs: list
    wpe_spectrogram: ComplexSpectrogram | None = None
    masks: MaskSet | None = None
    weights: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    timings: dict
    metrics: dict
    artifacts: list

    def to_text(self) -> str:
        return yaml.safe_dump(
            {
                "config": self.config,
                "seeds": self.seeds,
                "timings_s": self.timings,
                "metrics": self.metrics,
                "artifacts": self.artifacts,
            },
            sort_keys=True,
        )


def _stage(name, timings, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        return fn(*args, **kwargs)
    except (ConfigError, StageError):
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


def enhance(mixture: TimeSignal, cfg: PipelineConfig, truth: GroundTruth | None = None,
            wpe_spectrogram: ComplexSpectrogram | None = None) -> EnhancementResult:
    """Run the enhancement stages on an M-channel mixture.

    ``wpe_spectrogram`` replaces the WPE stage with a precomputed
    dereverberated spectrogram.
    """
    timings = {}
    observation = _stage("stft", timings, stft, mixture, cfg.stft)
    if wpe_spectrogram is not None:
        if cfg.use_wpe:
            raise ConfigError("stage 'wpe': disable stages.wpe when a WPE spectrogram is supplied")
        if wpe_spectrogram.data.shape[:2] != observation.data.shape[:2]:
            raise ConfigError("stage 'wpe': supplied spectrogram does not match the mixture STFT")
        dereverberated = wpe_spectrogram
    elif cfg.use_wpe:
        dereverberated = _stage("wpe", timings, wpe, observation, cfg.wpe, cfg.threads).dereverberated
    else:
        dereverberated = observation
    result = EnhancementResult([], dereverberated if (cfg.use_wpe or wpe_spectrogram is not None) else None,
                               timings=timings)

    if cfg.masks == "none":
        if cfg.use_wpe or wpe_spectrogram is not None:
            out = _stage("istft", timings, istft, dereverberated, mixture.num_samples)
            result.outputs = [out.channel(cfg.reference_channel)]
        else:
            result.outputs = [mixture.channel(cfg.reference_channel)]
        return result

    if cfg.masks == "oracle":
        if truth is None:
            raise ConfigError("stage 'masks': oracle masks require ground-truth early images")
        classes = [stft(e, cfg.stft) for e in truth.early] + [stft(truth.residual, cfg.stft)]
        masks = _stage("masks", timings, ideal_binary_mask, classes)
        num_sources = len(truth.early)
    else:
        if mixture.num_channels < 2:
            raise ConfigError("stage 'masks': clustering requires at least two channels")
        num_sources = cfg.num_sources or (len(truth.early) if truth else None)
        num_classes = cfg.em_classes or (num_sources + 1 if num_sources else None)
        if num_classes is None:
            raise ConfigError("stage 'masks': set num_sources or clustering.classes")
        num_sources = num_classes - 1
        source = dereverberated if cfg.mask_input == "wpe" else observation
        masks, _ = _stage("masks", timings, cacgmm_em, source, num_classes, cfg.em_iterations, cfg.em_seed)
        noise = cfg.noise_class
        noise = identify_noise_class(masks) if noise in (None, "auto") else int(noise)
        masks = move_class_last(masks, noise)
    result.masks = masks

    if cfg.beamformer == "none":
        for c in range(num_sources):
            masked = dereverberated.with_data(
                dereverberated.data[:, :, cfg.reference_channel:cfg.reference_channel + 1]
                * masks.masks[c][..., None]
            )
            result.outputs.append(_stage("istft", timings, istft, masked, mixture.num_samples))
        return result

    for c in range(num_sources):
        cov = _stage("beamformer", timings, bf.estimate_covariances, dereverberated, masks, c)
        if cfg.beamformer == "mvdr":
            rtf = _stage("beamformer", timings, bf.estimate_rtf, cov, cfg.reference_channel,
                         cfg.subtract_interference)
            weights = _stage("beamformer", timings, bf.mvdr_weights, cov, rtf)
        else:
            weights = _stage("beamformer", timings, bf.gev_weights, cov, cfg.reference_channel)
        if cfg.postfilter:
            weights = bf.blind_analytic_normalization(weights, cov)
        result.weights.append(weights)
        enhanced = _stage("beamformer", timings, bf.apply_beamformer, dereverberated, weights)
        result.outputs.append(_stage("istft", timings, istft, enhanced, mixture.num_samples))
    return result


def evaluate_outputs(outputs, truth: GroundTruth, mixture: TimeSignal, reference_channel: int = 0) -> dict:
    """SDR of each output against its source's early image at the reference mic.

    Outputs are matched to sources by the assignment maximising total SDR
    (identity when the output order is already known to be correct).
    Input baselines: the reference channel and the best single channel,
    each scored against the early image of the same channel.
    """
    num_sources = len(truth.early)
    table = np.array([
        [sdr(out, e.channel(reference_channel)) for e in truth.early] for out in outputs
    ])
    rows, cols = linear_sum_assignment(table, maximize=True)
    metrics = {}
    for k, i in zip(rows, cols):
        early = truth.early[i]
        per_channel = [sdr(mixture.channel(m), early.channel(m)) for m in range(mixture.num_channels)]
        best = max(per_channel)
        prefix = f"source_{i}"
        metrics[f"{prefix}.output_index"] = int(k)
        metrics[f"{prefix}.sdr_db"] = float(table[k, i])
        metrics[f"{prefix}.input_sdr_db"] = float(per_channel[reference_channel])
        metrics[f"{prefix}.best_input_sdr_db"] = float(best)
        metrics[f"{prefix}.improvement_db"] = float(table[k, i] - per_channel[reference_channel])
        metrics[f"{prefix}.improvement_over_best_db"] = float(table[k, i] - best)
    metrics["num_sources"] = num_sources
    return metrics


def truth_from_scene(scene: Scene) -> GroundTruth:
    speech = sum(e.samples for e in scene.early)
    return GroundTruth(scene.early, TimeSignal(scene.mixture.samples - speech, scene.sample_rate))


def _resolve(path, base_dir):
    path = Path(path)
    return path if path.is_absolute() else Path(base_dir) / path


def load_inputs(tree: dict, base_dir="."):
    """Return ``(mixture, truth or None, wpe_spectrogram or None, scene or None)``."""
    if "scene" in tree:
        spec = scene_spec_from_config(tree["scene"], base_dir)
        scene = render_scene(spec)
        return scene.mixture, truth_from_scene(scene), None, scene
    inp = tree.get("input")
    if not inp or "mixture" not in inp:
        raise ConfigError("config needs either a 'scene' block or 'input.mixture'")
    try:
        mixture = read_wav(_resolve(inp["mixture"], base_dir))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read input mixture: {exc}") from exc
    truth = None
    if inp.get("early"):
        early = [read_wav(_resolve(p, base_dir)) for p in inp["early"]]
        if any(e.samples.shape != mixture.samples.shape for e in early):
            raise ConfigError("ground-truth early images must match the mixture shape")
        residual = TimeSignal(mixture.samples - sum(e.samples for e in early), mixture.sample_rate)
        truth = GroundTruth(early, residual)
    spectrogram = None
    if inp.get("wpe_spectrogram"):
        stft_cfg = StftConfig(**(tree.get("stft", {}) or {}))
        data = read_tensor(_resolve(inp["wpe_spectrogram"], base_dir))
        spectrogram = ComplexSpectrogram(data, stft_cfg, mixture.sample_rate, mixture.num_samples)
    return mixture, truth, spectrogram, None


def run_pipeline(tree: dict, out_dir, base_dir=".") -> RunManifest:
    """Execute the configured pipeline and write all artifacts to ``out_dir``."""
    out_dir = Path(out_dir)
    cfg = PipelineConfig.from_tree(tree)
    timings = {}
    start = time.perf_counter()
    mixture, truth, wpe_spec, scene = load_inputs(tree, base_dir)
    timings["load"] = time.perf_counter() - start

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    stages_off = not cfg.use_wpe and wpe_spec is None and cfg.masks == "none"
    result = enhance(mixture, cfg, truth, wpe_spec)
    timings.update(result.timings)
    for k, out in enumerate(result.outputs):
        artifacts.append(write_wav(out_dir / f"enhanced_{k}.wav", out, cfg.wav_subtype).name)

    if cfg.dump_intermediate:
        inter = out_dir / "intermediate"
        if result.wpe_spectrogram is not None:
            path = write_tensor(inter / "wpe_spectrogram.tnsr", result.wpe_spectrogram.data, np.complex128)
            artifacts.append(str(path.relative_to(out_dir)))
        if result.masks is not None:
            path = write_tensor(inter / "masks.tnsr", result.masks.masks, np.float32)
            artifacts.append(str(path.relative_to(out_dir)))
            artifacts += [str(p.relative_to(out_dir)) for p in save_mask_images(inter, result.masks.masks)]
        for k, w in enumerate(result.weights):
            path = write_tensor(inter / f"weights_{k}.tnsr", w.w, np.complex64)
            artifacts.append(str(path.relative_to(out_dir)))

    metrics = {}
    if cfg.evaluate and truth is not None and not stages_off:
        start = time.perf_counter()
        try:
            metrics = evaluate_outputs(result.outputs, truth, mixture, cfg.reference_channel)
        except ValueError as exc:
            raise StageError("metrics", exc) from exc
        timings["metrics"] = time.perf_counter() - start
        artifacts.append(write_report(out_dir / "metrics.txt", metrics).name)

    seeds = {"pipeline": int(tree.get("seed", 0)), "clustering": cfg.em_seed}
    if scene is not None:
        seeds["scene"] = scene.spec.seed
    resolved = dict(tree)
    if scene is not None:
        resolved["scene_resolved"] = scene_parameters(scene.spec)
    if stages_off:
        resolved["passthrough"] = True
    manifest = RunManifest(resolved, seeds, {k: round(v, 6) for k, v in timings.items()},
                           metrics, sorted(artifacts) + ["manifest.txt"])
    (out_dir / "manifest.txt").write_text(manifest.to_text())
    return manifest
