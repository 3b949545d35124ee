"""Multi-channel far-field speech enhancement: WPE, spatial clustering, MVDR/GEV."""
from .beamform import (
    BeamformerWeights,
    BeamformingError,
    CovarianceSet,
    Rtf,
    apply_beamformer,
    blind_analytic_normalization,
    estimate_covariances,
    estimate_rtf,
    gev_weights,
    mvdr_weights,
)
from .io import ConfigError, read_tensor, read_wav, write_tensor, write_wav
from .masks import MaskSet, CacgmmState, align_frequency_permutations, cacgmm_em, ideal_binary_mask
from .metrics import FeatureMatrix, SdrReport, log_mel_features, sdr, sdr_report, snr
from .pipeline import (
    GroundTruth,
    PipelineConfig,
    RunManifest,
    StageError,
    enhance,
    evaluate_outputs,
    run_pipeline,
    truth_from_scene,
)
from .scene import RoomSpec, Scene, SceneSpec, render_scene, scene_spec_from_config, simulate_air, speech_like, split_air
from .stft import ComplexSpectrogram, StftConfig, TimeSignal, istft, stft
from .wpe import WpeConfig, WpeResult, wpe, wpe_objective

__version__ = "0.1.0"
