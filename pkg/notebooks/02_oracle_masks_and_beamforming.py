"""
Separating two talkers with oracle masks and MVDR
=================================================

Two talkers and white noise at 5 dB SNR in a t60 = 0.3 s room, recorded
by a 4-mic line array. Ideal binary masks from the ground truth drive one
MVDR beamformer per talker; the outputs are compared with the best single
microphone.
"""

# %%
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from farfield import PipelineConfig, enhance, evaluate_outputs, render_scene, truth_from_scene
from farfield.scene import scene_spec_from_config

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
# the lowest bins carry no speech after the 100 Hz highpass, so the talker
# masks are empty there and the covariance falls back to uniform weights
logging.getLogger("farfield").setLevel(logging.ERROR)

# %%
scene = render_scene(scene_spec_from_config({
    "seed": 0, "snr_db": 5, "room": {"dimensions": [6, 5, 3], "t60": 0.3},
    "mics": [[2.85, 2.4, 1.4], [2.95, 2.4, 1.4], [3.05, 2.4, 1.4], [3.15, 2.4, 1.4]],
    "sources": [{"position": [2.2, 3.3, 1.6], "signal": {"duration": 5}},
                {"position": [3.9, 3.3, 1.6], "signal": {"duration": 5}}],
}))
truth = truth_from_scene(scene)

# %% [markdown]
# A longer 64 ms window resolves the room response better than 32 ms;
# the WPE delay of 3 frames keeps the same 48 ms boundary in time.
# GEV maximises output SNR but filters the target spectrally; the BAN gain
# only undoes part of that, so on a waveform SDR it trails MVDR by a lot.

# %%
for name, tree in {
    "MVDR": {"stft": {"window_length": 1024, "shift": 256}, "wpe": {"delay": 3}},
    "MVDR, no WPE": {"stft": {"window_length": 1024, "shift": 256}, "stages": {"wpe": False}},
    "GEV + BAN": {"stft": {"window_length": 1024, "shift": 256}, "wpe": {"delay": 3},
                  "stages": {"beamformer": "gev"}, "beamformer": {"postfilter": True}},
}.items():
    result = enhance(scene.mixture, PipelineConfig.from_tree(tree), truth)
    metrics = evaluate_outputs(result.outputs, truth, scene.mixture)
    gains = [metrics[f"source_{i}.improvement_over_best_db"] for i in range(2)]
    print(f"{name:14s} gain over best mic: {gains[0]:5.2f} dB, {gains[1]:5.2f} dB")

# %%
result = enhance(scene.mixture, PipelineConfig.from_tree(
    {"stft": {"window_length": 1024, "shift": 256}, "wpe": {"delay": 3}}), truth)
fig, ax = plt.subplots(1, 3, figsize=(11, 3.5), sharey=True)
for c, a in enumerate(ax):
    a.imshow(result.masks.masks[c].T, origin="lower", aspect="auto", vmin=0, vmax=1)
    a.set_title(["talker 0", "talker 1", "noise + late reverb"][c])
fig.tight_layout()
fig.savefig(out / "oracle_masks.png")

# %%
# beam pattern of the talker-0 MVDR filter at 1 kHz over arrival angle
weights = result.weights[0].w
f_bin = int(round(1000 / 16000 * 1024))
angles = np.linspace(0, np.pi, 181)
mic_x = np.array([-0.15, -0.05, 0.05, 0.15])
steer = np.exp(-2j * np.pi * 1000 * np.outer(np.cos(angles), mic_x) / 343.0)
pattern = np.abs(steer @ weights[f_bin].conj())
fig, ax = plt.subplots(figsize=(6, 3.5))
ax.plot(np.degrees(angles), 20 * np.log10(pattern / pattern.max()))
ax.set_xlabel("arrival angle [deg]")
ax.set_ylabel("gain [dB]")
ax.set_ylim(-40, 1)
fig.tight_layout()
fig.savefig(out / "mvdr_beam_pattern.png")
