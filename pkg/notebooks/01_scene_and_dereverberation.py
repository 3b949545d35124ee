"""
Simulating a reverberant room and removing the late reverb
==========================================================

Render one talker in a 6 x 5 x 3 m room, look at the impulse response and
its energy decay, then run WPE and score it against the early image.
Run with ``python notebooks/01_scene_and_dereverberation.py``; figures go
to ``notebooks/out/``.
"""

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from farfield import RoomSpec, SceneSpec, WpeConfig, istft, render_scene, sdr, speech_like, stft, wpe
from farfield.scene import decay_time, energy_decay_curve

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# %% [markdown]
# Two microphones 10 cm apart, one source about 2 m away, t60 = 0.5 s.

# %%
spec = SceneSpec(
    RoomSpec((6.0, 5.0, 3.0), t60=0.5),
    mic_positions=[[3.0, 2.0, 1.4], [3.1, 2.0, 1.4]],
    source_positions=[[4.5, 3.5, 1.6]],
    source_signals=[speech_like(5.0, 16000, 0)],
    seed=0,
)
scene = render_scene(spec)
air = scene.airs[0, 0]
print(f"measured -60 dB decay time: {decay_time(air, 16000):.3f} s")

# %%
t = np.arange(air.size) / 16000
fig, ax = plt.subplots(2, 1, figsize=(7, 5))
ax[0].plot(t, air)
ax[0].set_title("room impulse response, mic 0")
ax[1].plot(t, energy_decay_curve(air))
ax[1].axhline(-60, color="k", lw=0.5)
ax[1].set_ylim(-80, 0)
ax[1].set_xlabel("time [s]")
ax[1].set_ylabel("energy decay [dB]")
fig.tight_layout()
fig.savefig(out / "air_decay.png")

# %% [markdown]
# WPE works on the STFT: 10 taps, prediction delay 6 frames, 3 iterations.
# The objective should drop fast and flatten by the third pass.

# %%
observation = stft(scene.mixture)
result = wpe(observation, WpeConfig(iterations=4))
print("objective per iteration:", np.round(result.objective, 1))

enhanced = istft(result.dereverberated, scene.mixture.num_samples)
reference = scene.early[0].channel(0)
before = sdr(scene.mixture.channel(0), reference)
after = sdr(enhanced.channel(0), reference)
print(f"SDR vs early image: {before:.2f} dB -> {after:.2f} dB")

# %%
fig, ax = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
for a, data, title in zip(ax, (observation.data, result.dereverberated.data), ("observed", "after WPE")):
    a.imshow(20 * np.log10(np.abs(data[:, :, 0].T) + 1e-6), origin="lower", aspect="auto",
             vmin=-60, vmax=20, cmap="magma")
    a.set_title(title)
    a.set_xlabel("frame")
ax[0].set_ylabel("frequency bin")
fig.tight_layout()
fig.savefig(out / "wpe_spectrograms.png")
