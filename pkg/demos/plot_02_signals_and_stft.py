"""
Synthetic PPG/ABP pairs, masking and the STFT
=============================================

Generate one pair, hide part of the PPG, and move it to the
time-frequency domain and back.
"""

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from lsct.signal import MaskConfig, StftConfig, apply_mask, istft, stft, synth_pair

ppg, abp, truth = synth_pair(7, return_truth=True)
print(f"beat rate {truth['rate']:.2f} Hz, SBP {truth['sbp']:.1f}, DBP {truth['dbp']:.1f}")

masked = apply_mask(ppg, MaskConfig(ratio=0.3, rng_seed=1))
print("zeroed samples:", int(np.sum(masked.samples == 0)))

# %%
# Periodic Hann, window 64, hop 16: 64 frames of 33 bins.
cfg = StftConfig()
spec = stft(abp, cfg)
print("spectrogram", spec.real.shape, "COLA sum", cfg.cola_sums()[0])
back = istft(spec)
print(f"round-trip error {np.abs(back.samples - abp.samples).max():.2e}")

# %%
t = np.arange(1024) / 125
fig, axes = plt.subplots(3, 1, figsize=(8, 6), sharex=False)
axes[0].plot(t, ppg.samples, label="PPG")
axes[0].plot(t, masked.samples, label="masked PPG", alpha=0.7)
axes[0].legend()
axes[1].plot(t, abp.samples, color="C3")
axes[1].set_ylabel("ABP")
axes[2].imshow(np.log1p(spec.real**2 + spec.imag**2).T, origin="lower", aspect="auto")
axes[2].set_xlabel("frame")
axes[2].set_ylabel("bin")
fig.tight_layout()
fig.savefig("signals.png", dpi=80)
