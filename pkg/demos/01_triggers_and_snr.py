"""Click triggers and SNR-controlled injection.

Synthesizes a few clicks, shows that different seeds give unrelated
waveforms, and mixes one into a speech-like segment at several SNRs,
measuring what was actually achieved.
"""

import numpy as np

from spkbackdoor import corpus, dsp

SR = 16000

clicks = [dsp.synth_click(seed, SR) for seed in range(4)]
print("clicks:", ", ".join(f"{len(c.wave)} samples @ {dsp.rms_level_db(c.wave):.1f} dBFS"
                           for c in clicks))

a, b = clicks[0].wave.samples, clicks[1].wave.samples
xc = np.max(np.abs(np.correlate(a, b, "full"))) / (np.linalg.norm(a) * np.linalg.norm(b))
print(f"peak normalized cross-correlation between seeds 0 and 1: {xc:.3f}")

c = corpus.generate_synthetic(seed=0, n_speakers=2, segments_per_speaker=3, duration_s=(2.0, 2.0))
seg = c.segments[0].wave
rng = np.random.default_rng(0)
print("\nrequested  measured   peak")
for snr in (-6, -3, 0, 3, 6, 20):
    off = dsp.sample_offset(rng, len(seg), len(clicks[0].wave))
    mix, speech, placed = dsp.inject_trigger(seg, clicks[0], snr, off, return_components=True)
    print(f"{snr:+8.1f}  {dsp.measure_snr(speech, placed):+8.3f}  {np.max(np.abs(mix.samples)):.3f}")
