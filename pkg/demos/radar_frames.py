"""Walk through one simulated radar frame: IF signal, MTI, Macro/Micro images, augmentation.

Run: python3 demos/radar_frames.py
"""

import numpy as np

from srw.augment import flip_doppler, shift_range
from srw.radar import (RadarConfig, SceneSpec, TargetTrack, generate_dataset, macro_rdi, micro_rdi,
                       mti_filter, synthesize_if_frame, synthesize_if_frames)

cfg = RadarConfig()
print(f"range resolution {cfg.range_resolution:.3f} m, max range {cfg.max_range:.2f} m")
print(f"velocity resolution {cfg.velocity_resolution:.4f} m/s, max |v| {cfg.max_velocity:.2f} m/s")

# a walker at 1.5 m moving away at 0.9 m/s
rng = np.random.default_rng(0)
walker = TargetTrack(range=1.5, velocity=0.9)
frame = synthesize_if_frame(cfg, [walker], rng, snr_db=20)
rdi = np.abs(macro_rdi(mti_filter(frame)))
d, r = np.unravel_index(rdi.argmax(), rdi.shape)
print(f"\nmacro peak at range bin {r} (expected {cfg.range_bin(1.5):.1f}), "
      f"Doppler bin {d} (expected {cfg.doppler_bin(0.9):.1f})")

# MTI removes a standing person from the macro image; the micro image keeps them
stander = TargetTrack(range=2.0, jitter_amp=0.004, jitter_freq=1.0)
history = synthesize_if_frames(cfg, [stander], rng, np.arange(cfg.n_chirps) * cfg.frame_time)
macro = np.abs(macro_rdi(mti_filter(history[-1])))
micro = np.abs(micro_rdi(history, cfg))
print(f"\nstanding person: macro max {macro.max():.2e}, micro max {micro.max():.2e}")

# augmentation: Doppler flip mirrors the velocity, range shift moves the target away
x = rdi[..., None]
print(f"\nflipped peak Doppler bin {np.unravel_index(flip_doppler(x)[..., 0].argmax(), rdi.shape)[0]}")
print(f"shifted (R_s=3) peak range bin {np.unravel_index(shift_range(x, 3)[..., 0].argmax(), rdi.shape)[1]}")

# a small labelled dataset: label = number of people
ds = generate_dataset(cfg, SceneSpec(), 30, seed=1)
print(f"\ndataset x {ds.x.shape}, labels {np.bincount(ds.labels)} per class")
