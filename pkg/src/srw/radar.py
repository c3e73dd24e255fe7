"""FMCW point-target simulator and range-Doppler preprocessing.

Raw frames are complex baseband matrices of shape (PN, NTS): slow time
(chirps) along axis 0, fast time (samples) along axis 1. Range-Doppler
images come out as (PN, NTS/2) with Doppler along rows, zero velocity on
row PN/2, and range along columns.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

SPEED_OF_LIGHT = 3e8

ORIGIN_MAIN, ORIGIN_VALID, ORIGIN_TEST = 0, 1, 2


def origin_eval(session):
    """Origin tag of the evaluation set for incremental session ``session`` (1-based)."""
    return 2 + session


def origin_name(tag):
    return {0: "main", 1: "valid", 2: "test"}.get(int(tag), f"eval{int(tag) - 2}")


class AmbiguityError(ValueError):
    """Target lies outside the unambiguous range/velocity region."""


@dataclass(frozen=True)
class RadarConfig:
    n_samples: int = 64          # NTS, samples per chirp
    n_chirps: int = 32           # PN, chirps per frame
    carrier_freq: float = 60e9
    bandwidth: float = 1e9
    chirp_duration: float = 250e-6
    frame_time: float = 0.05
    sample_rate: float = 256e3
    max_shift: int = 5           # R, range bins

    def __post_init__(self):
        for name in ("n_samples", "n_chirps"):
            n = getattr(self, name)
            if n < 2 or n & (n - 1):
                raise ValueError(f"{name} must be a power of two, got {n}")
        if not 0 <= self.max_shift < self.n_samples // 2:
            raise ValueError(f"max_shift must lie in [0, {self.n_samples // 2}), got {self.max_shift}")

    @property
    def rdi_shape(self):
        return self.n_chirps, self.n_samples // 2

    @property
    def range_resolution(self):
        """Metres per range bin."""
        return SPEED_OF_LIGHT * self.chirp_duration * self.sample_rate / (2 * self.bandwidth * self.n_samples)

    @property
    def max_range(self):
        return self.range_resolution * self.n_samples / 2

    @property
    def velocity_resolution(self):
        return SPEED_OF_LIGHT / (2 * self.carrier_freq * self.chirp_duration * self.n_chirps)

    @property
    def max_velocity(self):
        return SPEED_OF_LIGHT / (4 * self.carrier_freq * self.chirp_duration)

    def beat_frequency(self, r):
        return 2 * self.bandwidth * r / (SPEED_OF_LIGHT * self.chirp_duration)

    def doppler_frequency(self, v):
        return 2 * v * self.carrier_freq / SPEED_OF_LIGHT

    def range_bin(self, r):
        """Fractional range bin of a target at ``r`` metres."""
        return self.beat_frequency(r) * self.n_samples / self.sample_rate

    def doppler_bin(self, v):
        """Fractional Doppler row (after center shift) of radial velocity ``v``."""
        return self.n_chirps // 2 + self.doppler_frequency(v) * self.chirp_duration * self.n_chirps

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TargetTrack:
    range: float
    velocity: float = 0.0
    amplitude: float = 1.0
    jitter_amp: float = 0.0      # metres, sinusoidal displacement across frames
    jitter_freq: float = 0.0     # Hz
    jitter_phase: float = 0.0

    def range_at(self, t):
        return self.range + self.jitter_amp * np.sin(2 * np.pi * self.jitter_freq * t + self.jitter_phase)


def check_target(config, target):
    if not 0 <= config.range_bin(target.range) < config.n_samples / 2 - 0.5:
        raise AmbiguityError(f"range {target.range:.3f} m outside [0, {config.max_range:.3f}) m")
    if abs(target.velocity) >= config.max_velocity * (1 - 1 / config.n_chirps):
        raise AmbiguityError(f"|velocity| {abs(target.velocity):.3f} m/s exceeds {config.max_velocity:.3f} m/s")


def noise_std(snr_db):
    """Complex noise std for a per-sample SNR relative to a unit-amplitude tone."""
    if snr_db is None:
        return 0.0
    return float(10 ** (-snr_db / 20))


def synthesize_if_frames(config, targets, rng, frame_times=(0.0,), snr_db=None):
    """IF frames for several frame start times; shape (len(frame_times), PN, NTS)."""
    for t in targets:
        check_target(config, t)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    n = np.arange(config.n_samples)
    m = np.arange(config.n_chirps)
    out = np.zeros((len(frame_times), config.n_chirps, config.n_samples), dtype=np.complex128)
    for t in targets:
        r = t.range_at(frame_times)
        f_d = config.doppler_frequency(t.velocity)
        fast = np.exp(2j * np.pi * config.beat_frequency(t.range) / config.sample_rate * n)
        slow = np.exp(2j * np.pi * f_d * config.chirp_duration * m)
        phase = t.amplitude * np.exp(1j * (4 * np.pi * config.carrier_freq * r / SPEED_OF_LIGHT
                                           + 2 * np.pi * f_d * frame_times))
        out += phase[:, None, None] * (slow[:, None] * fast[None, :])[None]
    sd = noise_std(snr_db)
    if sd > 0:
        noise = rng.standard_normal(out.shape + (2,)) @ np.array([1.0, 1j])
        out += sd / np.sqrt(2) * noise
    return out


def synthesize_if_frame(config, targets, rng, frame_time=0.0, snr_db=None):
    """One (PN, NTS) complex IF frame: a beat tone per target plus receiver noise."""
    return synthesize_if_frames(config, targets, rng, (frame_time,), snr_db)[0]


def mti_filter(frame):
    """Subtract the slow-time mean of every fast-time column."""
    return frame - frame.mean(axis=-2, keepdims=True)


def fft(x, axis=-1):
    return np.fft.fft(x, axis=axis)


def naive_dft(x):
    """O(n^2) DFT of a 1-D sequence; reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def range_doppler(frame):
    """Windowed range FFT (positive half) then windowed, centered Doppler FFT."""
    n_chirps, n_samples = frame.shape[-2:]
    x = frame * np.hamming(n_samples)
    x = fft(x, axis=-1)[..., : n_samples // 2]
    x = x * np.hamming(n_chirps)[:, None]
    return np.fft.fftshift(fft(x, axis=-2), axes=-2)


def macro_rdi(frame, config=None):
    """Macro range-Doppler image of an MTI-filtered frame."""
    return range_doppler(frame)


def micro_rdi(frame_history, config):
    """Micro range-Doppler image from PN consecutive raw frames.

    Each frame is collapsed to its chirp mean; the PN means are stacked as a
    slow-time axis spanning the whole history and run through the same
    windowed FFT chain as the Macro image.
    """
    frames = np.asarray(frame_history)
    if frames.shape[0] != config.n_chirps:
        raise ValueError(f"micro RDI needs {config.n_chirps} frames, got {frames.shape[0]}")
    return range_doppler(frames.mean(axis=1))


def pack_channels(macro, micro, stats=None):
    """Stack into (PN, NTS/2, 4): Macro-real, Macro-imag, Micro-real, Micro-imag."""
    if macro.shape != micro.shape:
        raise ValueError(f"macro {macro.shape} and micro {micro.shape} differ in shape")
    x = np.stack([macro.real, macro.imag, micro.real, micro.imag], axis=-1).astype(np.float32)
    if stats is not None:
        x = stats.normalize(x)
    return x


def unpack_channels(x, stats=None):
    if stats is not None:
        x = stats.denormalize(x)
    x = x.astype(np.float64)
    return x[..., 0] + 1j * x[..., 1], x[..., 2] + 1j * x[..., 3]


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple
    std: tuple

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        axes = tuple(range(x.ndim - 1))
        std = x.std(axis=axes)
        std[std == 0] = 1.0
        return cls(tuple(float(v) for v in x.mean(axis=axes)), tuple(float(v) for v in std))

    def normalize(self, x):
        return ((x - np.asarray(self.mean)) / np.asarray(self.std)).astype(np.float32)

    def denormalize(self, x):
        return x * np.asarray(self.std) + np.asarray(self.mean)


@dataclass(frozen=True)
class RDISample:
    x: np.ndarray
    label: int
    sample_id: int
    origin: int


class RDIDataset:
    """Column store of labelled samples; iterating yields :class:`RDISample`."""

    def __init__(self, x, labels, ids, origins):
        self.x = np.asarray(x, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.origins = np.asarray(origins, dtype=np.uint8)
        if not len(self.x) == len(self.labels) == len(self.ids) == len(self.origins):
            raise ValueError("dataset columns differ in length")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return RDISample(self.x[i], int(self.labels[i]), int(self.ids[i]), int(self.origins[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return RDIDataset(self.x[idx], self.labels[idx], self.ids[idx], self.origins[idx])

    def with_x(self, x):
        return RDIDataset(x, self.labels, self.ids, self.origins)

    @staticmethod
    def concat(parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return RDIDataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.origins for p in parts]),
        )


@dataclass(frozen=True)
class SceneSpec:
    n_classes: int = 3
    snr_db: tuple = (-15.0, 5.0)         # per-sample SNR of a unit tone, drawn per scene
    range_m: tuple = (0.6, 4.0)
    max_speed: float = 1.5                # m/s, walkers draw |v| up to this
    standing_prob: float = 0.3
    amplitude: tuple = (0.4, 1.0)
    jitter_amp: tuple = (0.002, 0.01)     # m
    jitter_freq: tuple = (0.2, 1.5)       # Hz

    def to_dict(self):
        return asdict(self)


class InfeasibleSceneError(ValueError):
    pass


def _random_targets(config, scene, count, rng):
    targets = []
    r_hi = min(scene.range_m[1], config.max_range * 0.95)
    for _ in range(count):
        standing = rng.random() < scene.standing_prob
        speed = 0.0 if standing else rng.uniform(0.2, scene.max_speed)
        targets.append(TargetTrack(
            range=rng.uniform(scene.range_m[0], r_hi),
            velocity=speed * rng.choice([-1.0, 1.0]),
            amplitude=rng.uniform(*scene.amplitude),
            jitter_amp=rng.uniform(*scene.jitter_amp),
            jitter_freq=rng.uniform(*scene.jitter_freq),
            jitter_phase=rng.uniform(0, 2 * np.pi),
        ))
    return targets


def render_sample(config, targets, rng, snr_db=None):
    """Raw (unnormalized) packed tensor for one scene.

    The last of the PN frames in the history is the current frame used for the
    Macro image.
    """
    times = np.arange(config.n_chirps) * config.frame_time
    frames = synthesize_if_frames(config, targets, rng, times, snr_db)
    macro = macro_rdi(mti_filter(frames[-1]), config)
    micro = micro_rdi(frames, config)
    return pack_channels(macro, micro)


def sample_seed(base_seed, sample_id):
    return np.random.SeedSequence([int(base_seed), int(sample_id)])


def generate_dataset(config, scene, n_frames, seed, origin=ORIGIN_MAIN, id_offset=0, threads=1):
    """Labelled dataset of ``n_frames`` scenes; label = number of people.

    Labels cycle through the classes before a seeded shuffle, so class counts
    differ by at most one. Sample ``i`` is rendered from its own RNG stream,
    making the output independent of ``threads``.
    """
    if scene.range_m[0] >= config.max_range * 0.95:
        raise InfeasibleSceneError("scene range starts beyond the unambiguous range")
    if scene.max_speed >= config.max_velocity * (1 - 1 / config.n_chirps):
        raise InfeasibleSceneError("scene speed exceeds the unambiguous velocity")
    if scene.n_classes - 1 > config.n_samples // 2:
        raise InfeasibleSceneError("more people than range bins")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))
    labels = rng.permutation(np.arange(n_frames) % scene.n_classes)
    ids = np.arange(n_frames, dtype=np.uint64) + np.uint64(id_offset)

    def one(i):
        r = np.random.default_rng(sample_seed(seed, ids[i]))
        snr = r.uniform(*scene.snr_db)
        targets = _random_targets(config, scene, int(labels[i]), r)
        return render_sample(config, targets, r, snr)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            xs = list(pool.map(one, range(n_frames)))
    else:
        xs = [one(i) for i in range(n_frames)]
    x = np.stack(xs) if xs else np.zeros((0,) + config.rdi_shape + (4,), np.float32)
    return RDIDataset(x, labels, ids, np.full(n_frames, origin, np.uint8))
