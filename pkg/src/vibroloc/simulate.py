"""Physics-inspired synthesis of contact events on the instrumented cylinder.

A strike excites the struck rod's damped modes plus a short broadband
contact click. Each microphone hears the sum delayed by its on-surface
(geodesic) propagation time at the configured wave speed, attenuated
exponentially with distance, and low-passed harder with distance to mimic
dispersion. Motor-band and ambient noise are added per channel
(incoherently); outdoor clutter is modeled as random band-limited bursts.

Fractional inter-sensor delays are exact: the excitation is a closed-form
waveform sampled at t - tau_sensor, never an integer-shifted buffer.

Determinism: every synth function takes an explicit seed and draws from
numpy Generator streams in a fixed order, so identical inputs reproduce
clips bit for bit.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import kernels
from .audio_io import (SAMPLE_RATE, EventRecord, ManifestEntry,
                       MultiChannelClip, ProprioTrace, save_proprio,
                       write_clip, write_manifest)
from .errors import InvalidStrike, IoFailure, PlanInvalid
from .geometry import (LABEL_Z_MAX, ContactPoint, CylinderSpec, SensorLayout,
                       default_layout, geodesic_distance)

RAW_DURATION_S = 2.0

# cantilever-ish overtone ratios; modes above the synthesizable band are dropped
_MODE_RATIOS = (1.0, 2.76, 6.27, 11.0, 17.55)
_MODE_F_MAX = 18000.0

_CLICK_PARTIALS = 12


@dataclass(frozen=True)
class ModalProfile:
    """Resonant signature of one strikeable rod: 3-5 damped modes."""
    name: str
    frequencies: tuple
    dampings: tuple
    amplitudes: tuple

    def __post_init__(self):
        k = len(self.frequencies)
        if not (3 <= k <= 5):
            raise InvalidStrike(f"{self.name}: need 3-5 modes, got {k}")
        if len(self.dampings) != k or len(self.amplitudes) != k:
            raise InvalidStrike(f"{self.name}: ragged mode arrays")
        for f in self.frequencies:
            if not (20.0 < f < SAMPLE_RATE / 2):
                raise InvalidStrike(f"{self.name}: mode frequency {f} outside (20, Nyquist)")
        if any(d <= 0 for d in self.dampings) or any(a <= 0 for a in self.amplitudes):
            raise InvalidStrike(f"{self.name}: dampings and amplitudes must be positive")

    def frequency_tuple(self) -> tuple:
        return tuple(round(f, 6) for f in self.frequencies)


@dataclass(frozen=True)
class StrikeSpec:
    """One commanded contact: where, how fast, from which direction, on what."""
    contact: ContactPoint
    speed: float
    direction: tuple
    rod: ModalProfile

    def __post_init__(self):
        if not (0.0 < self.speed <= 10.0):
            raise InvalidStrike(f"speed {self.speed} outside (0, 10] m/s")
        if abs(self.contact.z) > LABEL_Z_MAX + 1e-12:
            raise InvalidStrike(f"contact z {self.contact.z} outside the label band")
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,) or abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
            raise InvalidStrike("direction must be a unit 3-vector")
        object.__setattr__(self, "direction", tuple(float(v) for v in d))


@dataclass(frozen=True)
class SimConfig:
    """Propagation, excitation, and noise parameters of the synthetic rig."""
    wave_speed: float = 150.0            # m/s along the shell
    attenuation_alpha: float = 8.0       # 1/m amplitude decay
    base_cutoff_hz: float = 18000.0      # dispersion lowpass at zero distance
    dispersion_hz_per_m: float = 15000.0
    min_cutoff_hz: float = 900.0
    excitation_gain: float = 0.12        # modal amplitude per (m/s) of strike speed
    click_gain: float = 0.15             # broadband click amplitude per (m/s)
    motor_level: float = 0.0009
    motor_band: tuple = (40.0, 450.0)
    ambient_level: float = 0.00035
    leaf_level: float = 0.0              # burst noise amplitude; 0 disables
    leaf_burst_rate: float = 6.0         # mean bursts per clip
    seed: int = 0

    def __post_init__(self):
        if self.wave_speed <= 0:
            raise PlanInvalid("wave_speed must be positive")
        if self.attenuation_alpha < 0:
            raise PlanInvalid("attenuation_alpha must be non-negative")


def sensor_delays(contact: ContactPoint, layout: SensorLayout,
                  cyl: CylinderSpec, cfg: SimConfig) -> np.ndarray:
    """Per-sensor propagation delay in seconds (geodesic distance / wave speed)."""
    return np.array([geodesic_distance(contact, s, cyl) / cfg.wave_speed
                     for s in layout.sensors])


def _sensor_gains(contact, layout, cyl, cfg) -> np.ndarray:
    d = np.array([geodesic_distance(contact, s, cyl) for s in layout.sensors])
    return np.exp(-cfg.attenuation_alpha * d)


def _band_noise(rng, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    white = rng.standard_normal(n)
    W = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    W[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(W, n=n)
    rms = math.sqrt(float(np.mean(x * x)))
    return x / rms if rms > 1e-12 else x


def _noise_channels(rng, n: int, fs: float, cfg: SimConfig, channels: int) -> np.ndarray:
    """Motor + ambient + optional burst clutter; channels drawn independently."""
    out = np.zeros((channels, n))
    for c in range(channels):
        gain = 1.0 + rng.uniform(-0.2, 0.2)
        out[c] += cfg.motor_level * gain * _band_noise(rng, n, fs, *cfg.motor_band)
        out[c] += cfg.ambient_level * rng.standard_normal(n)
    if cfg.leaf_level > 0.0:
        for _ in range(int(rng.poisson(cfg.leaf_burst_rate))):
            t_c = rng.uniform(0.0, n / fs)
            dur = rng.uniform(0.02, 0.08)
            lo = rng.uniform(800.0, 5000.0)
            hi = lo + rng.uniform(500.0, 2000.0)
            i0 = int(t_c * fs)
            i1 = min(n, i0 + int(dur * fs))
            if i1 - i0 < 32:
                continue
            m = i1 - i0
            env = np.sin(np.pi * np.arange(m) / m) ** 2
            for c in range(channels):
                amp = cfg.leaf_level * (1.0 + rng.uniform(-0.4, 0.4))
                out[c, i0:i1] += amp * env * _band_noise(rng, m, fs, lo, hi)
    return out


def _excitation_components(rng, strike: StrikeSpec, cfg: SimConfig):
    """Component arrays (freqs, decays, amps, phases) for mixdown.

    Modal ringing carries the rod identity; the short click carries the
    broadband energy an impact has, which is what makes phase-based
    correlation workable in noise.
    """
    rod = strike.rod
    k = len(rod.frequencies)
    scale = cfg.excitation_gain * strike.speed
    mode_amp = scale * np.array(rod.amplitudes) * rng.uniform(0.8, 1.25, size=k)
    freqs = list(rod.frequencies)
    decays = list(rod.dampings)
    amps = list(mode_amp)
    phases = [-math.pi / 2.0] * k
    cscale = cfg.click_gain * strike.speed
    freqs += list(rng.uniform(300.0, 9000.0, size=_CLICK_PARTIALS))
    decays += list(1.0 / rng.uniform(0.002, 0.005, size=_CLICK_PARTIALS))
    amps += list(cscale / _CLICK_PARTIALS * 4.0 * rng.uniform(0.5, 1.0, size=_CLICK_PARTIALS))
    phases += list(rng.uniform(0.0, 2.0 * math.pi, size=_CLICK_PARTIALS))
    return (np.array(freqs), np.array(decays), np.array(amps), np.array(phases))


def _dispersed(samples: np.ndarray, contact, layout, cyl, cfg) -> np.ndarray:
    """Distance-dependent lowpass per sensor (one biquad, Butterworth-style Q)."""
    fs = SAMPLE_RATE
    out = np.empty_like(samples)
    for c, sensor in enumerate(layout.sensors):
        d = geodesic_distance(contact, sensor, cyl)
        fc = max(cfg.min_cutoff_hz, cfg.base_cutoff_hz - cfg.dispersion_hz_per_m * d)
        if fc >= 0.49 * fs:
            out[c] = samples[c]
            continue
        w0 = 2.0 * math.pi * fc / fs
        alpha = math.sin(w0) / math.sqrt(2.0)
        cw = math.cos(w0)
        a0 = 1.0 + alpha
        b0 = (1.0 - cw) / 2.0 / a0
        b1 = (1.0 - cw) / a0
        b2 = b0
        a1 = (-2.0 * cw) / a0
        a2 = (1.0 - alpha) / a0
        out[c] = kernels.biquad(samples[c], b0, b1, b2, a1, a2)
    return out


def _synth_proprio(rng, strike: StrikeSpec, onset_s: float) -> ProprioTrace:
    """Approach trace over the 1 s analysis window, contact at t=0.5.

    The base position is randomized so nothing about contact height leaks;
    the approach direction is the strike direction, whose azimuth tracks
    the contact azimuth up to the commanded noise.
    """
    n = 100
    t = np.arange(n) / float(n)
    v_peak = strike.speed
    speed = np.where(t < 0.10, v_peak * t / 0.10, v_peak)
    speed = np.where(t >= 0.5, 0.0, speed)
    # distance still to travel before contact, by reverse cumulative sum
    dt = 1.0 / n
    gone = np.concatenate([[0.0], np.cumsum(speed[::-1])[:-1]]) * dt
    s_rem = gone[::-1]
    d = np.asarray(strike.direction)
    base = rng.uniform(-0.2, 0.2, size=3)
    positions = base[None, :] - s_rem[:, None] * d[None, :]
    positions = positions + rng.normal(0.0, 0.001, size=(n, 3))
    velocities = speed[:, None] * d[None, :] + rng.normal(0.0, 0.003, size=(n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return ProprioTrace(t, positions, quats, velocities)


def synth_event(strike: StrikeSpec, layout: SensorLayout, cyl: CylinderSpec,
                cfg: SimConfig, seed, with_proprio: bool = True,
                metadata: dict | None = None) -> EventRecord:
    """Synthesize one 2 s labeled contact event.

    The contact lands at onset ~ 1.0 +- 0.1 s so the raw clip has margin on
    both sides of the 1 s analysis window. Audio draws happen before
    proprio draws, so the waveform is unchanged by with_proprio.
    """
    rng = np.random.default_rng(seed)
    fs = SAMPLE_RATE
    n = int(RAW_DURATION_S * fs)
    onset = 1.0 + rng.uniform(-0.1, 0.1)
    delays = sensor_delays(strike.contact, layout, cyl, cfg)
    gains = _sensor_gains(strike.contact, layout, cyl, cfg)
    freqs, decays, amps, phases = _excitation_components(rng, strike, cfg)
    mix = kernels.mix_components(n, fs, onset, delays, gains, freqs, decays, amps, phases)
    mix = _dispersed(mix, strike.contact, layout, cyl, cfg)
    total = mix + _noise_channels(rng, n, fs, cfg, len(layout))
    # storage is float32 WAV; cast now so in-memory events match disk round-trips
    clip = MultiChannelClip(total.astype(np.float32).astype(np.float64), fs)
    proprio = _synth_proprio(rng, strike, onset) if with_proprio else None
    meta = {"rod": strike.rod.name, "onset_s": f"{onset:.6f}", "seed": str(seed)}
    if metadata:
        meta.update({str(k): str(v) for k, v in metadata.items()})
    return EventRecord(clip=clip, proprio=proprio, label=strike.contact, metadata=meta)


def synth_noise_reference(cfg: SimConfig, seed, duration: float = RAW_DURATION_S,
                          channels: int = 6) -> MultiChannelClip:
    """A strike-free clip (motor + ambient only) for fitting the noise gate."""
    rng = np.random.default_rng(seed)
    n = int(duration * SAMPLE_RATE)
    quiet = replace(cfg, leaf_level=0.0)
    noise = _noise_channels(rng, n, SAMPLE_RATE, quiet, channels)
    return MultiChannelClip(noise.astype(np.float32).astype(np.float64), SAMPLE_RATE)


# ------------------------------------------------------------------
# rod pools, splits, dataset plans
# ------------------------------------------------------------------

def make_rod_profiles(count: int, seed, f0_range, prefix: str) -> list:
    """Random rod signatures with fundamentals drawn from f0_range."""
    rng = np.random.default_rng(seed)
    rods = []
    for i in range(count):
        f0 = rng.uniform(*f0_range)
        freqs = [f0 * r for r in _MODE_RATIOS if f0 * r < _MODE_F_MAX][:5]
        base = rng.uniform(2.5, 6.0)
        dampings = [base * (1.0 + 0.8 * k) * rng.uniform(0.8, 1.2)
                    for k in range(len(freqs))]
        amps = [max(0.05, 0.55 ** k) * rng.uniform(0.7, 1.0)
                for k in range(len(freqs))]
        rods.append(ModalProfile(f"{prefix}{i}", tuple(freqs),
                                 tuple(dampings), tuple(amps)))
    return rods


@dataclass(frozen=True)
class SplitSpec:
    """Sampling distribution for one dataset split."""
    name: str
    count: int
    rod_pool: str                      # "train" or "novel"
    speed_range: tuple = (1.0, 3.0)
    tilt_sigma: float = 0.12
    azimuth_noise_deg: float = 12.0
    leaf_level: float = 0.0
    with_proprio: bool = True


@dataclass(frozen=True)
class DatasetPlan:
    """A train split plus evaluation splits of graded difficulty."""
    train: SplitSpec
    tests: tuple
    n_rods_train: int = 4
    n_rods_novel: int = 3
    master_seed: int = 0

    def __post_init__(self):
        splits = (self.train,) + tuple(self.tests)
        names = [s.name for s in splits]
        if len(set(names)) != len(names):
            raise PlanInvalid(f"duplicate split names {names}")
        for s in splits:
            if s.count < 1:
                raise PlanInvalid(f"split {s.name}: count {s.count} < 1")
            lo, hi = s.speed_range
            if not (0.0 < lo < hi):
                raise PlanInvalid(f"split {s.name}: bad speed range {s.speed_range}")
            if s.rod_pool not in ("train", "novel"):
                raise PlanInvalid(f"split {s.name}: unknown rod pool {s.rod_pool}")
        if self.n_rods_train < 1 or self.n_rods_novel < 1:
            raise PlanInvalid("need at least one rod per pool")

    def all_splits(self):
        return (self.train,) + tuple(self.tests)


def default_plan(n_train: int = 2000, n_test: int = 300, seed: int = 0,
                 leaf_level: float = 0.012) -> DatasetPlan:
    """Train split plus the four-way evaluation ladder.

    test1 matches training; test2 swaps in unseen rods; test3 adds wider
    strike kinematics and burst clutter; test4 is test3 without clutter and
    without proprioception.
    """
    wide = (0.6, 4.2)
    return DatasetPlan(
        train=SplitSpec("train", n_train, "train"),
        tests=(
            SplitSpec("test1", n_test, "train"),
            SplitSpec("test2", n_test, "novel"),
            SplitSpec("test3", n_test, "novel", speed_range=wide,
                      tilt_sigma=0.25, leaf_level=leaf_level),
            SplitSpec("test4", n_test, "novel", speed_range=wide,
                      tilt_sigma=0.25, with_proprio=False),
        ),
        master_seed=seed,
    )


def plan_rod_pools(plan: DatasetPlan):
    train_rods = make_rod_profiles(plan.n_rods_train, [plan.master_seed, 101],
                                   (90.0, 580.0), "rodA")
    novel_rods = make_rod_profiles(plan.n_rods_novel, [plan.master_seed, 102],
                                   (620.0, 1180.0), "rodB")
    return {"train": train_rods, "novel": novel_rods}


def strike_direction(theta: float, azimuth_noise: float, tilt: float) -> tuple:
    """Unit end-effector velocity at impact.

    The leading side of the moving cylinder is what makes contact, so the
    velocity azimuth tracks the contact azimuth (up to the commanded
    noise); tilt adds an out-of-plane component.
    """
    psi = theta + azimuth_noise
    v = np.array([math.cos(psi), math.sin(psi), tilt])
    return tuple(v / np.linalg.norm(v))


def iter_split(plan: DatasetPlan, split: SplitSpec, cfg: SimConfig,
               layout: SensorLayout, cyl: CylinderSpec):
    """Yield (index, EventRecord) for every event of one split, deterministically."""
    pools = plan_rod_pools(plan)
    rods = pools[split.rod_pool]
    split_id = [s.name for s in plan.all_splits()].index(split.name)
    split_cfg = replace(cfg, leaf_level=split.leaf_level)
    for i in range(split.count):
        rng = np.random.default_rng([plan.master_seed, 500 + split_id, i])
        z = rng.uniform(-LABEL_Z_MAX, LABEL_Z_MAX)
        theta = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*split.speed_range)
        rod = rods[int(rng.integers(len(rods)))]
        az = rng.normal(0.0, math.radians(split.azimuth_noise_deg))
        tilt = rng.normal(0.0, split.tilt_sigma)
        strike = StrikeSpec(ContactPoint(z, theta), speed,
                            strike_direction(theta, az, tilt), rod)
        yield i, synth_event(strike, layout, cyl, split_cfg,
                             [plan.master_seed, 9000 + split_id, i],
                             with_proprio=split.with_proprio,
                             metadata={"split": split.name, "index": i})


# ------------------------------------------------------------------
# on-disk datasets
# ------------------------------------------------------------------

def synth_dataset(plan: DatasetPlan, cfg: SimConfig, out_dir,
                  layout: SensorLayout | None = None,
                  cyl: CylinderSpec | None = None,
                  progress=None) -> dict:
    """Write a full dataset directory: clips, traces, manifests, noise reference."""
    layout = layout if layout is not None else default_layout()
    cyl = cyl if cyl is not None else CylinderSpec()
    try:
        os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "proprio"), exist_ok=True)
    except OSError as e:
        raise IoFailure(str(e)) from e
    write_clip(synth_noise_reference(cfg, [plan.master_seed, 7]),
               os.path.join(out_dir, "noise_reference.wav"))
    manifests = {}
    for split in plan.all_splits():
        entries = []
        for i, event in iter_split(plan, split, cfg, layout, cyl):
            stem = f"{split.name}_{i:05d}"
            clip_rel = f"clips/{stem}.wav"
            write_clip(event.clip, os.path.join(out_dir, clip_rel))
            prop_rel = None
            if event.proprio is not None:
                prop_rel = f"proprio/{stem}.npz"
                save_proprio(event.proprio, os.path.join(out_dir, prop_rel))
            entries.append(ManifestEntry(
                clip_path=clip_rel, proprio_path=prop_rel,
                z_cm=event.label.z * 100.0, theta_rad=event.label.theta,
                metadata=event.metadata))
            if progress is not None:
                progress(split.name, i, split.count)
        mpath = os.path.join(out_dir, f"manifest_{split.name}.jsonl")
        write_manifest(entries, mpath)
        manifests[split.name] = mpath
    with open(os.path.join(out_dir, "sim_config.json"), "w") as f:
        json.dump({"format_version": 1, "kind": "sim_config",
                   "config": asdict(cfg),
                   "plan": {"master_seed": plan.master_seed,
                            "splits": [asdict(s) for s in plan.all_splits()]}},
                  f, indent=2)
    return manifests


# ------------------------------------------------------------------
# SNR measurement / calibration helpers
# ------------------------------------------------------------------

def event_snr_db(strike: StrikeSpec, layout: SensorLayout, cyl: CylinderSpec,
                 cfg: SimConfig, seed) -> float:
    """Realized signal-to-noise ratio of one event, over the 1 s window.

    Signal is the clean dispersed mix, noise the additive channels, both
    RMS-averaged across sensors over [onset, onset + 1 s].
    """
    rng = np.random.default_rng(seed)
    fs = SAMPLE_RATE
    n = int(RAW_DURATION_S * fs)
    onset = 1.0 + rng.uniform(-0.1, 0.1)
    delays = sensor_delays(strike.contact, layout, cyl, cfg)
    gains = _sensor_gains(strike.contact, layout, cyl, cfg)
    comps = _excitation_components(rng, strike, cfg)
    mix = kernels.mix_components(n, fs, onset, delays, gains, *comps)
    mix = _dispersed(mix, strike.contact, layout, cyl, cfg)
    noise = _noise_channels(rng, n, fs, cfg, len(layout))
    i0 = int(onset * fs)
    i1 = min(n, i0 + fs)
    s = float(np.sqrt(np.mean(mix[:, i0:i1] ** 2)))
    m = float(np.sqrt(np.mean(noise[:, i0:i1] ** 2)))
    return 20.0 * math.log10(s / m) if m > 0 else math.inf


def scale_noise(cfg: SimConfig, factor: float) -> SimConfig:
    """Scale every additive noise source by one factor."""
    return replace(cfg, motor_level=cfg.motor_level * factor,
                   ambient_level=cfg.ambient_level * factor,
                   leaf_level=cfg.leaf_level * factor)


def calibrate_noise(strike: StrikeSpec, layout: SensorLayout, cyl: CylinderSpec,
                    cfg: SimConfig, target_snr_db: float, seed) -> SimConfig:
    """Return cfg with noise scaled so the given event realizes target_snr_db."""
    current = event_snr_db(strike, layout, cyl, cfg, seed)
    return scale_noise(cfg, 10.0 ** ((current - target_snr_db) / 20.0))
