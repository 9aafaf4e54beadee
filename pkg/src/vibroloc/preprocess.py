"""Denoising, trimming, and normalization ahead of feature extraction.

Pipeline order is fixed: spectral gate on the raw 2 s clip, then trim to
the 1 s event window, then mel + per-channel normalization downstream.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .audio_io import MultiChannelClip
from .errors import (ClipTooShort, DegenerateStd, EmptyInput,
                     GeometryMismatch, IoFailure, MalformedRecord,
                     ShapeMismatch, TooShort)
from .features import HOP, N_FFT, MelSpectrogram, istft, stft

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the preprocessing and feature front end."""
    k_sigma: float = 1.5
    floor_db: float = -30.0
    smooth_bins: int = 3
    apply_gate: bool = True
    window_s: float = 1.0
    max_lag: int = 64
    pool_buckets: int = 32
    # open questions in the source design, resolved here and kept toggleable:
    # correlate on the denoised stream, and normalize with corpus statistics
    gcc_on_denoised: bool = True
    per_trial_norm: bool = False


@dataclass
class NoiseProfile:
    """Per-channel, per-bin magnitude statistics of a strike-free reference."""
    means: np.ndarray            # (channels, n_fft//2 + 1)
    stds: np.ndarray
    n_fft: int = N_FFT
    hop: int = HOP

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != self.stds.shape or self.means.ndim != 2:
            raise ShapeMismatch(f"profile shapes {self.means.shape} vs {self.stds.shape}")
        if self.means.shape[1] != self.n_fft // 2 + 1:
            raise ShapeMismatch(f"profile bins {self.means.shape[1]} != n_fft//2+1")


def fit_noise_profile(reference: MultiChannelClip, n_fft: int = N_FFT,
                      hop: int = HOP) -> NoiseProfile:
    """Estimate the gate statistics from a clip containing no strikes."""
    if reference.duration < 0.5:
        raise TooShort(f"noise reference {reference.duration:.3f} s < 0.5 s")
    means = []
    stds = []
    for ch in reference.samples:
        mag = np.abs(stft(ch, n_fft, hop))
        means.append(mag.mean(axis=1))
        stds.append(mag.std(axis=1))
    return NoiseProfile(np.stack(means), np.stack(stds), n_fft, hop)


def _gate_gains(mag: np.ndarray, thr: np.ndarray, floor_lin: float,
                smooth_bins: int) -> np.ndarray:
    # raised-cosine ramp from the threshold to twice the threshold
    x = np.clip((mag - thr[:, None]) / np.maximum(thr[:, None], 1e-30), 0.0, 1.0)
    g = 0.5 * (1.0 - np.cos(np.pi * x))
    g = floor_lin + (1.0 - floor_lin) * g
    if smooth_bins > 1:
        half = smooth_bins // 2
        pad = np.pad(g, ((half, half), (0, 0)), mode="edge")
        acc = np.zeros_like(g)
        for k in range(smooth_bins):
            acc += pad[k:k + g.shape[0]]
        g = acc / smooth_bins
    return g


def spectral_gate(clip: MultiChannelClip, profile: NoiseProfile,
                  k_sigma: float = 1.5, floor_db: float = -30.0,
                  smooth_bins: int = 3) -> MultiChannelClip:
    """Soft-mask spectral subtraction against a fitted noise profile.

    Bins below threshold (mean + k_sigma*std of the reference magnitude)
    are attenuated toward the -30 dB floor; bins above twice the threshold
    pass untouched; a raised cosine blends in between. Gains are smoothed
    over neighboring frequency bins to avoid musical noise.
    """
    if profile.means.shape[0] != clip.samples.shape[0]:
        raise GeometryMismatch(
            f"profile has {profile.means.shape[0]} channels, clip {clip.samples.shape[0]}")
    n_fft, hop = profile.n_fft, profile.hop
    floor_lin = 10.0 ** (floor_db / 20.0)
    out = np.empty_like(clip.samples)
    for c, ch in enumerate(clip.samples):
        # pad so WOLA covers the true signal edges, then cut the pad back off
        padded = np.concatenate([np.zeros(n_fft), ch, np.zeros(n_fft)])
        Z = stft(padded, n_fft, hop)
        thr = profile.means[c] + k_sigma * profile.stds[c]
        g = _gate_gains(np.abs(Z), thr, floor_lin, smooth_bins)
        y = istft(Z * g, hop, length=padded.shape[0])
        out[c] = y[n_fft:n_fft + ch.shape[0]]
    return MultiChannelClip(out, clip.sample_rate)


def peak_index(clip: MultiChannelClip) -> int:
    """Sample index of the maximum absolute amplitude across all channels."""
    flat = int(np.argmax(np.abs(clip.samples)))
    return flat % clip.n_samples


def slice_window(clip: MultiChannelClip, center: int, duration: float = 1.0):
    """Window of the given duration centered exactly on the given sample.

    Zero-pads symmetrically when the window runs past either clip edge, so
    the center sample always lands at index want//2 of the output. Returns
    (windowed clip, start index), where start may be negative for a
    head-padded window.
    """
    fs = clip.sample_rate
    want = int(round(duration * fs))
    n = clip.n_samples
    if n < want:
        raise ClipTooShort(f"{n} samples < {want} required")
    start = center - want // 2
    out = np.zeros((clip.samples.shape[0], want))
    lo = max(start, 0)
    hi = min(start + want, n)
    out[:, lo - start:hi - start] = clip.samples[:, lo:hi]
    return MultiChannelClip(out, fs), start


def trim_to_window(clip: MultiChannelClip, duration: float = 1.0):
    """Cut the window centered on the raw absolute-amplitude peak.

    Returns (trimmed clip, start sample index); see slice_window for the
    edge-padding behavior.
    """
    return slice_window(clip, peak_index(clip), duration)


@dataclass
class NormStats:
    """Per-channel mean/std of log-mel values, fitted on the training corpus."""
    mean: np.ndarray             # (channels,)
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ShapeMismatch("mean/std length mismatch")
        if np.any(self.std < 1e-8):
            raise DegenerateStd(f"std too small: {self.std.min()}")


class NormAccumulator:
    """Streaming accumulator for NormStats (one pass, no spectrogram retention)."""

    def __init__(self):
        self._n = None
        self._sum = None
        self._sumsq = None

    def add(self, spec: MelSpectrogram) -> None:
        v = spec.values
        per = v.reshape(v.shape[0], -1)
        if self._n is None:
            self._n = np.zeros(v.shape[0])
            self._sum = np.zeros(v.shape[0])
            self._sumsq = np.zeros(v.shape[0])
        elif self._n.shape[0] != v.shape[0]:
            raise GeometryMismatch("channel count changed mid-stream")
        self._n += per.shape[1]
        self._sum += per.sum(axis=1)
        self._sumsq += (per * per).sum(axis=1)

    def finalize(self) -> NormStats:
        if self._n is None:
            raise EmptyInput("no spectrograms accumulated")
        mean = self._sum / self._n
        var = np.maximum(self._sumsq / self._n - mean * mean, 0.0)
        return NormStats(mean, np.sqrt(var))


def fit_norm_stats(specs) -> NormStats:
    acc = NormAccumulator()
    for s in specs:
        acc.add(s)
    return acc.finalize()


def normalize(spec: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    """Shift/scale each channel to the fitted zero-mean unit-std frame."""
    if stats.mean.shape[0] != spec.values.shape[0]:
        raise GeometryMismatch(
            f"stats for {stats.mean.shape[0]} channels, spectrogram has {spec.values.shape[0]}")
    v = (spec.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    return MelSpectrogram(v, spec.sample_rate, spec.n_fft, spec.hop)


def per_trial_stats(spec: MelSpectrogram) -> NormStats:
    """Stats from a single spectrogram, for the per-trial normalization variant."""
    per = spec.values.reshape(spec.values.shape[0], -1)
    return NormStats(per.mean(axis=1), np.maximum(per.std(axis=1), 1e-6))


# ------------------------------------------------------------------
# sidecar serialization (versioned JSON)
# ------------------------------------------------------------------

def _dump_sidecar(kind: str, payload: dict, path) -> None:
    doc = {"format_version": _FORMAT_VERSION, "kind": kind}
    doc.update(payload)
    try:
        with open(path, "w") as f:
            json.dump(doc, f)
    except OSError as e:
        raise IoFailure(str(e)) from e


def _load_sidecar(kind: str, path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as e:
        raise IoFailure(str(e)) from e
    except json.JSONDecodeError as e:
        raise MalformedRecord(f"{path}: {e}") from None
    if doc.get("kind") != kind:
        raise MalformedRecord(f"{path}: expected kind={kind}, got {doc.get('kind')!r}")
    if doc.get("format_version") != _FORMAT_VERSION:
        raise MalformedRecord(f"{path}: unsupported format_version {doc.get('format_version')!r}")
    return doc


def save_noise_profile(profile: NoiseProfile, path) -> None:
    _dump_sidecar("noise_profile", {
        "n_fft": profile.n_fft, "hop": profile.hop,
        "means": profile.means.tolist(), "stds": profile.stds.tolist()}, path)


def load_noise_profile(path) -> NoiseProfile:
    doc = _load_sidecar("noise_profile", path)
    try:
        return NoiseProfile(np.array(doc["means"]), np.array(doc["stds"]),
                            int(doc["n_fft"]), int(doc["hop"]))
    except KeyError as e:
        raise MalformedRecord(f"{path}: missing field {e}") from None


def save_norm_stats(stats: NormStats, path) -> None:
    _dump_sidecar("norm_stats", {"mean": stats.mean.tolist(),
                                 "std": stats.std.tolist()}, path)


def load_norm_stats(path) -> NormStats:
    doc = _load_sidecar("norm_stats", path)
    try:
        return NormStats(np.array(doc["mean"]), np.array(doc["std"]))
    except KeyError as e:
        raise MalformedRecord(f"{path}: missing field {e}") from None


def save_pipeline_config(cfg: PipelineConfig, path) -> None:
    _dump_sidecar("pipeline_config", {"config": asdict(cfg)}, path)


def load_pipeline_config(path) -> PipelineConfig:
    doc = _load_sidecar("pipeline_config", path)
    try:
        return PipelineConfig(**doc["config"])
    except (KeyError, TypeError) as e:
        raise MalformedRecord(f"{path}: {e}") from None
