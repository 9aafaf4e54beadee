"""Spectral front end: STFT, log-mel spectrograms, GCC-PHAT, augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .audio_io import MultiChannelClip
from .errors import InvalidConfig, LengthMismatch, TooShort, ZeroEnergy

N_FFT = 512
HOP = 128
N_MELS = 50
MAX_LAG = 64
POOL_BUCKETS = 32

_LOG_FLOOR = 1e-10
_PHAT_FLOOR = 1e-12


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def n_frames(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    if n_samples < n_fft:
        raise TooShort(f"{n_samples} samples < one {n_fft}-sample frame")
    return 1 + (n_samples - n_fft) // hop


def stft(x, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Short-time FFT with a periodic Hann window and no centering.

    Frame t covers samples [t*hop, t*hop + n_fft). Returns complex
    (n_fft//2 + 1, T).
    """
    if n_fft < 16 or hop < 1 or hop > n_fft:
        raise InvalidConfig(f"bad stft params n_fft={n_fft} hop={hop}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    T = n_frames(x.shape[0], n_fft, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:T]
    return np.fft.rfft(frames * hann_periodic(n_fft), axis=1).T


def istft(Z: np.ndarray, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of stft (Hann synthesis window).

    Exact reconstruction wherever the window-square sum is nonzero; callers
    who need the signal edges should analyze a padded signal.
    """
    n_fft = 2 * (Z.shape[0] - 1)
    w = hann_periodic(n_fft)
    frames = np.fft.irfft(Z.T, n=n_fft, axis=1) * w
    T = frames.shape[0]
    total = (T - 1) * hop + n_fft
    out = np.zeros(total)
    wsum = np.zeros(total)
    w2 = w * w
    for t in range(T):
        out[t * hop:t * hop + n_fft] += frames[t]
        wsum[t * hop:t * hop + n_fft] += w2
    good = wsum > 1e-12
    out[good] /= wsum[good]
    if length is not None:
        out = out[:length]
    return out


# ------------------------------------------------------------------
# mel spectrogram
# ------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = 44100) -> np.ndarray:
    """Triangular mel filters, (n_mels, n_fft//2 + 1), unit peak weight."""
    if n_mels < 2:
        raise InvalidConfig(f"n_mels={n_mels}")
    edges_hz = mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2)), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_hz.shape[0]))
    for k in range(n_mels):
        lo, mid, hi = edges_hz[k], edges_hz[k + 1], edges_hz[k + 2]
        rise = (bin_hz - lo) / (mid - lo)
        fall = (hi - bin_hz) / (hi - mid)
        fb[k] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


@dataclass
class MelSpectrogram:
    """Log10 mel-power values, (channels, n_mels, frames)."""
    values: np.ndarray
    sample_rate: int = 44100
    n_fft: int = N_FFT
    hop: int = HOP

    @property
    def n_channels(self):
        return self.values.shape[0]

    @property
    def frames(self):
        return self.values.shape[2]


def mel_spectrogram(clip: MultiChannelClip, n_mels: int = N_MELS,
                    n_fft: int = N_FFT, hop: int = HOP) -> MelSpectrogram:
    """Per-channel log10 mel power spectrogram."""
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    chans = []
    for ch in clip.samples:
        Z = stft(ch, n_fft, hop)
        power = (Z.real * Z.real) + (Z.imag * Z.imag)
        chans.append(np.log10(fb @ power + _LOG_FLOOR))
    return MelSpectrogram(np.stack(chans), clip.sample_rate, n_fft, hop)


def pool_matrix(n_in: int, n_out: int = POOL_BUCKETS) -> np.ndarray:
    """Fractional-overlap averaging matrix (n_out, n_in); rows sum to 1.

    Bucket edges fall at multiples of n_in/n_out, so the mean over bucket
    means equals the mean over input frames exactly.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidConfig(f"pool {n_in}->{n_out}")
    width = n_in / n_out
    W = np.zeros((n_out, n_in))
    for b in range(n_out):
        lo = b * width
        hi = lo + width
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            W[b, i] = max(0.0, min(hi, i + 1.0) - max(lo, float(i)))
    return W / width


def pool_time(values: np.ndarray, n_out: int = POOL_BUCKETS) -> np.ndarray:
    """Average the trailing (time) axis into n_out equal-width buckets."""
    W = pool_matrix(values.shape[-1], n_out)
    return values @ W.T


# ------------------------------------------------------------------
# GCC-PHAT
# ------------------------------------------------------------------

def _phat_cross(X: np.ndarray, Y: np.ndarray, n: int, max_lag: int) -> np.ndarray:
    R = X * np.conj(Y)
    R = R / np.maximum(np.abs(R), _PHAT_FLOOR)
    cc = np.fft.irfft(R, n=n)
    idx = (-np.arange(-max_lag, max_lag + 1)) % n
    return cc[idx]


def gcc_phat_pair(x, y, max_lag: int = MAX_LAG) -> np.ndarray:
    """Phase-transform cross-correlation of two channels.

    Returns a (2*max_lag + 1,) vector over lags -max_lag..+max_lag; a
    positive peak lag means y lags (is delayed relative to) x. The cross
    spectrum is whitened to unit magnitude, so the result is invariant to
    per-channel amplitude scaling.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{x.shape[0]} vs {y.shape[0]} samples")
    if x.shape[0] == 0:
        raise TooShort("empty signals")
    if max_lag < 1 or max_lag >= x.shape[0]:
        raise InvalidConfig(f"max_lag={max_lag} for {x.shape[0]} samples")
    if not np.any(x) or not np.any(y):
        raise ZeroEnergy("correlation input has zero energy")
    n = 2 * x.shape[0]
    return _phat_cross(np.fft.rfft(x, n), np.fft.rfft(y, n), n, max_lag)


@dataclass
class GccSet:
    """GCC-PHAT vectors for every unordered channel pair, lexicographic order."""
    vectors: np.ndarray          # (n_pairs, 2*max_lag + 1)
    pairs: tuple                 # ((i, j), ...) with i < j
    max_lag: int


def gcc_phat_all(clip: MultiChannelClip, max_lag: int = MAX_LAG) -> GccSet:
    """GCC-PHAT for all channel pairs, reusing one FFT per channel."""
    x = clip.samples
    if max_lag < 1 or max_lag >= x.shape[1]:
        raise InvalidConfig(f"max_lag={max_lag} for {x.shape[1]} samples")
    for c in range(x.shape[0]):
        if not np.any(x[c]):
            raise ZeroEnergy(f"channel {c} has zero energy")
    n = 2 * x.shape[1]
    X = np.fft.rfft(x, n=n, axis=1)
    pairs = tuple(combinations(range(x.shape[0]), 2))
    vecs = np.stack([_phat_cross(X[i], X[j], n, max_lag) for i, j in pairs])
    return GccSet(vecs, pairs, max_lag)


@dataclass(frozen=True)
class TdoaEstimate:
    lag_samples: float
    confident: bool
    prominence: float


def tdoa_estimate(vector: np.ndarray) -> TdoaEstimate:
    """Sub-sample peak lag of one GCC vector with a confidence gate.

    The peak is refined by parabolic interpolation over its two neighbors.
    The estimate is confident only when the peak is at least twice the mean
    absolute value of the vector AND at least twice the largest competing
    peak more than 3 lags away; a flat or ambiguous vector yields lag 0
    with confident=False.
    """
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if v.shape[0] < 3 or v.shape[0] % 2 == 0:
        raise InvalidConfig(f"gcc vector length {v.shape[0]}")
    L = (v.shape[0] - 1) // 2
    i = int(np.argmax(v))
    peak = v[i]
    mean_abs = float(np.mean(np.abs(v)))
    away = np.abs(np.arange(v.shape[0]) - i) > 3
    second = float(np.max(v[away])) if np.any(away) else -np.inf
    confident = peak > 0 and peak >= 2.0 * mean_abs and peak >= 2.0 * second
    prominence = float(peak / max(mean_abs, 1e-30))
    if not confident:
        return TdoaEstimate(0.0, False, prominence)
    if 0 < i < v.shape[0] - 1:
        denom = v[i - 1] - 2.0 * v[i] + v[i + 1]
        delta = 0.0 if abs(denom) < 1e-30 else 0.5 * (v[i - 1] - v[i + 1]) / denom
        delta = min(max(delta, -0.5), 0.5)
    else:
        delta = 0.0
    lag = min(max((i - L) + delta, -float(L)), float(L))
    return TdoaEstimate(float(lag), True, prominence)


def refined_lags(gcc: GccSet) -> np.ndarray:
    """Confidence-gated refined peak lag per pair, scaled to [-1, 1].

    Pairs whose vector fails the confidence gate contribute zero, so the
    value doubles as a soft availability flag.
    """
    out = np.zeros(gcc.vectors.shape[0])
    for r in range(gcc.vectors.shape[0]):
        est = tdoa_estimate(gcc.vectors[r])
        if est.confident:
            out[r] = est.lag_samples / gcc.max_lag
    return out


# ------------------------------------------------------------------
# augmentation
# ------------------------------------------------------------------

def augment(spec: MelSpectrogram, clip: MultiChannelClip, seed) -> tuple:
    """Jointly time-shift a spectrogram/clip pair and mask spectrogram blocks.

    Draws, in order: a circular shift in [-0.1, 0.1] s (applied to the clip
    at sample resolution and to the spectrogram at frame resolution), one
    time mask (1..20 frames), one frequency mask (1..6 mel bands). Masks
    zero the block across all channels. Deterministic in seed.
    """
    rng = np.random.default_rng(seed)
    fs = clip.sample_rate
    shift = int(round(rng.uniform(-0.1, 0.1) * fs))
    samples = np.roll(clip.samples, shift, axis=1)
    values = np.roll(spec.values, int(round(shift / spec.hop)), axis=2)
    T = values.shape[2]
    t0 = int(rng.integers(0, T))
    tw = int(rng.integers(1, 21))
    values[:, :, t0:t0 + tw] = 0.0
    f0 = int(rng.integers(0, values.shape[1]))
    fw = int(rng.integers(1, 7))
    values[:, f0:f0 + fw, :] = 0.0
    return (MelSpectrogram(values, spec.sample_rate, spec.n_fft, spec.hop),
            MultiChannelClip(samples, fs))
