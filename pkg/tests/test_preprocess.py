import math

import numpy as np
import pytest

from vibroloc.audio_io import MultiChannelClip
from vibroloc.errors import (ClipTooShort, DegenerateStd, EmptyInput,
                             GeometryMismatch, IoFailure, MalformedRecord)
from vibroloc.features import mel_spectrogram
from vibroloc.preprocess import (NormAccumulator, PipelineConfig,
                                 fit_noise_profile, fit_norm_stats,
                                 load_noise_profile, load_norm_stats,
                                 load_pipeline_config, normalize,
                                 per_trial_stats, save_noise_profile,
                                 save_norm_stats, save_pipeline_config,
                                 spectral_gate, trim_to_window)

FS = 44100


def _noise(rng, n=2 * FS, scale=0.01):
    return MultiChannelClip(rng.normal(scale=scale, size=(6, n)), FS)


def _tone_burst(rng, n=2 * FS, f=1500.0, at=0.9, width=0.15, amp=0.5):
    t = np.arange(n) / FS
    env = np.exp(-0.5 * ((t - at) / width) ** 2)
    sig = amp * env * np.sin(2.0 * math.pi * f * t)
    return MultiChannelClip(np.tile(sig, (6, 1)), FS)


# ------------------------------------------------------------------
# noise profile and gating
# ------------------------------------------------------------------

def test_profile_shapes(rng):
    prof = fit_noise_profile(_noise(rng))
    assert prof.means.shape == (6, 257)
    assert prof.stds.shape == (6, 257)
    assert np.all(prof.means > 0.0)
    assert np.all(prof.stds >= 0.0)


def test_gate_passes_loud_signal(rng):
    prof = fit_noise_profile(_noise(rng, scale=0.001))
    clip = _tone_burst(rng)
    out = spectral_gate(clip, prof)
    res = out.samples - clip.samples
    rel = np.sqrt(np.mean(res ** 2)) / np.sqrt(np.mean(clip.samples ** 2))
    assert rel < 5e-3


def test_gate_attenuates_matched_noise(rng):
    prof = fit_noise_profile(_noise(rng, scale=0.01))
    other = _noise(np.random.default_rng(99), scale=0.01)
    out = spectral_gate(other, prof)
    ratio = np.sqrt(np.mean(out.samples ** 2)) / np.sqrt(np.mean(other.samples ** 2))
    assert ratio < 0.1


def test_gate_never_amplifies(rng):
    prof = fit_noise_profile(_noise(rng, scale=0.01))
    for seed in (1, 2, 3):
        r = np.random.default_rng(seed)
        mix = _noise(r, scale=0.02).samples + _tone_burst(r, amp=0.2).samples
        clip = MultiChannelClip(mix, FS)
        out = spectral_gate(clip, prof)
        assert np.sqrt(np.mean(out.samples ** 2)) <= \
            np.sqrt(np.mean(clip.samples ** 2)) * (1.0 + 1e-9)


def test_gate_nearly_idempotent(rng):
    # drift of a second pass is bounded by floor_gain * sub-threshold energy,
    # so at the rig's representative noise floor (~5e-4 RMS) a regate moves
    # the signal by well under 1e-4 RMS
    prof = fit_noise_profile(_noise(rng, scale=5e-4))
    mix = _tone_burst(rng, amp=0.4).samples + _noise(rng, scale=5e-4).samples
    clip = MultiChannelClip(mix, FS)
    once = spectral_gate(clip, prof)
    twice = spectral_gate(once, prof)
    drift = np.sqrt(np.mean((twice.samples - once.samples) ** 2))
    assert drift < 1e-4


def test_gate_preserves_length(rng):
    prof = fit_noise_profile(_noise(rng))
    clip = _noise(rng, n=70000)
    assert spectral_gate(clip, prof).n_samples == 70000


def test_gate_silence_stays_silent(rng):
    prof = fit_noise_profile(_noise(rng))
    silence = MultiChannelClip(np.zeros((6, FS)), FS)
    out = spectral_gate(silence, prof)
    assert np.max(np.abs(out.samples)) == 0.0


def test_gate_zero_threshold_is_identity(rng):
    zero = fit_noise_profile(MultiChannelClip(np.zeros((6, FS)), FS))
    clip = _noise(rng, scale=0.05)
    out = spectral_gate(clip, zero)
    err = np.sqrt(np.mean((out.samples - clip.samples) ** 2))
    assert err < 1e-6


def test_gate_removes_tone_keeps_impulse(rng):
    # tone-noise profile: gating cuts the tone >= 20 dB, impulse peak within 10%
    t = np.arange(2 * FS) / FS
    tone = 0.02 * np.sin(2.0 * math.pi * 700.0 * t)
    ref = MultiChannelClip(np.tile(tone, (6, 1)) + rng.normal(
        scale=1e-4, size=(6, 2 * FS)), FS)
    prof = fit_noise_profile(ref)
    data = np.tile(tone, (6, 1)) + rng.normal(scale=1e-4, size=(6, 2 * FS))
    peak_at = int(1.1 * FS)
    data[:, peak_at] += 0.8
    clip = MultiChannelClip(data, FS)
    out = spectral_gate(clip, prof)

    def tone_energy(x):
        X = np.fft.rfft(x[0])
        f = np.fft.rfftfreq(x.shape[1], 1.0 / FS)
        band = (f > 650.0) & (f < 750.0)
        return float(np.sum(np.abs(X[band]) ** 2))

    drop_db = 10.0 * math.log10(tone_energy(clip.samples) / tone_energy(out.samples))
    assert drop_db >= 20.0
    assert out.samples[0, peak_at] == pytest.approx(data[0, peak_at], rel=0.1)


def test_profile_too_short(rng):
    with pytest.raises(Exception) as err:
        fit_noise_profile(_noise(rng, n=FS // 4))
    assert "0.5" in str(err.value)


def test_gate_channel_mismatch(rng):
    full = fit_noise_profile(_noise(rng))
    stale = type(full)(full.means[:3], full.stds[:3])
    with pytest.raises(GeometryMismatch):
        spectral_gate(_noise(rng), stale)


# ------------------------------------------------------------------
# window trimming
# ------------------------------------------------------------------

def test_trim_centers_the_peak_exactly(rng):
    clip = _tone_burst(rng, at=1.2, width=0.02)
    raw_peak = int(np.argmax(np.abs(clip.samples))) % clip.n_samples
    trimmed, start = trim_to_window(clip, 1.0)
    assert trimmed.n_samples == FS
    assert int(np.argmax(np.abs(trimmed.samples))) % FS == FS // 2
    assert start == raw_peak - FS // 2


def test_trim_follows_the_loudest_channel(rng):
    data = rng.normal(scale=0.01, size=(6, 2 * FS))
    data[3, 30000] = 5.0  # global peak sits in channel 3
    trimmed, start = trim_to_window(MultiChannelClip(data, FS), 1.0)
    assert start == 30000 - FS // 2
    assert trimmed.samples[3, FS // 2] == 5.0


def test_trim_zero_pads_at_head(rng):
    # peak at 0.1 s of a 2 s clip: window [-0.4, 0.6] s, head padded
    data = rng.normal(scale=0.01, size=(6, 2 * FS))
    peak_at = int(0.1 * FS)
    data[0, peak_at] = 3.0
    trimmed, start = trim_to_window(MultiChannelClip(data, FS), 1.0)
    pad = FS // 2 - peak_at
    assert start == -pad
    assert np.all(trimmed.samples[:, :pad] == 0.0)
    assert trimmed.samples[0, FS // 2] == 3.0
    np.testing.assert_array_equal(trimmed.samples[:, pad:],
                                  data[:, :FS - pad])


def test_trim_too_short(rng):
    clip = MultiChannelClip(rng.normal(size=(6, FS // 2)), FS)
    with pytest.raises(ClipTooShort):
        trim_to_window(clip, 1.0)


# ------------------------------------------------------------------
# normalization statistics
# ------------------------------------------------------------------

def test_accumulator_matches_direct(rng):
    specs = [mel_spectrogram(_noise(rng, n=FS)) for _ in range(3)]
    acc = NormAccumulator()
    for s in specs:
        acc.add(s)
    stats = acc.finalize()
    direct = fit_norm_stats(specs)
    np.testing.assert_allclose(stats.mean, direct.mean, atol=1e-10)
    np.testing.assert_allclose(stats.std, direct.std, atol=1e-10)
    # oracle: plain concatenation statistics per channel
    concat = np.concatenate([s.values.reshape(6, -1) for s in specs], axis=1)
    np.testing.assert_allclose(stats.mean, concat.mean(axis=1), atol=1e-10)
    np.testing.assert_allclose(stats.std, concat.std(axis=1), atol=1e-10)


def test_normalize_formula(rng):
    spec = mel_spectrogram(_noise(rng, n=FS))
    stats = fit_norm_stats([spec])
    out = normalize(spec, stats)
    want = (spec.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    np.testing.assert_allclose(out.values, want, atol=1e-12)
    assert np.abs(out.values.mean(axis=(1, 2))).max() < 1e-10


def test_degenerate_std_rejected():
    # silence maps every mel cell to the same log floor
    spec = mel_spectrogram(MultiChannelClip(np.zeros((6, FS)), FS))
    with pytest.raises(DegenerateStd):
        fit_norm_stats([spec])


def test_empty_stats_rejected():
    with pytest.raises(EmptyInput):
        fit_norm_stats([])
    with pytest.raises(EmptyInput):
        NormAccumulator().finalize()


def test_per_trial_stats(rng):
    spec = mel_spectrogram(_noise(rng, n=FS))
    stats = per_trial_stats(spec)
    out = normalize(spec, stats)
    assert np.abs(out.values.mean(axis=(1, 2))).max() < 1e-10
    assert np.abs(out.values.std(axis=(1, 2)) - 1.0).max() < 1e-10


# ------------------------------------------------------------------
# sidecar files
# ------------------------------------------------------------------

def test_profile_sidecar_round_trip(tmp_path, rng):
    prof = fit_noise_profile(_noise(rng))
    path = tmp_path / "profile.json"
    save_noise_profile(prof, path)
    back = load_noise_profile(path)
    np.testing.assert_array_equal(back.means, prof.means)
    np.testing.assert_array_equal(back.stds, prof.stds)


def test_stats_sidecar_round_trip(tmp_path, rng):
    stats = fit_norm_stats([mel_spectrogram(_noise(rng, n=FS))])
    path = tmp_path / "stats.json"
    save_norm_stats(stats, path)
    back = load_norm_stats(path)
    np.testing.assert_array_equal(back.mean, stats.mean)
    np.testing.assert_array_equal(back.std, stats.std)


def test_pipeline_sidecar_round_trip(tmp_path):
    cfg = PipelineConfig(k_sigma=2.0, apply_gate=False, max_lag=100)
    path = tmp_path / "pipeline.json"
    save_pipeline_config(cfg, path)
    assert load_pipeline_config(path) == cfg


def test_sidecar_kind_checked(tmp_path, rng):
    stats = fit_norm_stats([mel_spectrogram(_noise(rng, n=FS))])
    path = tmp_path / "stats.json"
    save_norm_stats(stats, path)
    with pytest.raises(MalformedRecord):
        load_noise_profile(path)


def test_sidecar_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_norm_stats(tmp_path / "absent.json")
