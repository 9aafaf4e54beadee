import json
import math
import os

import numpy as np
import pytest

from vibroloc.audio_io import SAMPLE_RATE, iter_events, load_manifest, load_proprio
from vibroloc.errors import InvalidStrike, PlanInvalid
from vibroloc.features import gcc_phat_pair, tdoa_estimate
from vibroloc.geometry import LABEL_Z_MAX, ContactPoint, geodesic_distance
from vibroloc.preprocess import peak_index
from vibroloc.simulate import (DatasetPlan, ModalProfile, SimConfig, SplitSpec,
                               StrikeSpec, calibrate_noise, default_plan,
                               event_snr_db, iter_split, make_rod_profiles,
                               plan_rod_pools, scale_noise, sensor_delays,
                               strike_direction, synth_dataset,
                               synth_noise_reference)

Z = np.array([0.0, 0.0, 1.0])


# ------------------------------------------------------------------
# profile / strike / config validation
# ------------------------------------------------------------------

def test_modal_profile_mode_count():
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (100.0, 300.0), (3.0, 3.0), (1.0, 1.0))
    with pytest.raises(InvalidStrike):
        ModalProfile("r", tuple(100.0 * (k + 1) for k in range(6)),
                     (3.0,) * 6, (1.0,) * 6)


def test_modal_profile_ragged_and_ranges():
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (100.0, 300.0, 900.0), (3.0, 3.0), (1.0, 1.0, 1.0))
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (5.0, 300.0, 900.0), (3.0,) * 3, (1.0,) * 3)
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (100.0, 300.0, 30000.0), (3.0,) * 3, (1.0,) * 3)
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (100.0, 300.0, 900.0), (3.0, -1.0, 3.0), (1.0,) * 3)
    with pytest.raises(InvalidStrike):
        ModalProfile("r", (100.0, 300.0, 900.0), (3.0,) * 3, (1.0, 0.0, 1.0))


def test_frequency_tuple_rounds():
    p = ModalProfile("r", (100.123456789, 300.0, 900.0), (3.0,) * 3, (1.0,) * 3)
    assert p.frequency_tuple() == (100.123457, 300.0, 900.0)


def test_strike_validation(rods):
    good = ContactPoint(0.05, 0.3)
    with pytest.raises(InvalidStrike):
        StrikeSpec(good, 0.0, tuple(Z), rods[0])
    with pytest.raises(InvalidStrike):
        StrikeSpec(good, 11.0, tuple(Z), rods[0])
    with pytest.raises(InvalidStrike):
        StrikeSpec(ContactPoint(LABEL_Z_MAX + 0.01, 0.3), 2.0, tuple(Z), rods[0])
    with pytest.raises(InvalidStrike):
        StrikeSpec(good, 2.0, (0.0, 0.0, 2.0), rods[0])
    s = StrikeSpec(good, 2.0, (0.0, 0.0, 1.0), rods[0])
    assert s.direction == (0.0, 0.0, 1.0)


def test_sim_config_validation():
    with pytest.raises(PlanInvalid):
        SimConfig(wave_speed=0.0)
    with pytest.raises(PlanInvalid):
        SimConfig(attenuation_alpha=-1.0)


# ------------------------------------------------------------------
# rod pools
# ------------------------------------------------------------------

def test_make_rod_profiles_ranges():
    rods = make_rod_profiles(6, [0, 1], (200.0, 400.0), "p")
    assert [r.name for r in rods] == [f"p{i}" for i in range(6)]
    for r in rods:
        assert 200.0 <= r.frequencies[0] <= 400.0
        assert 3 <= len(r.frequencies) <= 5
        assert all(f < 18000.0 for f in r.frequencies)


def test_rod_pools_disjoint_fundamentals():
    pools = plan_rod_pools(default_plan(n_train=5, n_test=2))
    train_f0 = [r.frequencies[0] for r in pools["train"]]
    novel_f0 = [r.frequencies[0] for r in pools["novel"]]
    assert max(train_f0) < 580.0 < 620.0 < min(novel_f0)
    assert len(pools["train"]) == 4 and len(pools["novel"]) == 3


# ------------------------------------------------------------------
# event synthesis physics
# ------------------------------------------------------------------

def test_synth_event_deterministic(event_factory, quiet_cfg):
    a = event_factory(0.03, 0.7, [1, 2], quiet_cfg)
    b = event_factory(0.03, 0.7, [1, 2], quiet_cfg)
    assert np.array_equal(a.clip.samples, b.clip.samples)
    assert np.array_equal(a.proprio.positions, b.proprio.positions)
    assert a.metadata == b.metadata


def test_proprio_flag_leaves_audio_unchanged(event_factory, quiet_cfg):
    a = event_factory(0.03, 0.7, [1, 2], quiet_cfg, with_proprio=True)
    b = event_factory(0.03, 0.7, [1, 2], quiet_cfg, with_proprio=False)
    assert b.proprio is None
    assert np.array_equal(a.clip.samples, b.clip.samples)


def test_equidistant_sensors_hear_identical_waveforms(event_factory, quiet_cfg,
                                                      layout, cyl):
    # contact midway between the 0 and 120 degree microphones in azimuth:
    # both lower-ring sensors sit at the same geodesic distance
    contact = ContactPoint(-0.10, math.radians(60.0))
    d = [geodesic_distance(contact, s, cyl) for s in layout.sensors]
    assert abs(d[0] - d[1]) < 1e-15
    ev = event_factory(-0.10, math.radians(60.0), [3, 1], quiet_cfg)
    ch = ev.clip.samples
    assert np.max(np.abs(ch[0] - ch[1])) < 1e-9


def test_rms_falls_with_distance(event_factory, quiet_cfg, layout, cyl):
    contact = ContactPoint(-0.10, 0.0)
    ev = event_factory(-0.10, 0.0, [4, 4], quiet_cfg)
    d = np.array([geodesic_distance(contact, s, cyl) for s in layout.sensors])
    rms = np.sqrt(np.mean(ev.clip.samples ** 2, axis=1))
    assert rms[int(np.argmin(d))] > rms[int(np.argmax(d))]


def _measured_lags(ev, pairs):
    out = []
    for i, j in pairs:
        vec = gcc_phat_pair(ev.clip.samples[i], ev.clip.samples[j], max_lag=160)
        est = tdoa_estimate(vec)
        assert est.confident
        out.append(est.lag_samples)
    return out


def _phase_slope_delay(x, y):
    """Energy-weighted cross-spectrum phase slope, in samples (y lags x)."""
    n = 2 * x.shape[0]
    R = np.fft.rfft(x, n) * np.conj(np.fft.rfft(y, n))
    w = np.abs(R)
    ph = np.unwrap(np.angle(R))
    f = np.fft.rfftfreq(n, 1.0)
    keep = (w > 0.01 * w.max()) & (f * SAMPLE_RATE < 9000.0)
    return np.polyfit(f[keep], ph[keep], 1, w=w[keep])[0] / (2.0 * math.pi)


def test_commanded_delays_realized_exactly(event_factory, quiet_cfg, layout, cyl):
    # with the distance lowpass disabled the only inter-channel difference
    # is the commanded fractional delay; the cross-spectrum phase slope over
    # the energetic band recovers it to millisample precision
    from dataclasses import replace
    cfg = replace(quiet_cfg, dispersion_hz_per_m=0.0, base_cutoff_hz=30000.0)
    contact = ContactPoint(0.06, 1.1)
    ev = event_factory(0.06, 1.1, [7, 0], cfg)
    delays = sensor_delays(contact, layout, cyl, cfg)
    for i, j in ((0, 3), (1, 4), (2, 5), (0, 5)):
        got = _phase_slope_delay(ev.clip.samples[i], ev.clip.samples[j])
        want = (delays[j] - delays[i]) * SAMPLE_RATE
        assert abs(got - want) < 0.02


def test_tdoa_estimates_track_geometry(event_factory, quiet_cfg, layout, cyl):
    # end to end through the whitened correlator: the hard onsets alias near
    # Nyquist, which the phase transform weights like any other bin, so the
    # budget is one sample rather than the correlator's bandlimited floor
    contact = ContactPoint(0.06, 1.1)
    ev = event_factory(0.06, 1.1, [7, 0], quiet_cfg)
    delays = sensor_delays(contact, layout, cyl, quiet_cfg)
    pairs = ((0, 3), (1, 4), (2, 5), (0, 5))
    for (i, j), got in zip(pairs, _measured_lags(ev, pairs)):
        want = (delays[j] - delays[i]) * SAMPLE_RATE
        assert abs(got - want) < 1.0


def test_onset_in_commanded_band(event_factory, quiet_cfg):
    ev = event_factory(0.0, 0.2, [9, 9], quiet_cfg)
    onset = float(ev.metadata["onset_s"])
    assert 0.9 <= onset <= 1.1
    peak = peak_index(ev.clip) / SAMPLE_RATE
    assert onset <= peak <= onset + 0.1


def test_clip_is_float32_exact(event_factory):
    ev = event_factory(0.02, -0.4, [6, 2], SimConfig())
    s = ev.clip.samples
    assert np.array_equal(s, s.astype(np.float32).astype(np.float64))


def test_proprio_kinematics(event_factory, quiet_cfg):
    ev = event_factory(0.04, 0.9, [2, 8], quiet_cfg, speed=2.0, tilt=0.1)
    tr = ev.proprio
    assert tr.timestamps.shape == (100,)
    assert np.allclose(np.linalg.norm(tr.orientations, axis=1), 1.0)
    d = np.asarray(strike_direction(0.9, 0.0, 0.1))
    # cruise-phase velocity points along the strike direction at the
    # commanded speed
    v = tr.velocities[20:49]
    assert np.allclose(v.mean(axis=0), 2.0 * d, atol=0.01)
    # motion stops at contact (t = 0.5)
    assert np.allclose(tr.positions[60], tr.positions[90], atol=0.01)
    step = tr.positions[48] - tr.positions[30]
    assert np.dot(step / np.linalg.norm(step), d) > 0.99


def test_strike_direction_unit_and_azimuth():
    d = np.asarray(strike_direction(0.8, 0.0, 0.0))
    assert abs(np.linalg.norm(d) - 1.0) < 1e-12
    assert abs(math.atan2(d[1], d[0]) - 0.8) < 1e-12
    tilted = np.asarray(strike_direction(0.8, 0.1, 0.3))
    assert abs(np.linalg.norm(tilted) - 1.0) < 1e-12
    assert abs(math.atan2(tilted[1], tilted[0]) - 0.9) < 1e-12
    assert tilted[2] > 0.0


# ------------------------------------------------------------------
# noise reference and SNR control
# ------------------------------------------------------------------

def test_noise_reference_is_strike_free():
    ref = synth_noise_reference(SimConfig(), [42, 0])
    assert ref.n_samples == 2 * SAMPLE_RATE
    crest = np.max(np.abs(ref.samples)) / np.sqrt(np.mean(ref.samples ** 2))
    assert crest < 8.0


def test_noise_reference_ignores_burst_clutter():
    noisy = SimConfig(leaf_level=0.05)
    clean = SimConfig(leaf_level=0.0)
    a = synth_noise_reference(noisy, [42, 0])
    b = synth_noise_reference(clean, [42, 0])
    assert np.array_equal(a.samples, b.samples)


def test_scale_noise_scales_all_levels():
    cfg = SimConfig(leaf_level=0.01)
    s = scale_noise(cfg, 2.5)
    assert s.motor_level == cfg.motor_level * 2.5
    assert s.ambient_level == cfg.ambient_level * 2.5
    assert s.leaf_level == cfg.leaf_level * 2.5
    assert s.wave_speed == cfg.wave_speed


def test_scaling_noise_shifts_snr_exactly(rods, layout, cyl):
    strike = StrikeSpec(ContactPoint(0.02, 0.5), 2.0,
                        strike_direction(0.5, 0.0, 0.1), rods[0])
    cfg = SimConfig()
    base = event_snr_db(strike, layout, cyl, cfg, [11, 3])
    tenx = event_snr_db(strike, layout, cyl, scale_noise(cfg, 10.0), [11, 3])
    assert abs((base - tenx) - 20.0) < 1e-9


def test_calibrate_noise_hits_target_exactly(rods, layout, cyl):
    strike = StrikeSpec(ContactPoint(-0.03, 2.0), 1.5,
                        strike_direction(2.0, 0.0, 0.05), rods[1])
    cfg = SimConfig(leaf_level=0.004)
    cal = calibrate_noise(strike, layout, cyl, cfg, 20.0, [13, 5])
    got = event_snr_db(strike, layout, cyl, cal, [13, 5])
    assert abs(got - 20.0) < 1e-9


# ------------------------------------------------------------------
# splits and plans
# ------------------------------------------------------------------

def test_default_plan_shape():
    plan = default_plan(n_train=50, n_test=10)
    names = [s.name for s in plan.all_splits()]
    assert names == ["train", "test1", "test2", "test3", "test4"]
    assert plan.train.count == 50
    assert all(s.count == 10 for s in plan.tests)
    by = {s.name: s for s in plan.tests}
    assert by["test1"].rod_pool == "train"
    assert by["test2"].rod_pool == "novel"
    assert by["test3"].leaf_level > 0.0 and by["test3"].tilt_sigma == 0.25
    assert by["test4"].leaf_level == 0.0 and not by["test4"].with_proprio
    assert by["test3"].speed_range == by["test4"].speed_range == (0.6, 4.2)


@pytest.mark.parametrize("mutate", [
    lambda: DatasetPlan(SplitSpec("a", 5, "train"),
                        (SplitSpec("a", 5, "train"),)),
    lambda: DatasetPlan(SplitSpec("a", 0, "train"),
                        (SplitSpec("b", 5, "train"),)),
    lambda: DatasetPlan(SplitSpec("a", 5, "train"),
                        (SplitSpec("b", 5, "train", speed_range=(3.0, 1.0)),)),
    lambda: DatasetPlan(SplitSpec("a", 5, "shed"),
                        (SplitSpec("b", 5, "train"),)),
    lambda: DatasetPlan(SplitSpec("a", 5, "train"),
                        (SplitSpec("b", 5, "train"),), n_rods_train=0),
])
def test_plan_validation(mutate):
    with pytest.raises(PlanInvalid):
        mutate()


def _tiny_plan(n_train=3, n_test=2, seed=5):
    return DatasetPlan(
        train=SplitSpec("train", n_train, "train"),
        tests=(SplitSpec("test1", n_test, "train"),),
        n_rods_train=2, n_rods_novel=1, master_seed=seed)


def test_iter_split_deterministic_and_labeled(quiet_cfg, layout, cyl):
    plan = _tiny_plan()
    first = list(iter_split(plan, plan.train, quiet_cfg, layout, cyl))
    again = list(iter_split(plan, plan.train, quiet_cfg, layout, cyl))
    assert [i for i, _ in first] == [0, 1, 2]
    for (_, a), (_, b) in zip(first, again):
        assert np.array_equal(a.clip.samples, b.clip.samples)
    for _, ev in first:
        assert abs(ev.label.z) <= LABEL_Z_MAX
        assert -math.pi <= ev.label.theta <= math.pi
        assert ev.metadata["split"] == "train"
        assert ev.proprio is not None
    other = next(iter(iter_split(plan, plan.tests[0], quiet_cfg, layout, cyl)))[1]
    assert not np.array_equal(first[0][1].clip.samples, other.clip.samples)


def test_iter_split_respects_proprio_flag(quiet_cfg, layout, cyl):
    plan = DatasetPlan(
        train=SplitSpec("train", 1, "train"),
        tests=(SplitSpec("bare", 1, "train", with_proprio=False),),
        n_rods_train=1, n_rods_novel=1)
    _, ev = next(iter(iter_split(plan, plan.tests[0], quiet_cfg, layout, cyl)))
    assert ev.proprio is None


# ------------------------------------------------------------------
# on-disk datasets
# ------------------------------------------------------------------

def test_synth_dataset_round_trip(tmp_path, quiet_cfg, layout, cyl):
    plan = _tiny_plan()
    calls = []
    manifests = synth_dataset(plan, quiet_cfg, tmp_path, layout, cyl,
                              progress=lambda *a: calls.append(a))
    assert set(manifests) == {"train", "test1"}
    assert len(calls) == 5
    assert os.path.exists(tmp_path / "noise_reference.wav")
    with open(tmp_path / "sim_config.json") as f:
        blob = json.load(f)
    assert blob["kind"] == "sim_config"
    assert blob["plan"]["master_seed"] == 5

    entries = load_manifest(manifests["train"])
    assert len(entries) == 3
    loaded = list(iter_events(manifests["train"], tmp_path))
    fresh = list(iter_split(plan, plan.train, quiet_cfg, layout, cyl))
    for (entry, got), (_, want) in zip(loaded, fresh):
        assert np.array_equal(got.clip.samples, want.clip.samples)
        assert abs(got.label.z - want.label.z) < 1e-12
        assert abs(got.label.theta - want.label.theta) < 1e-12
        tr = load_proprio(tmp_path / entry.proprio_path)
        assert np.array_equal(tr.positions, want.proprio.positions)
