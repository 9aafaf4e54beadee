import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.signal import butter, lfilter

from vibroloc import _accel
from vibroloc.kernels import (_biquad_jit, _biquad_loop, _grid_sse_jit,
                              _min_sqdist_jit, _mix_components_jit,
                              _mix_components_loop, biquad, grid_sse,
                              grid_sse_numpy, min_sqdist, min_sqdist_numpy,
                              mix_components, mix_components_numpy)

FS = 44100.0


def _mix_params(rng, n_comp=12):
    freqs = rng.uniform(120.0, 9000.0, n_comp)
    decays = rng.uniform(40.0, 600.0, n_comp)
    amps = rng.uniform(0.05, 1.0, n_comp)
    phases = rng.uniform(-math.pi, math.pi, n_comp)
    delays = rng.uniform(0.0, 4e-4, 6)
    gains = rng.uniform(0.3, 1.0, 6)
    return delays, gains, freqs, decays, amps, phases


# ------------------------------------------------------------------
# damped-sinusoid mixdown
# ------------------------------------------------------------------

def test_mix_twins_agree(rng):
    # recurrence loop vs vectorized closed form: two different algorithms
    args = (8820, FS, 0.05) + _mix_params(rng)
    ref = mix_components_numpy(*args)
    loop = _mix_components_loop(*args)
    jitted = _mix_components_jit(*args)
    scale = np.max(np.abs(ref))
    assert np.max(np.abs(loop - ref)) / scale < 1e-9
    assert np.max(np.abs(jitted - ref)) / scale < 1e-9


def test_mix_dispatcher_matches_a_twin(rng):
    args = (4410, FS, 0.02) + _mix_params(rng, 6)
    got = mix_components(*args)
    ref = mix_components_numpy(*args)
    assert np.max(np.abs(got - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_mix_single_sample_hand_value(rng):
    delays, gains, freqs, decays, amps, phases = _mix_params(rng, 5)
    onset = 0.01
    out = mix_components_numpy(2000, FS, onset, delays, gains, freqs,
                               decays, amps, phases)
    s, i = 3, 1500
    t0 = onset + delays[s]
    acc = 0.0
    for k in range(5):
        tr = i / FS - t0
        acc += (amps[k] * gains[s] * math.exp(-decays[k] * tr)
                * math.cos(2.0 * math.pi * freqs[k] * tr + phases[k]))
    assert abs(out[s, i] - acc) < 1e-12


def test_mix_silent_before_per_channel_onset(rng):
    delays, gains, freqs, decays, amps, phases = _mix_params(rng)
    onset = 0.03
    out = mix_components(8820, FS, onset, delays, gains, freqs,
                         decays, amps, phases)
    for s in range(6):
        i0 = int(np.ceil((onset + delays[s]) * FS))
        assert np.all(out[s, :i0] == 0.0)
        assert np.any(out[s, i0:i0 + 50] != 0.0)


def test_mix_fractional_delay_shifts_waveform(rng):
    # two sensors with delays differing by exactly 2.5 samples must produce
    # waveforms equal under an exact 2.5-sample comparison of the closed form
    freqs = np.array([700.0])
    decays = np.array([30.0])
    amps = np.array([1.0])
    phases = np.array([0.4])
    delays = np.array([0.0, 2.5 / FS])
    gains = np.array([1.0, 1.0])
    out = mix_components_numpy(4000, FS, 0.01, delays, gains, freqs,
                               decays, amps, phases)
    t = np.arange(4000) / FS
    for s, d in enumerate(delays):
        tr = t - 0.01 - d
        live = tr >= 0
        want = np.exp(-30.0 * tr[live]) * np.cos(2.0 * np.pi * 700.0 * tr[live] + 0.4)
        assert np.allclose(out[s, live], want, atol=1e-12)


# ------------------------------------------------------------------
# biquad
# ------------------------------------------------------------------

def test_biquad_loop_matches_scipy(rng):
    x = rng.normal(size=4096)
    b, a = butter(2, 0.15)
    got = _biquad_loop(x, b[0], b[1], b[2], a[1], a[2])
    want = lfilter(b, a, x)
    assert np.allclose(got, want, rtol=0.0, atol=1e-12)


def test_biquad_jit_bitwise_vs_loop(rng):
    x = rng.normal(size=4096)
    b, a = butter(2, 0.15)
    got = _biquad_jit(x, b[0], b[1], b[2], a[1], a[2])
    want = _biquad_loop(x, b[0], b[1], b[2], a[1], a[2])
    assert np.array_equal(got, want)


def test_biquad_unity_dc_gain():
    b, a = butter(2, 0.1)
    y = biquad(np.ones(8000), b[0], b[1], b[2], a[1], a[2])
    assert abs(y[-1] - 1.0) < 1e-9


def test_biquad_attenuates_above_cutoff():
    b, a = butter(2, 2.0 * 450.0 / FS)
    t = np.arange(int(FS)) / FS
    hi = np.sin(2.0 * np.pi * 4000.0 * t)
    y = biquad(hi, b[0], b[1], b[2], a[1], a[2])
    tail = slice(2000, None)
    assert np.sqrt(np.mean(y[tail] ** 2)) < 0.02 * np.sqrt(np.mean(hi[tail] ** 2))


# ------------------------------------------------------------------
# grid scoring
# ------------------------------------------------------------------

def test_grid_sse_matches_double_loop(rng):
    pred = rng.normal(size=(40, 15))
    obs = rng.normal(size=15)
    want = np.array([sum((obs[p] - pred[c, p]) ** 2 for p in range(15))
                     for c in range(40)])
    for got in (grid_sse_numpy(pred, obs), _grid_sse_jit(pred, obs),
                grid_sse(pred, obs)):
        assert np.allclose(got, want, rtol=1e-12, atol=0.0)


def test_grid_sse_zero_on_exact_match(rng):
    pred = rng.normal(size=(7, 15))
    out = grid_sse(pred, pred[4])
    assert out[4] == 0.0
    assert np.all(out[np.arange(7) != 4] > 0.0)


# ------------------------------------------------------------------
# nearest-neighbor squared distances
# ------------------------------------------------------------------

def test_min_sqdist_brute_force_oracle(rng):
    a = rng.normal(size=(40, 3)) * 0.3
    b = rng.normal(size=(60, 3)) * 0.3
    want = np.empty(40)
    for i in range(40):
        want[i] = min((a[i, 0] - b[j, 0]) ** 2 + (a[i, 1] - b[j, 1]) ** 2
                      + (a[i, 2] - b[j, 2]) ** 2 for j in range(60))
    assert np.allclose(min_sqdist(a, b), want, rtol=1e-12, atol=0.0)


def test_min_sqdist_twins_bitwise(rng):
    # chamfer distances must not depend on the acceleration backend, so the
    # twins share one reduction order and must agree to the last bit
    a = np.ascontiguousarray(rng.normal(size=(500, 3)) * 0.4)
    b = np.ascontiguousarray(rng.normal(size=(700, 3)) * 0.4)
    assert np.array_equal(_min_sqdist_jit(a, b), min_sqdist_numpy(a, b))


def test_min_sqdist_twins_bitwise_chunked(rng):
    # large second cloud forces the numpy twin through its chunked path
    a = np.ascontiguousarray(rng.normal(size=(50, 3)))
    b = np.ascontiguousarray(rng.normal(size=(4096, 3)))
    assert np.array_equal(_min_sqdist_jit(a, b), min_sqdist_numpy(a, b))


def test_min_sqdist_zero_for_shared_points(rng):
    b = rng.normal(size=(30, 3))
    out = min_sqdist(b[:5], b)
    assert np.array_equal(out, np.zeros(5))


# ------------------------------------------------------------------
# backend selection
# ------------------------------------------------------------------

@pytest.mark.parametrize("val,want", [("1", True), ("true", True),
                                      (" YES ", True), ("", False),
                                      ("0", False), ("no", False)])
def test_flag_parsing(monkeypatch, val, want):
    monkeypatch.setenv(_accel.ENV_FLAG, val)
    assert _accel._flag_set() is want


def test_env_flag_switches_backend():
    code = "import vibroloc._accel as a; print(int(a.NUMBA_ENABLED))"
    env = dict(os.environ)
    env.pop(_accel.ENV_FLAG, None)
    on = subprocess.run([sys.executable, "-c", code], env=env,
                        capture_output=True, text=True, check=True)
    env[_accel.ENV_FLAG] = "1"
    off = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert on.stdout.strip() == "1"
    assert off.stdout.strip() == "0"
